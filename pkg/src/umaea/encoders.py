"""Per-modality entity encoders.

Graph structure goes through a two-layer multi-head graph attention
network over the undirected triple adjacency (self-loops added), followed
by a learnable diagonal output transform. Relation, attribute, and visual
inputs each get their own affine projection into the shared dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .inits import glorot_normal, ones, zeros
from .kgdata import MMKG


@dataclass
class GatConfig:
    layers: int = 2
    heads: int = 2
    dim: int = 300
    leaky_relu_slope: float = 0.2
    self_loops: bool = True

    def __post_init__(self) -> None:
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class AdjacencyStructure:
    """Neighbor lists over the combined entity index space of both KGs."""

    n: int
    neighbors: list[np.ndarray]
    _bias_cache: dict = field(default_factory=dict, repr=False)

    def attention_bias(self, dtype) -> np.ndarray:
        """Dense additive mask: 0 on edges (incl. self), a large negative
        value elsewhere, so softmax support is exactly the neighbor set."""
        key = np.dtype(dtype).name
        if key not in self._bias_cache:
            bias = np.full((self.n, self.n), -1e30, dtype=dtype)
            for i, nbrs in enumerate(self.neighbors):
                bias[i, nbrs] = 0.0
            self._bias_cache[key] = bias
        return self._bias_cache[key]


def build_adjacency(kg1: MMKG, kg2: MMKG, self_loops: bool = True) -> AdjacencyStructure:
    """Undirected adjacency over both KGs stacked (KG2 offset by |E1|)."""
    n = kg1.num_entities + kg2.num_entities
    sets: list[set[int]] = [set() for _ in range(n)]
    for kg, offset in ((kg1, 0), (kg2, kg1.num_entities)):
        for h, _, t in kg.triples:
            sets[h + offset].add(t + offset)
            sets[t + offset].add(h + offset)
    if self_loops:
        for i in range(n):
            sets[i].add(i)
    neighbors = [np.array(sorted(s), dtype=np.intp) for s in sets]
    return AdjacencyStructure(n=n, neighbors=neighbors)


@dataclass
class GatParams:
    """One weight matrix and two attention vectors per (layer, head), plus
    the diagonal output scale."""

    heads: list[list[dict[str, nc.Parameter]]]
    diag: nc.Parameter

    @classmethod
    def init(cls, cfg: GatConfig, rng: np.random.Generator, dtype) -> "GatParams":
        d, dh = cfg.dim, cfg.dim // cfg.heads
        layers = []
        for layer in range(cfg.layers):
            heads = []
            for head in range(cfg.heads):
                tag = f"gat/l{layer}/h{head}"
                heads.append({
                    "w": nc.Parameter(f"{tag}/w", glorot_normal(rng, (d, dh), dtype)),
                    "a_src": nc.Parameter(f"{tag}/a_src", glorot_normal(rng, (dh, 1), dtype)),
                    "a_dst": nc.Parameter(f"{tag}/a_dst", glorot_normal(rng, (dh, 1), dtype)),
                })
            layers.append(heads)
        diag = nc.Parameter("gat/diag", ones((d,), dtype))
        return cls(heads=layers, diag=diag)

    def parameters(self) -> list[nc.Parameter]:
        out = []
        for layer in self.heads:
            for head in layer:
                out.extend([head["w"], head["a_src"], head["a_dst"]])
        out.append(self.diag)
        return out


def gat_forward(x: nc.Tensor, adj: AdjacencyStructure, params: GatParams,
                cfg: GatConfig, tape: nc.Tape | None) -> nc.Tensor:
    """Two rounds of additive-attention aggregation, heads concatenated,
    then the diagonal output scale."""
    bias = nc.constant(adj.attention_bias(x.dtype))
    h = x
    for layer in params.heads:
        outs = []
        for head in layer:
            z = nc.matmul(h, head["w"].tensor(tape))
            s_src = nc.matmul(z, head["a_src"].tensor(tape))
            s_dst = nc.matmul(z, head["a_dst"].tensor(tape))
            scores = nc.add(s_src, nc.transpose(s_dst))
            scores = nc.leaky_relu(scores, cfg.leaky_relu_slope)
            attn = nc.row_softmax(nc.add(scores, bias))
            outs.append(nc.matmul(attn, z))
        h = nc.concat(outs, axis=1)
    return nc.mul(h, params.diag.tensor(tape))


@dataclass
class ProjectionParams:
    w: nc.Parameter
    b: nc.Parameter

    @classmethod
    def init(cls, name: str, d_in: int, d_out: int, rng: np.random.Generator,
             dtype) -> "ProjectionParams":
        return cls(w=nc.Parameter(f"proj/{name}/w", glorot_normal(rng, (d_in, d_out), dtype)),
                   b=nc.Parameter(f"proj/{name}/b", zeros((d_out,), dtype)))

    def parameters(self) -> list[nc.Parameter]:
        return [self.w, self.b]


def modality_projection(x_m: nc.Tensor, params: ProjectionParams,
                        tape: nc.Tape | None) -> nc.Tensor:
    return nc.add(nc.matmul(x_m, params.w.tensor(tape)), params.b.tensor(tape))
