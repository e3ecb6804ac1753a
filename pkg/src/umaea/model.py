"""Parameter construction and forward assembly for the full aligner.

Both KGs live in one combined index space (KG2 offset by |E1|): one graph
embedding table, one block-diagonal adjacency, stacked feature constants.
The imagination module is a separate parameter group so the training
stages can freeze either side wholesale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .cmmi import CmmiParams, cmmi_decode, cmmi_encode, reparameterize
from .encoders import (AdjacencyStructure, GatConfig, GatParams,
                       ProjectionParams, build_adjacency, gat_forward,
                       modality_projection)
from .fusion import MhcaParams, ModalityWeights, MODALITIES, gmi_embed
from .kgdata import FeatureBank, MMKG


@dataclass
class ModelDims:
    d: int = 300
    gat_layers: int = 2
    gat_heads: int = 2
    leaky_slope: float = 0.2
    mhca_heads: int = 1
    ffn_multiplier: int = 4


class MainModel:
    """Encoders plus fusion parameters over a paired-KG instance."""

    def __init__(self, kg1: MMKG, kg2: MMKG, bank1: FeatureBank, bank2: FeatureBank,
                 dims: ModelDims, init_rng: np.random.Generator,
                 dtype=nc.TRAIN_DTYPE):
        self.dims = dims
        self.dtype = np.dtype(dtype)
        self.n1 = kg1.num_entities
        self.n2 = kg2.num_entities
        self.n = self.n1 + self.n2

        self.x_r = np.vstack([bank1.x_r, bank2.x_r]).astype(dtype)
        self.x_a = np.vstack([bank1.x_a, bank2.x_a]).astype(dtype)
        self.x_v = np.vstack([bank1.x_v, bank2.x_v]).astype(dtype)
        self.image_mask = np.concatenate([bank1.image_mask, bank2.image_mask])
        self.missing_idx = np.flatnonzero(~self.image_mask)

        self.adjacency: AdjacencyStructure = build_adjacency(kg1, kg2)
        self.gat_cfg = GatConfig(layers=dims.gat_layers, heads=dims.gat_heads,
                                 dim=dims.d, leaky_relu_slope=dims.leaky_slope)

        rng = init_rng
        x_g0 = np.vstack([bank1.x_g, bank2.x_g]).astype(dtype)
        self.x_g = nc.Parameter("x_g", x_g0)
        self.gat = GatParams.init(self.gat_cfg, rng, dtype)
        self.proj_r = ProjectionParams.init("r", self.x_r.shape[1], dims.d, rng, dtype)
        self.proj_a = ProjectionParams.init("a", self.x_a.shape[1], dims.d, rng, dtype)
        self.proj_v = ProjectionParams.init("v", self.x_v.shape[1], dims.d, rng, dtype)
        self.modality_weights = ModalityWeights.init(dtype)
        self.mhca = MhcaParams.init(dims.d, dims.mhca_heads, dims.ffn_multiplier,
                                    rng, dtype)

    def parameters(self) -> list[nc.Parameter]:
        return ([self.x_g] + self.gat.parameters()
                + self.proj_r.parameters() + self.proj_a.parameters()
                + self.proj_v.parameters()
                + self.modality_weights.parameters() + self.mhca.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def modality_embeddings(self, tape: nc.Tape | None,
                            visual_override: nc.Tensor | None = None,
                            ) -> dict[str, nc.Tensor]:
        """All-entity embeddings per modality. `visual_override` replaces
        the visual rows of the image-missing entities (same row order as
        `missing_idx`)."""
        h_g = gat_forward(self.x_g.tensor(tape), self.adjacency, self.gat,
                          self.gat_cfg, tape)
        h_r = modality_projection(nc.constant(self.x_r), self.proj_r, tape)
        h_a = modality_projection(nc.constant(self.x_a), self.proj_a, tape)
        h_v = modality_projection(nc.constant(self.x_v), self.proj_v, tape)
        if visual_override is not None and len(self.missing_idx):
            h_v = nc.scatter_rows(h_v, self.missing_idx, visual_override)
        return {"g": h_g, "r": h_r, "a": h_a, "v": h_v}

    def hybrid(self, h: dict[str, nc.Tensor]) -> nc.Tensor:
        """Tri-modal hybrid feature, relation + attribute + graph order."""
        return nc.concat([h["r"], h["a"], h["g"]], axis=1)

    def global_embedding(self, h: dict[str, nc.Tensor],
                         tape: nc.Tape | None) -> nc.Tensor:
        return gmi_embed(h, self.modality_weights.weights(tape))


class CmmiModule:
    """Imagination parameters behind the encode/sample/decode surface."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=nc.TRAIN_DTYPE):
        self.params = CmmiParams.init(d, rng, dtype)
        self.d = d

    def parameters(self) -> list[nc.Parameter]:
        return self.params.parameters()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def encode(self, h_hyb: nc.Tensor, tape: nc.Tape | None):
        return cmmi_encode(h_hyb, self.params, tape)

    def sample(self, mu: nc.Tensor, log_var: nc.Tensor, z: nc.Tensor) -> nc.Tensor:
        return reparameterize(mu, log_var, z)

    def decode(self, h_bar_v: nc.Tensor, tape: nc.Tape | None) -> nc.Tensor:
        return cmmi_decode(h_bar_v, self.params, tape)
