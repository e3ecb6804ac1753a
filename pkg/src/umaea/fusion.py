"""Stage-1 alignment machinery.

Four modality embeddings per entity are (a) globally mixed into one
weighted concatenation trained contrastively, (b) passed through a single
cross-modal attention layer whose attention mass yields per-entity
modality confidences used to damp unreliable pairs, and (c) re-aligned on
the attention outputs. Contrastive probabilities use in-batch negatives
from both KG sides and L2-normalized embeddings throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .inits import glorot_normal, ones, zeros

MODALITIES = ("g", "r", "a", "v")

_SELF_MASK = -1e30


@dataclass
class ModalityWeights:
    """Softmax-positive global weights, one per modality, shared by both KGs."""

    logits: nc.Parameter

    @classmethod
    def init(cls, dtype) -> "ModalityWeights":
        return cls(logits=nc.Parameter("fusion/modality_logits",
                                       zeros((len(MODALITIES),), dtype)))

    def weights(self, tape: nc.Tape | None) -> nc.Tensor:
        row = nc.reshape(self.logits.tensor(tape), (1, len(MODALITIES)))
        return nc.reshape(nc.row_softmax(row), (len(MODALITIES),))

    def parameters(self) -> list[nc.Parameter]:
        return [self.logits]


@dataclass
class MhcaParams:
    """Shared query/key/value/output maps, feed-forward block, and the two
    post-sublayer normalizations; one set for all modalities."""

    w_q: nc.Parameter
    w_k: nc.Parameter
    w_v: nc.Parameter
    w_o: nc.Parameter
    ffn_w1: nc.Parameter
    ffn_b1: nc.Parameter
    ffn_w2: nc.Parameter
    ffn_b2: nc.Parameter
    ln_attn_gamma: nc.Parameter
    ln_attn_beta: nc.Parameter
    ln_ffn_gamma: nc.Parameter
    ln_ffn_beta: nc.Parameter
    n_heads: int

    @classmethod
    def init(cls, d: int, n_heads: int, ffn_multiplier: int,
             rng: np.random.Generator, dtype) -> "MhcaParams":
        if d % n_heads != 0:
            raise ValueError(f"dim {d} not divisible by {n_heads} heads")
        d_in = ffn_multiplier * d
        return cls(
            w_q=nc.Parameter("mhca/w_q", glorot_normal(rng, (d, d), dtype)),
            w_k=nc.Parameter("mhca/w_k", glorot_normal(rng, (d, d), dtype)),
            w_v=nc.Parameter("mhca/w_v", glorot_normal(rng, (d, d), dtype)),
            w_o=nc.Parameter("mhca/w_o", glorot_normal(rng, (d, d), dtype)),
            ffn_w1=nc.Parameter("mhca/ffn_w1", glorot_normal(rng, (d, d_in), dtype)),
            ffn_b1=nc.Parameter("mhca/ffn_b1", zeros((d_in,), dtype)),
            ffn_w2=nc.Parameter("mhca/ffn_w2", glorot_normal(rng, (d_in, d), dtype)),
            ffn_b2=nc.Parameter("mhca/ffn_b2", zeros((d,), dtype)),
            ln_attn_gamma=nc.Parameter("mhca/ln_attn_gamma", ones((d,), dtype)),
            ln_attn_beta=nc.Parameter("mhca/ln_attn_beta", zeros((d,), dtype)),
            ln_ffn_gamma=nc.Parameter("mhca/ln_ffn_gamma", ones((d,), dtype)),
            ln_ffn_beta=nc.Parameter("mhca/ln_ffn_beta", zeros((d,), dtype)),
            n_heads=n_heads,
        )

    def parameters(self) -> list[nc.Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o,
                self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2,
                self.ln_attn_gamma, self.ln_attn_beta,
                self.ln_ffn_gamma, self.ln_ffn_beta]


@dataclass
class AttentionRecord:
    """Row-stochastic cross-modal attention, per head: query modality ->
    (rows, |M|) tensor whose column j is the mass paid to modality j."""

    beta: list[dict[str, nc.Tensor]]
    n_heads: int


@dataclass
class LossBreakdown:
    l_gmi: float
    l_ecia: float
    l_iir: float
    l_total: float


# ---------------------------------------------------------------------------
# global modality integration

def gmi_embed(h: dict[str, nc.Tensor], weights: nc.Tensor) -> nc.Tensor:
    """Concatenate the per-modality embeddings, each scaled by its global
    weight, in the fixed (g, r, a, v) order."""
    parts = []
    for i, m in enumerate(MODALITIES):
        w_m = nc.gather_rows(weights, np.array([i]))
        parts.append(nc.mul(h[m], w_m))
    return nc.concat(parts, axis=1)


# ---------------------------------------------------------------------------
# alignment probabilities and the contrastive objective

def alignment_probability(src: nc.Tensor, pos: nc.Tensor, negatives: nc.Tensor | None,
                          tau: float, normalize: bool = True) -> nc.Tensor:
    """Probability mass the source row puts on its counterpart against an
    explicit negative set (scalar tensor). Reference form of the in-batch
    computation below."""
    rows = [nc.reshape(pos, (1, -1))]
    if negatives is not None and negatives.data.size:
        rows.append(negatives)
    cand = nc.concat(rows, axis=0)
    src2 = nc.reshape(src, (1, -1))
    if normalize:
        src2 = nc.l2_normalize(src2)
        cand = nc.l2_normalize(cand)
    logits = nc.scale(nc.matmul(src2, nc.transpose(cand)), 1.0 / tau)
    probs = nc.row_softmax(logits)
    return nc.reshape(nc.slice_cols(probs, 0, 1), ())


def batch_alignment_probs(h1: nc.Tensor, h2: nc.Tensor, tau: float,
                          normalize: bool = True) -> tuple[nc.Tensor, nc.Tensor]:
    """Both directional probabilities for every pair of a batch.

    Row i of h1/h2 holds the two sides of pair i. The candidate set of a
    source entity is its counterpart plus every other batch entity from
    both KGs; the entity itself is masked out.
    """
    z1, z2 = (nc.l2_normalize(h1), nc.l2_normalize(h2)) if normalize else (h1, h2)
    b = z1.data.shape[0]
    mask = nc.constant(_SELF_MASK * np.eye(b, dtype=z1.dtype))
    s11 = nc.scale(nc.matmul(z1, nc.transpose(z1)), 1.0 / tau)
    s12 = nc.scale(nc.matmul(z1, nc.transpose(z2)), 1.0 / tau)
    s22 = nc.scale(nc.matmul(z2, nc.transpose(z2)), 1.0 / tau)
    s21 = nc.transpose(s12)
    p_fwd = nc.row_softmax(nc.concat([nc.add(s11, mask), s12], axis=1))
    p_bwd = nc.row_softmax(nc.concat([nc.add(s22, mask), s21], axis=1))
    p12 = nc.diag_part(nc.slice_cols(p_fwd, b, 2 * b))
    p21 = nc.diag_part(nc.slice_cols(p_bwd, b, 2 * b))
    return p12, p21


def contrastive_loss(h1: nc.Tensor, h2: nc.Tensor, tau: float,
                     normalize: bool = True) -> nc.Tensor:
    """Bi-directional in-batch loss: -E_i log[(p(e1,e2) + p(e2,e1)) / 2]."""
    p12, p21 = batch_alignment_probs(h1, h2, tau, normalize)
    return nc.neg(nc.reduce_mean(nc.log(nc.scale(nc.add(p12, p21), 0.5))))


# ---------------------------------------------------------------------------
# cross-modal attention layer

def mhca_layer(h: dict[str, nc.Tensor], params: MhcaParams,
               tape: nc.Tape | None) -> tuple[dict[str, nc.Tensor], AttentionRecord]:
    """One transformer sub-layer mixing each entity's modality vectors.

    All modalities share the head projections; per head, each modality
    attends over the |M| modality vectors of the same entity with scaled
    dot-product scores. Output projection, residual + norm, feed-forward,
    residual + norm.
    """
    d = h[MODALITIES[0]].data.shape[1]
    n_heads = params.n_heads
    d_h = d // n_heads
    w_q = params.w_q.tensor(tape)
    w_k = params.w_k.tensor(tape)
    w_v = params.w_v.tensor(tape)

    head_outs: dict[str, list[nc.Tensor]] = {m: [] for m in MODALITIES}
    beta_per_head: list[dict[str, nc.Tensor]] = []
    for i in range(n_heads):
        lo, hi = i * d_h, (i + 1) * d_h
        q = {m: nc.matmul(h[m], nc.slice_cols(w_q, lo, hi)) for m in MODALITIES}
        k = {m: nc.matmul(h[m], nc.slice_cols(w_k, lo, hi)) for m in MODALITIES}
        v = {m: nc.matmul(h[m], nc.slice_cols(w_v, lo, hi)) for m in MODALITIES}
        betas: dict[str, nc.Tensor] = {}
        for m in MODALITIES:
            cols = [nc.reshape(nc.reduce_sum(nc.mul(q[m], k[j]), axis=1), (-1, 1))
                    for j in MODALITIES]
            scores = nc.scale(nc.concat(cols, axis=1), 1.0 / math.sqrt(d_h))
            betas[m] = nc.row_softmax(scores)
        for m in MODALITIES:
            acc = None
            for j_idx, j in enumerate(MODALITIES):
                term = nc.mul(nc.slice_cols(betas[m], j_idx, j_idx + 1), v[j])
                acc = term if acc is None else nc.add(acc, term)
            head_outs[m].append(acc)
        beta_per_head.append(betas)

    w_o = params.w_o.tensor(tape)
    ffn_w1 = params.ffn_w1.tensor(tape)
    ffn_b1 = params.ffn_b1.tensor(tape)
    ffn_w2 = params.ffn_w2.tensor(tape)
    ffn_b2 = params.ffn_b2.tensor(tape)
    ln_ag = params.ln_attn_gamma.tensor(tape)
    ln_ab = params.ln_attn_beta.tensor(tape)
    ln_fg = params.ln_ffn_gamma.tensor(tape)
    ln_fb = params.ln_ffn_beta.tensor(tape)

    h_hat: dict[str, nc.Tensor] = {}
    for m in MODALITIES:
        merged = head_outs[m][0] if n_heads == 1 else nc.concat(head_outs[m], axis=1)
        attn_out = nc.matmul(merged, w_o)
        mid = nc.layer_norm(nc.add(attn_out, h[m]), ln_ag, ln_ab)
        ffn = nc.add(nc.matmul(nc.relu(nc.add(nc.matmul(mid, ffn_w1), ffn_b1)),
                               ffn_w2), ffn_b2)
        h_hat[m] = nc.layer_norm(nc.add(ffn, mid), ln_fg, ln_fb)
    return h_hat, AttentionRecord(beta=beta_per_head, n_heads=n_heads)


def entity_confidence(record: AttentionRecord) -> nc.Tensor:
    """Per-entity modality confidences from attention mass.

    The mass *received* by each modality, summed over heads and querying
    modalities and divided by sqrt(|M| * heads), is softmax-normalized
    across modalities. (Row sums of the row-stochastic attention are
    constant by construction, so incoming mass is the discriminative
    aggregate.)
    """
    total = None
    for betas in record.beta:
        for m in MODALITIES:
            total = betas[m] if total is None else nc.add(total, betas[m])
    scaled = nc.scale(total, 1.0 / math.sqrt(len(MODALITIES) * record.n_heads))
    return nc.row_softmax(scaled)


# ---------------------------------------------------------------------------
# stage-1 objectives

def ecia_loss(h: dict[str, nc.Tensor], b: int, confidence: nc.Tensor, tau: float,
              detach_confidence: bool = False) -> tuple[nc.Tensor, dict[str, nc.Tensor]]:
    """Confidence-damped intra-modal alignment, summed over modalities.

    `h[m]` holds the 2B batch rows (side-1 pairs first, then side-2);
    `confidence` is the matching (2B, |M|) tensor. Each pair's factor is
    the smaller of its two entities' confidences for the modality, applied
    inside the log so a constant factor shifts the loss additively.
    """
    conf = nc.constant(confidence.data.copy()) if detach_confidence else confidence
    c1 = nc.gather_rows(conf, np.arange(b))
    c2 = nc.gather_rows(conf, np.arange(b, 2 * b))
    total = None
    per_modality: dict[str, nc.Tensor] = {}
    for i, m in enumerate(MODALITIES):
        p12, p21 = batch_alignment_probs(nc.gather_rows(h[m], np.arange(b)),
                                         nc.gather_rows(h[m], np.arange(b, 2 * b)),
                                         tau)
        phi = nc.minimum(nc.reshape(nc.slice_cols(c1, i, i + 1), (b,)),
                         nc.reshape(nc.slice_cols(c2, i, i + 1), (b,)))
        loss_m = nc.neg(nc.reduce_mean(nc.log(
            nc.mul(phi, nc.scale(nc.add(p12, p21), 0.5)))))
        per_modality[m] = loss_m
        total = loss_m if total is None else nc.add(total, loss_m)
    return total, per_modality


def iir_loss(h_hat: dict[str, nc.Tensor], b: int, tau: float) -> nc.Tensor:
    """Contrastive loss on the attention-layer hidden states, summed over
    modalities."""
    total = None
    for m in MODALITIES:
        loss_m = contrastive_loss(nc.gather_rows(h_hat[m], np.arange(b)),
                                  nc.gather_rows(h_hat[m], np.arange(b, 2 * b)),
                                  tau)
        total = loss_m if total is None else nc.add(total, loss_m)
    return total


def stage1_loss(h_batch: dict[str, nc.Tensor], weights: nc.Tensor, b: int,
                mhca_params: MhcaParams, tau: float, tape: nc.Tape | None,
                detach_confidence: bool = False,
                ) -> tuple[nc.Tensor, LossBreakdown]:
    """Total first-stage objective on one batch of 2B entity rows."""
    h_gmi = gmi_embed(h_batch, weights)
    l_gmi = contrastive_loss(nc.gather_rows(h_gmi, np.arange(b)),
                             nc.gather_rows(h_gmi, np.arange(b, 2 * b)), tau)
    h_hat, record = mhca_layer(h_batch, mhca_params, tape)
    confidence = entity_confidence(record)
    l_ecia, _ = ecia_loss(h_batch, b, confidence, tau, detach_confidence)
    l_iir = iir_loss(h_hat, b, tau)
    total = nc.add(nc.add(l_gmi, l_ecia), l_iir)
    breakdown = LossBreakdown(l_gmi=float(l_gmi.data), l_ecia=float(l_ecia.data),
                              l_iir=float(l_iir.data), l_total=float(total.data))
    return total, breakdown
