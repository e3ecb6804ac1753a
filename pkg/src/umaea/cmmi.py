"""Missing-modality imagination.

A single-layer variational encoder maps the tri-modal hybrid feature
(relation + attribute + graph, 3d wide) to a latent mean and log-variance;
the reparameterized sample acts as a pseudo-visual feature and a
single-layer decoder maps it back. Training combines the Gaussian-prior
KL, both reconstruction errors, and a similarity-structure distillation
from the hybrid space into the pseudo-visual space. Image-complete
entities provide the only supervised targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .inits import glorot_normal, zeros

_SELF_MASK = -1e30


@dataclass
class CmmiParams:
    w_enc: nc.Parameter  # (3d, 2d)
    b_enc: nc.Parameter
    w_dec: nc.Parameter  # (d, 3d)
    b_dec: nc.Parameter
    d: int

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, dtype) -> "CmmiParams":
        return cls(
            w_enc=nc.Parameter("cmmi/w_enc", glorot_normal(rng, (3 * d, 2 * d), dtype)),
            b_enc=nc.Parameter("cmmi/b_enc", zeros((2 * d,), dtype)),
            w_dec=nc.Parameter("cmmi/w_dec", glorot_normal(rng, (d, 3 * d), dtype)),
            b_dec=nc.Parameter("cmmi/b_dec", zeros((3 * d,), dtype)),
            d=d,
        )

    def parameters(self) -> list[nc.Parameter]:
        return [self.w_enc, self.b_enc, self.w_dec, self.b_dec]


def cmmi_encode(h_hyb: nc.Tensor, params: CmmiParams,
                tape: nc.Tape | None) -> tuple[nc.Tensor, nc.Tensor]:
    """Affine 3d -> 2d, split into mean and log-variance halves."""
    out = nc.add(nc.matmul(h_hyb, params.w_enc.tensor(tape)),
                 params.b_enc.tensor(tape))
    return nc.slice_cols(out, 0, params.d), nc.slice_cols(out, params.d, 2 * params.d)


def reparameterize(mu: nc.Tensor, log_var: nc.Tensor, z: nc.Tensor) -> nc.Tensor:
    """Pseudo-visual sample z * sigma + mu (z fixed during verification)."""
    sigma = nc.exp(nc.scale(log_var, 0.5))
    return nc.add(nc.mul(z, sigma), mu)


def cmmi_decode(h_bar_v: nc.Tensor, params: CmmiParams,
                tape: nc.Tape | None) -> nc.Tensor:
    return nc.add(nc.matmul(h_bar_v, params.w_dec.tensor(tape)),
                  params.b_dec.tensor(tape))


def kl_loss(mu: nc.Tensor, log_var: nc.Tensor, complete_rows: np.ndarray) -> nc.Tensor:
    """Gaussian-prior KL: per-entity sum over dimensions of
    (mu^2 + sigma^2 - log sigma^2 - 1) / 2, averaged over the
    image-complete rows. Empty row set contributes zero."""
    if len(complete_rows) == 0:
        return nc.constant(np.zeros((), dtype=mu.dtype))
    one = nc.constant(np.ones_like(log_var.data))
    terms = nc.sub(nc.add(nc.mul(mu, mu), nc.exp(log_var)),
                   nc.add(log_var, one))
    rows = nc.reduce_sum(nc.gather_rows(terms, complete_rows), axis=1)
    return nc.scale(nc.reduce_mean(rows), 0.5)


def reconstruction_losses(h_v: nc.Tensor, h_bar_v: nc.Tensor,
                          h_hyb: nc.Tensor, h_bar_hyb: nc.Tensor,
                          complete_rows: np.ndarray,
                          use_mse: bool = False) -> tuple[nc.Tensor, nc.Tensor]:
    """Elementwise reconstruction error of the visual and hybrid features,
    averaged over dimensions and image-complete rows (absolute error by
    default, squared error as the configurable alternative)."""
    if len(complete_rows) == 0:
        zero = nc.constant(np.zeros((), dtype=h_v.dtype))
        return zero, zero

    def _err(pred: nc.Tensor, target: nc.Tensor) -> nc.Tensor:
        delta = nc.sub(nc.gather_rows(pred, complete_rows),
                       nc.gather_rows(target, complete_rows))
        return nc.reduce_mean(nc.mul(delta, delta) if use_mse else nc.abs_(delta))

    return _err(h_bar_v, h_v), _err(h_bar_hyb, h_hyb)


def _masked_pair_logits(z1: nc.Tensor, z2: nc.Tensor, tau: float) -> nc.Tensor:
    b = z1.data.shape[0]
    mask = nc.constant(_SELF_MASK * np.eye(b, dtype=z1.dtype))
    s11 = nc.scale(nc.matmul(z1, nc.transpose(z1)), 1.0 / tau)
    s12 = nc.scale(nc.matmul(z1, nc.transpose(z2)), 1.0 / tau)
    return nc.concat([nc.add(s11, mask), s12], axis=1)


def _row_logsumexp(logits: nc.Tensor) -> nc.Tensor:
    shift = logits.data.max(axis=1, keepdims=True)
    shifted = nc.sub(logits, nc.constant(shift))
    lse = nc.log(nc.reduce_sum(nc.exp(shifted), axis=1))
    return nc.add(lse, nc.constant(shift.reshape(-1)))


def sim_distill_loss(hyb1: nc.Tensor, hyb2: nc.Tensor,
                     bar_v1: nc.Tensor, bar_v2: nc.Tensor,
                     complete_pairs: np.ndarray, tau: float) -> nc.Tensor:
    """KL from the hybrid-space alignment categorical to the pseudo-visual
    one, per pair, averaged over pairs whose entities are both
    image-complete. Candidates follow the in-batch construction."""
    if len(complete_pairs) == 0:
        return nc.constant(np.zeros((), dtype=hyb1.dtype))
    lp = _masked_pair_logits(nc.l2_normalize(hyb1), nc.l2_normalize(hyb2), tau)
    lq = _masked_pair_logits(nc.l2_normalize(bar_v1), nc.l2_normalize(bar_v2), tau)
    p = nc.row_softmax(lp)
    # sum_k p_k (lp_k - lq_k) - (lse_p - lse_q); masked slots have p_k = 0
    # exactly and the mask constant cancels inside lp - lq
    cross = nc.reduce_sum(nc.mul(p, nc.sub(lp, lq)), axis=1)
    kl_rows = nc.sub(cross, nc.sub(_row_logsumexp(lp), _row_logsumexp(lq)))
    return nc.reduce_mean(nc.gather_rows(kl_rows, complete_pairs))


@dataclass
class Stage2Breakdown:
    l_kl: float
    l_re_vis: float
    l_re_hyb: float
    l_sim: float
    l_total: float


def stage2_loss(l_kl: nc.Tensor, l_re_vis: nc.Tensor, l_re_hyb: nc.Tensor,
                l_sim: nc.Tensor) -> tuple[nc.Tensor, Stage2Breakdown]:
    """Unweighted sum of the four second-stage components."""
    total = nc.add(nc.add(l_kl, l_re_vis), nc.add(l_re_hyb, l_sim))
    breakdown = Stage2Breakdown(l_kl=float(l_kl.data), l_re_vis=float(l_re_vis.data),
                                l_re_hyb=float(l_re_hyb.data), l_sim=float(l_sim.data),
                                l_total=float(total.data))
    return total, breakdown
