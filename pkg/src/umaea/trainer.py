"""Staged training orchestration.

Stage 1 trains the main model contrastively. Stage 2 adds the imagination
module in two sub-stages: first the main model is frozen while the
imagination module learns, then the roles flip for a final refinement.
Both sub-stages optimize the combined objective; freezing only switches
which parameters receive updates.

Under iterative mode, mutual-nearest-neighbor test pairs enter a
probation buffer during stage-1 epochs and join the training seeds after
surviving a fixed number of consecutive proposal rounds, with a
one-to-one edit against existing seeds. Metrics are always computed on
the original test pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .cmmi import (kl_loss, reconstruction_losses, sim_distill_loss,
                   stage2_loss)
from .evaluation import build_report, compute_metrics, rank_alignments
from .fusion import MODALITIES, stage1_loss
from .kgdata import (AlignmentSeedSet, FeatureBank, MMKG,
                     build_feature_banks, load_kg_pair, load_pairs,
                     load_visual_features)
from .model import CmmiModule, MainModel, ModelDims
from .optim import AdamW, warmup_cosine_lr
from .umvm import SplitManifest

STAGE1, STAGE2_1, STAGE2_2 = "stage1", "stage2_1", "stage2_2"

# one global seed fans out into fixed sub-streams
SEED_SPLIT, SEED_IMPUTE, SEED_INIT, SEED_TRAIN = 1, 2, 3, 4


class NonFiniteLossError(RuntimeError):
    """A loss component stopped being finite during training."""


class StageOrderError(RuntimeError):
    """Stage 2 requested without a completed stage 1."""


@dataclass
class TrainConfig:
    d: int = 300
    d_r: int = 1000
    d_a: int = 1000
    gat_layers: int = 2
    gat_heads: int = 2
    leaky_slope: float = 0.2
    mhca_heads: int = 1
    ffn_multiplier: int = 4
    tau: float = 0.1
    stage1_epochs: int = 250
    stage2_1_epochs: int = 50
    stage2_2_epochs: int = 100
    batch_size: int = 3500
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_fraction: float = 0.15
    grad_accumulation: int = 1
    holdout_fraction: float = 0.05
    early_stop_patience: int = 20
    iterative: bool = False
    propose_every: int = 5
    promote_after: float = 10
    detach_confidence: bool = False
    mse_reconstruction: bool = False
    rng_seed: int = 0
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, "
                             f"got {self.precision!r}")
        for name in ("d", "d_r", "d_a", "gat_layers", "gat_heads", "mhca_heads",
                     "ffn_multiplier", "batch_size", "grad_accumulation",
                     "propose_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("stage1_epochs", "stage2_1_epochs", "stage2_2_epochs",
                     "early_stop_patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("tau", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if not (0.0 <= self.holdout_fraction < 1.0):
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if self.promote_after < 1:
            raise ValueError("promote_after must be at least 1 (inf disables)")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.promote_after):
            d["promote_after"] = "inf"
        return d


@dataclass
class TrainingData:
    kg1: MMKG
    kg2: MMKG
    bank1: FeatureBank
    bank2: FeatureBank
    seeds: AlignmentSeedSet


def load_training_data(data_dir: str | Path, config: TrainConfig,
                       split_manifest: SplitManifest | None = None) -> TrainingData:
    """Rebuild the feature banks from a prepared dataset directory,
    optionally re-masking images per a split manifest before imputation."""
    data_dir = Path(data_dir)
    kg1, kg2 = load_kg_pair(
        (data_dir / "kg1.triples", data_dir / "kg2.triples"),
        (data_dir / "kg1.attrs", data_dir / "kg2.attrs"),
        (data_dir / "kg1.mask", data_dir / "kg2.mask"))
    x_v1, _ = load_visual_features(data_dir / "kg1.features", kg1)
    x_v2, _ = load_visual_features(data_dir / "kg2.features", kg2)
    if split_manifest is not None:
        m1, m2 = split_manifest.masks(kg1.num_entities, kg2.num_entities)
        if np.any(m1 & ~kg1.image_mask) or np.any(m2 & ~kg2.image_mask):
            raise ValueError("split manifest keeps an entity without a raw image")
        kg1.image_mask = m1
        kg2.image_mask = m2

    seed = config.rng_seed
    init_ss = np.random.SeedSequence(seed + SEED_INIT)
    bank_ss, _, _ = init_ss.spawn(3)
    bank1, bank2 = build_feature_banks(
        kg1, kg2, x_v1, x_v2, config.d, config.d_r, config.d_a,
        init_seed=bank_ss, impute_seed=seed + SEED_IMPUTE)

    train = load_pairs(data_dir / "pairs.train")
    test = load_pairs(data_dir / "pairs.test")
    manifest = json.loads((data_dir / "manifest.json").read_text(encoding="utf-8"))
    seeds = AlignmentSeedSet(train_pairs=train, test_pairs=test,
                             seed_ratio=manifest.get("seed_ratio", 0.0))
    return TrainingData(kg1, kg2, bank1, bank2, seeds)


def make_training_data(kg1: MMKG, kg2: MMKG, bank1: FeatureBank, bank2: FeatureBank,
                       seeds: AlignmentSeedSet, config: TrainConfig,
                       split_manifest: SplitManifest | None = None) -> TrainingData:
    """In-memory variant of `load_training_data` for already-parsed inputs
    (banks need only raw visual features and masks)."""
    if split_manifest is not None:
        m1, m2 = split_manifest.masks(kg1.num_entities, kg2.num_entities)
        kg1.image_mask = m1
        kg2.image_mask = m2
    seed = config.rng_seed
    bank_ss, _, _ = np.random.SeedSequence(seed + SEED_INIT).spawn(3)
    b1, b2 = build_feature_banks(kg1, kg2, bank1.x_v, bank2.x_v,
                                 config.d, config.d_r, config.d_a,
                                 init_seed=bank_ss,
                                 impute_seed=seed + SEED_IMPUTE)
    return TrainingData(kg1, kg2, b1, b2, seeds)


# ---------------------------------------------------------------------------
# iterative bootstrapping primitives

@dataclass
class ProbationBuffer:
    """Consecutive-hit counters for candidate pairs plus the promoted log."""

    candidates: dict[tuple[int, int], int] = field(default_factory=dict)
    promoted: list[tuple[int, int]] = field(default_factory=list)


def propose_mutual_nn(emb1: np.ndarray, emb2: np.ndarray,
                      pool: list[tuple[int, int]],
                      ) -> list[tuple[int, int, float]]:
    """Cross-KG pairs that are each other's nearest neighbor (cosine) over
    the unresolved pool entities; ties resolve to the lower index."""
    if not pool:
        return []
    pool1 = sorted({a for a, _ in pool})
    pool2 = sorted({b for _, b in pool})
    z1 = emb1[pool1] / np.maximum(
        np.linalg.norm(emb1[pool1], axis=1, keepdims=True), 1e-12)
    z2 = emb2[pool2] / np.maximum(
        np.linalg.norm(emb2[pool2], axis=1, keepdims=True), 1e-12)
    sims = z1 @ z2.T
    fwd = sims.argmax(axis=1)   # first max = lowest candidate index
    bwd = sims.argmax(axis=0)
    out = []
    for i, j in enumerate(fwd):
        if bwd[j] == i:
            out.append((pool1[i], pool2[int(j)], float(sims[i, j])))
    return out


def probation_update(buffer: ProbationBuffer,
                     proposed_pairs: list[tuple[int, int]],
                     promote_after: float) -> list[tuple[int, int]]:
    """Advance counters one round: proposed pairs increment (entering at
    1), unproposed pairs are evicted, counters reaching the threshold
    promote. Returns this round's promotions."""
    new_counts: dict[tuple[int, int], int] = {}
    promotions: list[tuple[int, int]] = []
    for pair in proposed_pairs:
        count = buffer.candidates.get(pair, 0) + 1
        if count >= promote_after:
            promotions.append(pair)
            buffer.promoted.append(pair)
        else:
            new_counts[pair] = count
    buffer.candidates = new_counts
    return promotions


def alignment_edit(promotions: list[tuple[int, int, float]],
                   existing: list[tuple[int, int]],
                   ) -> list[tuple[int, int, float]]:
    """One-to-one filter: existing pairs own their entities outright;
    among promotions sharing an entity the higher-similarity pair wins."""
    used1 = {a for a, _ in existing}
    used2 = {b for _, b in existing}
    accepted = []
    for a, b, sim in sorted(promotions, key=lambda p: (-p[2], p[0], p[1])):
        if a in used1 or b in used2:
            continue
        accepted.append((a, b, sim))
        used1.add(a)
        used2.add(b)
    return accepted


# ---------------------------------------------------------------------------
# entity representation rules

def entity_representation(model: MainModel, cmmi: CmmiModule | None, mode: str,
                          tape: nc.Tape | None = None,
                          z: np.ndarray | None = None) -> nc.Tensor:
    """Global embedding with the visual slot of image-missing entities
    substituted: the latent mean at evaluation, the sampled pseudo-visual
    feature during stage-2 training, the imputed projection otherwise."""
    if mode not in ("eval", "train_stage1", "train_stage2"):
        raise ValueError(f"unknown mode {mode!r}")
    h = model.modality_embeddings(tape)
    if cmmi is not None and mode != "train_stage1" and len(model.missing_idx):
        mu, log_var = cmmi.encode(model.hybrid(h), tape)
        if mode == "eval":
            replacement = mu
        else:
            if z is None:
                raise ValueError("stage-2 training substitution needs z")
            replacement = cmmi.sample(mu, log_var, nc.constant(z.astype(model.dtype)))
        h = dict(h)
        h["v"] = nc.scatter_rows(h["v"], model.missing_idx,
                                 nc.gather_rows(replacement, model.missing_idx))
    return model.global_embedding(h, tape)


# ---------------------------------------------------------------------------
# the trainer

class Trainer:
    def __init__(self, data: TrainingData, config: TrainConfig):
        self.data = data
        self.config = config
        dtype = config.dtype
        dims = ModelDims(d=config.d, gat_layers=config.gat_layers,
                         gat_heads=config.gat_heads, leaky_slope=config.leaky_slope,
                         mhca_heads=config.mhca_heads,
                         ffn_multiplier=config.ffn_multiplier)
        _, model_ss, cmmi_ss = np.random.SeedSequence(
            config.rng_seed + SEED_INIT).spawn(3)
        self.model = MainModel(data.kg1, data.kg2, data.bank1, data.bank2,
                               dims, init_rng=np.random.default_rng(model_ss),
                               dtype=dtype)
        self.cmmi = CmmiModule(config.d, rng=np.random.default_rng(cmmi_ss),
                               dtype=dtype)
        self.train_rng = np.random.default_rng(config.rng_seed + SEED_TRAIN)

        n1 = data.kg1.num_entities
        self.n1 = n1
        all_train = [(a, b + n1) for a, b in data.seeds.train_pairs]
        n_hold = int(math.floor(config.holdout_fraction * len(all_train)))
        # seeds arrive pre-shuffled from the split, so a tail slice is an
        # unbiased holdout and costs no extra randomness
        self.holdout_pairs = all_train[len(all_train) - n_hold:] if n_hold else []
        self.train_pairs: list[tuple[int, int]] = all_train[:len(all_train) - n_hold]
        self.test_pairs = [(a, b + n1) for a, b in data.seeds.test_pairs]
        self.pool: list[tuple[int, int]] = list(self.test_pairs)
        self.buffer = ProbationBuffer()
        self.stage_done: dict[str, bool] = {}
        self.epoch_log: list[dict] = []

    # -- loss construction ---------------------------------------------------

    def _batch_arrays(self, pairs: list[tuple[int, int]],
                      idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        e1 = np.array([pairs[i][0] for i in idx], dtype=np.intp)
        e2 = np.array([pairs[i][1] for i in idx], dtype=np.intp)
        return e1, e2

    def _stage1_batch(self, tape: nc.Tape | None, e1: np.ndarray, e2: np.ndarray,
                      h_all: dict[str, nc.Tensor]) -> tuple[nc.Tensor, dict]:
        idx = np.concatenate([e1, e2])
        h_batch = {m: nc.gather_rows(h_all[m], idx) for m in MODALITIES}
        weights = self.model.modality_weights.weights(tape)
        total, breakdown = stage1_loss(h_batch, weights, len(e1), self.model.mhca,
                                       self.config.tau, tape,
                                       self.config.detach_confidence)
        parts = {"l_gmi": breakdown.l_gmi, "l_ecia": breakdown.l_ecia,
                 "l_iir": breakdown.l_iir, "l_total": breakdown.l_total}
        return total, parts

    def _stage1_loss(self, tape: nc.Tape | None, e1: np.ndarray,
                     e2: np.ndarray) -> tuple[nc.Tensor, dict]:
        h_all = self.model.modality_embeddings(tape)
        return self._stage1_batch(tape, e1, e2, h_all)

    def _stage2_loss(self, tape: nc.Tape | None, e1: np.ndarray, e2: np.ndarray,
                     z: np.ndarray) -> tuple[nc.Tensor, dict]:
        model = self.model
        h = model.modality_embeddings(tape)
        h_hyb = model.hybrid(h)
        mu, log_var = self.cmmi.encode(h_hyb, tape)
        h_bar_v = self.cmmi.sample(mu, log_var,
                                   nc.constant(z.astype(model.dtype)))
        h_bar_hyb = self.cmmi.decode(h_bar_v, tape)

        if len(model.missing_idx):
            h_sub = dict(h)
            h_sub["v"] = nc.scatter_rows(h["v"], model.missing_idx,
                                         nc.gather_rows(h_bar_v, model.missing_idx))
        else:
            h_sub = h
        total1, parts = self._stage1_batch(tape, e1, e2, h_sub)

        batch_idx = np.concatenate([e1, e2])
        complete_rows = batch_idx[model.image_mask[batch_idx]]
        l_kl = kl_loss(mu, log_var, complete_rows)
        l_re_vis, l_re_hyb = reconstruction_losses(
            h["v"], h_bar_v, h_hyb, h_bar_hyb, complete_rows,
            use_mse=self.config.mse_reconstruction)
        complete_pairs = np.flatnonzero(model.image_mask[e1]
                                        & model.image_mask[e2])
        l_sim = sim_distill_loss(nc.gather_rows(h_hyb, e1),
                                 nc.gather_rows(h_hyb, e2),
                                 nc.gather_rows(h_bar_v, e1),
                                 nc.gather_rows(h_bar_v, e2),
                                 complete_pairs, self.config.tau)
        total2, b2 = stage2_loss(l_kl, l_re_vis, l_re_hyb, l_sim)
        parts.update({"l_kl": b2.l_kl, "l_re_vis": b2.l_re_vis,
                      "l_re_hyb": b2.l_re_hyb, "l_sim": b2.l_sim,
                      "l_stage2": b2.l_total})
        total = nc.add(total1, total2)
        parts["l_total"] = float(total.data)
        return total, parts

    @staticmethod
    def _check_components(parts: dict, stage: str, epoch: int) -> None:
        for name, value in parts.items():
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    f"{stage} epoch {epoch}: loss component {name} is "
                    f"non-finite ({value})")

    # -- embeddings and metrics ----------------------------------------------

    def eval_embedding(self, mode: str) -> np.ndarray:
        cmmi = self.cmmi if self.stage_done.get(STAGE2_1) else None
        z = None
        if mode == "train_stage2":
            z = self.train_rng.standard_normal((self.model.n, self.config.d))
        return entity_representation(self.model, cmmi, mode, tape=None,
                                     z=z).data.copy()

    def _holdout_hits1(self) -> float:
        emb = self.eval_embedding("train_stage1")
        emb1, emb2 = emb[:self.n1], emb[self.n1:]
        local = [(a, b - self.n1) for a, b in self.holdout_pairs]
        fwd = rank_alignments(emb1, emb2, local, "1to2")
        bwd = rank_alignments(emb1, emb2, local, "2to1")
        return (compute_metrics(fwd.ranks)["hits1"]
                + compute_metrics(bwd.ranks)["hits1"]) / 2.0

    def final_report(self, meta: dict | None = None):
        mode = "eval" if self.stage_done.get(STAGE2_1) else "train_stage1"
        emb = self.eval_embedding(mode)
        local = [(a, b - self.n1) for a, b in self.test_pairs]
        return build_report(emb[:self.n1], emb[self.n1:], local,
                            self.data.kg1.image_mask, self.data.kg2.image_mask,
                            meta)

    # -- stage loops -----------------------------------------------------------

    def _run_epochs(self, stage: str, epochs: int, params: list[nc.Parameter],
                    use_stage2_loss: bool) -> list[dict]:
        cfg = self.config
        opt = AdamW(params, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
        steps_per_epoch = max(1, math.ceil(len(self.train_pairs) / cfg.batch_size))
        total_steps = max(1, epochs * steps_per_epoch)
        step = 0
        best_holdout, stale = -1.0, 0
        history = []
        for epoch in range(epochs):
            order = self.train_rng.permutation(len(self.train_pairs))
            losses = []
            lr = 0.0
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start:start + cfg.batch_size]
                lr = warmup_cosine_lr(step, total_steps, cfg.learning_rate,
                                      cfg.warmup_fraction)
                opt.zero_grad()
                micro_chunks = ([chunk] if cfg.grad_accumulation == 1 else
                                [c for c in np.array_split(chunk, cfg.grad_accumulation)
                                 if len(c)])
                batch_parts: dict = {}
                for micro in micro_chunks:
                    e1, e2 = self._batch_arrays(self.train_pairs, micro)
                    tape = nc.Tape()
                    if use_stage2_loss:
                        z = self.train_rng.standard_normal((self.model.n, cfg.d))
                        total, parts = self._stage2_loss(tape, e1, e2, z)
                    else:
                        total, parts = self._stage1_loss(tape, e1, e2)
                    self._check_components(parts, stage, epoch)
                    tape.backward(total)
                    batch_parts = parts
                opt.step(lr)
                losses.append(batch_parts)
                step += 1

            epoch_mean = {k: float(np.mean([p[k] for p in losses]))
                          for k in losses[0]} if losses else {}
            record = {"stage": stage, "epoch": epoch, "lr": lr,
                      "losses": epoch_mean,
                      "train_pairs": len(self.train_pairs),
                      "buffer": len(self.buffer.candidates)}
            history.append(record)
            self.epoch_log.append(record)

            if stage == STAGE1 and (epoch + 1) % cfg.propose_every == 0:
                if cfg.iterative and self.pool:
                    self._proposal_round()
                if self.holdout_pairs and cfg.early_stop_patience > 0:
                    hits = self._holdout_hits1()
                    record["holdout_hits1"] = hits
                    if hits > best_holdout + 1e-12:
                        best_holdout, stale = hits, 0
                    else:
                        stale += 1
                        if stale >= cfg.early_stop_patience:
                            break
        return history

    def _proposal_round(self) -> None:
        emb = self.eval_embedding("train_stage1")
        proposals = propose_mutual_nn(emb, emb, self.pool)
        sims = {(a, b): s for a, b, s in proposals}
        promotions = probation_update(self.buffer, [(a, b) for a, b, _ in proposals],
                                      self.config.promote_after)
        if not promotions:
            return
        accepted = alignment_edit([(a, b, sims[(a, b)]) for a, b in promotions],
                                  self.train_pairs + self.holdout_pairs)
        for a, b, _ in accepted:
            self.train_pairs.append((a, b))
            self.pool = [(x, y) for x, y in self.pool if x != a and y != b]

    def run_stage1(self) -> list[dict]:
        self.model.set_trainable(True)
        self.cmmi.set_trainable(False)
        history = self._run_epochs(STAGE1, self.config.stage1_epochs,
                                   self.model.parameters(), use_stage2_loss=False)
        self.stage_done[STAGE1] = True
        return history

    def run_stage2(self) -> list[dict]:
        if not self.stage_done.get(STAGE1):
            raise StageOrderError("stage 2 requires a completed stage 1")
        self.model.set_trainable(False)
        self.cmmi.set_trainable(True)
        history = self._run_epochs(STAGE2_1, self.config.stage2_1_epochs,
                                   self.cmmi.parameters(), use_stage2_loss=True)
        self.stage_done[STAGE2_1] = True

        self.model.set_trainable(True)
        self.cmmi.set_trainable(False)
        history += self._run_epochs(STAGE2_2, self.config.stage2_2_epochs,
                                    self.model.parameters(), use_stage2_loss=True)
        self.stage_done[STAGE2_2] = True
        return history

    # -- persistence -----------------------------------------------------------

    def save_stage(self, stage: str, out_dir: str | Path, history: list[dict],
                   extras: dict | None = None) -> Path:
        stage_dir = Path(out_dir) / stage
        stage_dir.mkdir(parents=True, exist_ok=True)
        params = list(self.model.parameters())
        if stage in (STAGE2_1, STAGE2_2):
            params += self.cmmi.parameters()
        nc.save_params(stage_dir / "params.txt", params)
        manifest = {
            "stage": stage,
            "config": self.config.to_dict(),
            "epochs_run": len([h for h in history if h["stage"] == stage]),
            "train_pairs": len(self.train_pairs),
            "promoted": len(self.buffer.promoted),
            "history": history,
        }
        manifest.update(extras or {})
        (stage_dir / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return stage_dir

    def load_stage(self, stage_dir: str | Path) -> None:
        path = Path(stage_dir) / "params.txt"
        stored = nc.load_params(path)
        nc.load_into(path, self.model.parameters())
        if any(name.startswith("cmmi/") for name in stored):
            nc.load_into(path, self.cmmi.parameters())
            self.stage_done[STAGE2_1] = True
        self.stage_done[STAGE1] = True
