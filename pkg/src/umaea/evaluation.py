"""Ranking, rank metrics, and image-availability breakdowns.

The candidate pool for a direction is the test pairs' target-side
entities; candidates are ordered by descending cosine similarity with
ties broken by ascending entity index. Reports carry both directions,
their mean, and the five availability partitions of the test set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PARTITIONS = ("TS1", "TS2", "TS3", "TS4", "TS5")


@dataclass
class RankList:
    ranks: np.ndarray  # 1-based, aligned with the test-pair order
    direction: str


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norm, 1e-12)


def rank_alignments(emb_src: np.ndarray, emb_tgt: np.ndarray,
                    test_pairs: list[tuple[int, int]],
                    direction: str = "1to2") -> RankList:
    """Rank every source entity's true counterpart among all test-side
    target entities."""
    if direction == "2to1":
        test_pairs = [(b, a) for a, b in test_pairs]
        emb_src, emb_tgt = emb_tgt, emb_src
    elif direction != "1to2":
        raise ValueError(f"unknown direction {direction!r}")
    src_ids = np.array([p[0] for p in test_pairs], dtype=np.intp)
    cand_ids = np.array(sorted({p[1] for p in test_pairs}), dtype=np.intp)
    sims = _normalize_rows(emb_src[src_ids]) @ _normalize_rows(emb_tgt[cand_ids]).T

    positions = np.arange(len(cand_ids))
    ranks = np.empty(len(test_pairs), dtype=np.int64)
    for i, (_, true_tgt) in enumerate(test_pairs):
        t = int(np.searchsorted(cand_ids, true_tgt))
        if t >= len(cand_ids) or cand_ids[t] != true_tgt:
            raise ValueError(f"target entity {true_tgt} missing from candidates")
        row = sims[i]
        s_true = row[t]
        ranks[i] = 1 + int((row > s_true).sum()) \
            + int(((row == s_true) & (positions < t)).sum())
    return RankList(ranks=ranks, direction=direction)


def compute_metrics(ranks: np.ndarray) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("empty rank list")
    return {
        "hits1": float((ranks <= 1).mean()),
        "hits10": float((ranks <= 10).mean()),
        "mrr": float((1.0 / ranks).mean()),
        "mr": float(ranks.mean()),
    }


def ts_partition(test_pairs: list[tuple[int, int]], mask1: np.ndarray,
                 mask2: np.ndarray) -> dict[str, np.ndarray]:
    """Positions of test pairs by image availability: both sides (TS1),
    exactly one (TS3), neither (TS5), and the unions TS2 = TS1 + TS3,
    TS4 = TS3 + TS5."""
    has1 = np.array([bool(mask1[a]) for a, _ in test_pairs])
    has2 = np.array([bool(mask2[b]) for _, b in test_pairs])
    ts1 = np.flatnonzero(has1 & has2)
    ts3 = np.flatnonzero(has1 ^ has2)
    ts5 = np.flatnonzero(~has1 & ~has2)
    return {
        "TS1": ts1,
        "TS2": np.sort(np.concatenate([ts1, ts3])),
        "TS3": ts3,
        "TS4": np.sort(np.concatenate([ts3, ts5])),
        "TS5": ts5,
    }


def _mean_metrics(a: dict[str, float], b: dict[str, float]) -> dict[str, float]:
    return {k: (a[k] + b[k]) / 2.0 for k in a}


@dataclass
class MetricsReport:
    meta: dict
    overall: dict
    partitions: dict

    def to_dict(self) -> dict:
        return {"meta": self.meta, "overall": self.overall,
                "partitions": self.partitions}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(meta=data["meta"], overall=data["overall"],
                   partitions=data["partitions"])


def build_report(emb1: np.ndarray, emb2: np.ndarray,
                 test_pairs: list[tuple[int, int]],
                 mask1: np.ndarray, mask2: np.ndarray,
                 meta: dict | None = None) -> MetricsReport:
    """Full two-direction report with availability partitions."""
    fwd = rank_alignments(emb1, emb2, test_pairs, "1to2")
    bwd = rank_alignments(emb1, emb2, test_pairs, "2to1")
    overall = {
        "1to2": compute_metrics(fwd.ranks),
        "2to1": compute_metrics(bwd.ranks),
    }
    overall["mean"] = _mean_metrics(overall["1to2"], overall["2to1"])

    parts = {}
    for name, idx in ts_partition(test_pairs, mask1, mask2).items():
        entry: dict = {"count": int(len(idx))}
        if len(idx):
            entry["1to2"] = compute_metrics(fwd.ranks[idx])
            entry["2to1"] = compute_metrics(bwd.ranks[idx])
            entry["mean"] = _mean_metrics(entry["1to2"], entry["2to1"])
        parts[name] = entry

    meta = dict(meta or {})
    meta["test_pairs"] = len(test_pairs)
    return MetricsReport(meta=meta, overall=overall, partitions=parts)


CSV_HEADER = ("dataset,r_img,stage,seed,direction,partition,count,"
              "hits1,hits10,mrr,mr")


def report_csv_rows(report: MetricsReport) -> list[str]:
    """One CSV row per (direction, partition), `overall` included."""
    meta = report.meta
    prefix = (f"{meta.get('dataset', '')},{meta.get('r_img', '')},"
              f"{meta.get('stage', '')},{meta.get('seed', '')}")
    rows = []
    sections = [("overall", report.overall, meta.get("test_pairs", ""))]
    sections += [(name, entry, entry.get("count", 0))
                 for name, entry in sorted(report.partitions.items())]
    for name, entry, count in sections:
        for direction in ("1to2", "2to1"):
            metrics = entry.get(direction)
            if metrics is None:
                continue
            rows.append(f"{prefix},{direction},{name},{count},"
                        f"{metrics['hits1']:.6f},{metrics['hits10']:.6f},"
                        f"{metrics['mrr']:.6f},{metrics['mr']:.6f}")
    return rows
