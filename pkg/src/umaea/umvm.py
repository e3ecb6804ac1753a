"""Benchmark variants with a controlled image-availability rate.

A split keeps images for exactly floor(R_img * total_entities) entities,
drawn uniformly without replacement from the raw image holders of both KG
sides pooled together (one global rate per split). Draws are independent
per split; nested grids must not be assumed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .kgdata import MMKG

_DBP_COMMON = [0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.45, 0.5, 0.55, 0.6]
_OPENEA_GRID = [0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.45, 0.5, 0.55, 0.6,
                0.7, 0.8, 0.9, 0.95, 1.0]

# Each grid runs from 0.05 up to the raw dataset's own availability rate
# (its final entry); OpenEA images are complete so those grids end at 1.0.
_STANDARD_GRIDS: dict[str, list[float]] = {
    "DBP15K_ZH-EN": _DBP_COMMON + [0.7, 0.75, 0.7829],
    "DBP15K_JA-EN": _DBP_COMMON + [0.7, 0.7032],
    "DBP15K_FR-EN": _DBP_COMMON + [0.65, 0.6758],
    "OpenEA_EN-FR": list(_OPENEA_GRID),
    "OpenEA_EN-DE": list(_OPENEA_GRID),
    "OpenEA_D-W-V1": list(_OPENEA_GRID),
    "OpenEA_D-W-V2": list(_OPENEA_GRID),
}


def standard_grid(dataset_name: str) -> list[float]:
    """The fixed list of availability rates used for a named dataset."""
    try:
        return list(_STANDARD_GRIDS[dataset_name])
    except KeyError:
        known = ", ".join(sorted(_STANDARD_GRIDS))
        raise KeyError(f"unknown dataset {dataset_name!r}; supported: {known}") from None


def supported_datasets() -> list[str]:
    return sorted(_STANDARD_GRIDS)


@dataclass
class SplitManifest:
    dataset_name: str
    R_img: float
    rng_seed: int
    kept_entities_kg1: list[int]
    kept_entities_kg2: list[int]
    realized_ratio: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        data = json.loads(text)
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def masks(self, n1: int, n2: int) -> tuple[np.ndarray, np.ndarray]:
        m1 = np.zeros(n1, dtype=bool)
        m2 = np.zeros(n2, dtype=bool)
        m1[self.kept_entities_kg1] = True
        m2[self.kept_entities_kg2] = True
        return m1, m2


def generate_umvm_split(kg_pair: tuple[MMKG, MMKG],
                        raw_masks: tuple[np.ndarray, np.ndarray],
                        R_img: float, rng_seed: int,
                        dataset_name: str = "synthetic") -> SplitManifest:
    """Randomly drop images down to availability rate `R_img`."""
    if R_img < 0:
        raise ValueError("R_img must be non-negative")
    kg1, kg2 = kg_pair
    raw1 = np.asarray(raw_masks[0], dtype=bool)
    raw2 = np.asarray(raw_masks[1], dtype=bool)
    total = kg1.num_entities + kg2.num_entities
    holders1 = np.flatnonzero(raw1)
    holders2 = np.flatnonzero(raw2)
    n_holders = len(holders1) + len(holders2)
    keep = int(math.floor(R_img * total))
    if keep > n_holders:
        raise ValueError(
            f"requested R_img={R_img} exceeds the raw availability of "
            f"{dataset_name} (maximum {n_holders / total:.4f})")

    # pooled index space: kg1 holders first, then kg2 holders
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(n_holders, size=keep, replace=False)
    kept1 = sorted(int(holders1[i]) for i in chosen if i < len(holders1))
    kept2 = sorted(int(holders2[i - len(holders1)]) for i in chosen
                   if i >= len(holders1))
    return SplitManifest(dataset_name=dataset_name, R_img=R_img,
                         rng_seed=rng_seed, kept_entities_kg1=kept1,
                         kept_entities_kg2=kept2,
                         realized_ratio=keep / total)
