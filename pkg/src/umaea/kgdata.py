"""Loading, representing, and synthesizing paired multi-modal KGs.

File formats (all UTF-8 text):

* triples:    first line ``#entities N #relations R``; then one
              ``head<TAB>relation<TAB>tail`` triple per line, decimal ints.
* attributes: ``entity<TAB>attr_id[,attr_id...]`` per line; absent entities
              have no attributes.
* features:   first line ``rows cols``; then `rows` lines of `cols`
              space-separated decimal floats. Row i belongs to the i-th
              entity listed in the mask file.
* mask:       one entity index per line (entities that have an image).
* pairs:      ``e1<TAB>e2`` per line.

Parsing is strict: a malformed line is an error naming the line number.
All builders are pure functions of their inputs plus an explicit seed.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """A data file violates its declared format."""


@dataclass
class MMKG:
    """One side of a paired multi-modal KG."""

    kg_id: int
    num_entities: int
    triples: list[tuple[int, int, int]]
    entity_attrs: list[set[int]]
    image_mask: np.ndarray  # bool, length num_entities

    def __post_init__(self) -> None:
        if len(self.entity_attrs) != self.num_entities:
            raise ValueError("entity_attrs length must equal num_entities")
        if len(self.image_mask) != self.num_entities:
            raise ValueError("image_mask length must equal num_entities")
        for h, r, t in self.triples:
            if not (0 <= h < self.num_entities and 0 <= t < self.num_entities):
                raise ValueError(f"triple ({h},{r},{t}) outside entity range")
            if r < 0:
                raise ValueError(f"negative relation id in triple ({h},{r},{t})")

    @property
    def relations(self) -> set[int]:
        return {r for _, r, _ in self.triples}


@dataclass
class AlignmentSeedSet:
    """Train seeds S and held-out test pairs, with the split ratio."""

    train_pairs: list[tuple[int, int]]
    test_pairs: list[tuple[int, int]]
    seed_ratio: float


@dataclass
class FeatureBank:
    """Dense per-entity inputs for one KG side.

    `x_g` is the (learnable) graph-embedding initialization; the other
    matrices are fixed inputs. Fields default to None until built.
    """

    x_g: np.ndarray | None = None
    x_r: np.ndarray | None = None
    x_a: np.ndarray | None = None
    x_v: np.ndarray | None = None
    image_mask: np.ndarray | None = None
    dims: dict[str, int] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# parsing

def _parse_triples_file(path: str | Path, kg_id: int) -> tuple[int, int, list[tuple[int, int, int]]]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty triples file (missing header)")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "#entities" or header[2] != "#relations":
        raise DataFormatError(f"{path}:1: expected header '#entities N #relations R'")
    try:
        n_entities, n_relations = int(header[1]), int(header[3])
    except ValueError as exc:
        raise DataFormatError(f"{path}:1: non-integer header counts") from exc

    triples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            h, r, t = (int(p) for p in parts)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-integer field") from exc
        if h < 0 or r < 0 or t < 0:
            raise DataFormatError(f"{path}:{lineno}: negative index")
        if h >= n_entities or t >= n_entities:
            raise DataFormatError(f"{path}:{lineno}: entity index beyond declared "
                                  f"count {n_entities}")
        if r >= n_relations:
            raise DataFormatError(f"{path}:{lineno}: relation id beyond declared "
                                  f"count {n_relations}")
        triples.append((h, r, t))

    # duplicates are tolerated but stored once
    seen: set[tuple[int, int, int]] = set()
    unique = [tr for tr in triples if not (tr in seen or seen.add(tr))]
    return n_entities, n_relations, unique


def _parse_attrs_file(path: str | Path, num_entities: int) -> list[set[int]]:
    attrs: list[set[int]] = [set() for _ in range(num_entities)]
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'entity<TAB>ids'")
            try:
                ent = int(parts[0])
                ids = [int(x) for x in parts[1].split(",") if x != ""]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer field") from exc
            if not (0 <= ent < num_entities):
                raise DataFormatError(f"{path}:{lineno}: entity index {ent} out of range")
            if any(a < 0 for a in ids):
                raise DataFormatError(f"{path}:{lineno}: negative attribute id")
            attrs[ent].update(ids)
    return attrs


def _parse_mask_file(path: str | Path, num_entities: int) -> list[int]:
    indices: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                ent = int(line)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer entity index") from exc
            if not (0 <= ent < num_entities):
                raise DataFormatError(f"{path}:{lineno}: entity index {ent} out of range")
            indices.append(ent)
    return indices


def load_kg_pair(triples_paths: tuple[str | Path, str | Path],
                 attrs_paths: tuple[str | Path, str | Path],
                 mask_paths: tuple[str | Path, str | Path]) -> tuple[MMKG, MMKG]:
    kgs = []
    for kg_id, (tp, ap, mp) in enumerate(zip(triples_paths, attrs_paths, mask_paths), start=1):
        n_entities, _, triples = _parse_triples_file(tp, kg_id)
        attrs = _parse_attrs_file(ap, n_entities)
        mask = np.zeros(n_entities, dtype=bool)
        mask[_parse_mask_file(mp, n_entities)] = True
        kgs.append(MMKG(kg_id=kg_id, num_entities=n_entities, triples=triples,
                        entity_attrs=attrs, image_mask=mask))
    return kgs[0], kgs[1]


def load_pairs(path: str | Path) -> list[tuple[int, int]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'e1<TAB>e2'")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer field") from exc
    return pairs


def load_visual_features(path: str | Path, kg: MMKG) -> tuple[np.ndarray, np.ndarray]:
    """Read the feature matrix for `kg`; rows follow the image mask order.

    Entities without an image keep all-zero rows until imputation.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty feature file")
    header = lines[0].split()
    if len(header) != 2:
        raise DataFormatError(f"{path}:1: expected header 'rows cols'")
    try:
        n_rows, n_cols = int(header[0]), int(header[1])
    except ValueError as exc:
        raise DataFormatError(f"{path}:1: non-integer header") from exc
    if n_rows > kg.num_entities:
        raise DataFormatError(f"{path}: {n_rows} rows exceed {kg.num_entities} entities")

    holders = np.flatnonzero(kg.image_mask)
    if n_rows != len(holders):
        raise DataFormatError(f"{path}: {n_rows} rows but mask lists {len(holders)} "
                              f"entities with images")

    x_v = np.zeros((kg.num_entities, n_cols), dtype=np.float64)
    for i in range(n_rows):
        lineno = i + 2
        if lineno - 1 >= len(lines):
            raise DataFormatError(f"{path}: header declares {n_rows} rows, file ends early")
        values = lines[lineno - 1].split()
        if len(values) != n_cols:
            raise DataFormatError(f"{path}:{lineno}: expected {n_cols} values, "
                                  f"got {len(values)}")
        try:
            row = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-numeric value") from exc
        if not np.all(np.isfinite(row)):
            raise DataFormatError(f"{path}:{lineno}: non-finite value")
        x_v[holders[i]] = row
    return x_v, kg.image_mask.copy()


# ---------------------------------------------------------------------------
# writers (canonical form of the formats above)

def write_kg_files(kg: MMKG, triples_path: str | Path, attrs_path: str | Path,
                   mask_path: str | Path) -> None:
    n_relations = max((r for _, r, _ in kg.triples), default=-1) + 1
    with open(triples_path, "w", encoding="utf-8") as fh:
        fh.write(f"#entities {kg.num_entities} #relations {n_relations}\n")
        for h, r, t in kg.triples:
            fh.write(f"{h}\t{r}\t{t}\n")
    with open(attrs_path, "w", encoding="utf-8") as fh:
        for ent, ids in enumerate(kg.entity_attrs):
            if ids:
                fh.write(f"{ent}\t{','.join(str(a) for a in sorted(ids))}\n")
    with open(mask_path, "w", encoding="utf-8") as fh:
        for ent in np.flatnonzero(kg.image_mask):
            fh.write(f"{ent}\n")


def write_visual_features(x_v: np.ndarray, image_mask: np.ndarray,
                          path: str | Path) -> None:
    holders = np.flatnonzero(image_mask)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(holders)} {x_v.shape[1]}\n")
        for ent in holders:
            fh.write(" ".join("%.17g" % v for v in x_v[ent]) + "\n")


def write_pairs(pairs: list[tuple[int, int]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in pairs:
            fh.write(f"{a}\t{b}\n")


# ---------------------------------------------------------------------------
# seed split

def split_seeds(all_pairs: list[tuple[int, int]], seed_ratio: float,
                rng_seed: int) -> AlignmentSeedSet:
    """Deterministically shuffle and split aligned pairs into train/test."""
    if not all_pairs:
        raise ValueError("no alignment pairs to split")
    if not (0.0 < seed_ratio < 1.0):
        raise ValueError(f"seed ratio must lie in (0, 1), got {seed_ratio}")
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(all_pairs))
    n_train = int(math.floor(seed_ratio * len(all_pairs) + 0.5))
    shuffled = [all_pairs[i] for i in order]
    return AlignmentSeedSet(train_pairs=shuffled[:n_train],
                            test_pairs=shuffled[n_train:],
                            seed_ratio=seed_ratio)


# ---------------------------------------------------------------------------
# bag-of-words features

def _joint_ranking(counts: Counter, top_k: int) -> dict[int, int]:
    # descending frequency, ties by ascending id; top_k ids keep a position
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {ident: pos for pos, (ident, _) in enumerate(ordered[:top_k])}


def build_bow_relation_features(kg_pair: tuple[MMKG, MMKG],
                                d_r: int) -> tuple[np.ndarray, np.ndarray]:
    """Count-valued relation features over the jointly ranked top-d_r ids.

    A relation's frequency is its number of triples summed over both KGs.
    Every kept triple increments the relation's position for both its head
    and its tail entity.
    """
    if d_r < 1:
        raise ValueError("d_r must be at least 1")
    counts: Counter = Counter()
    for kg in kg_pair:
        counts.update(r for _, r, _ in kg.triples)
    ranking = _joint_ranking(counts, d_r)

    out = []
    for kg in kg_pair:
        x = np.zeros((kg.num_entities, d_r), dtype=np.float64)
        for h, r, t in kg.triples:
            pos = ranking.get(r)
            if pos is None:
                continue
            x[h, pos] += 1.0
            x[t, pos] += 1.0
        out.append(x)
    return out[0], out[1]


def build_bow_attribute_features(kg_pair: tuple[MMKG, MMKG],
                                 d_a: int) -> tuple[np.ndarray, np.ndarray]:
    """Binary attribute-presence features over the jointly ranked top-d_a ids."""
    if d_a < 1:
        raise ValueError("d_a must be at least 1")
    counts: Counter = Counter()
    for kg in kg_pair:
        for ids in kg.entity_attrs:
            counts.update(ids)
    ranking = _joint_ranking(counts, d_a)

    out = []
    for kg in kg_pair:
        x = np.zeros((kg.num_entities, d_a), dtype=np.float64)
        for ent, ids in enumerate(kg.entity_attrs):
            for a in ids:
                pos = ranking.get(a)
                if pos is not None:
                    x[ent, pos] = 1.0
        out.append(x)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# visual imputation

def impute_missing_visual(x_v: np.ndarray, image_mask: np.ndarray,
                          rng_seed: int) -> np.ndarray:
    """Fill rows of entities without images from per-dimension normal fits.

    Mean and standard deviation are taken over the available rows; each
    missing row is drawn i.i.d. per dimension. Sampled once at load time,
    never per epoch. A zero per-dimension spread imputes the constant.
    """
    available = np.flatnonzero(image_mask)
    if len(available) == 0:
        raise ValueError("no entity has an image; disable the visual modality "
                         "instead of imputing")
    missing = np.flatnonzero(~np.asarray(image_mask, dtype=bool))
    out = x_v.copy()
    if len(missing) == 0:
        return out
    mean = x_v[available].mean(axis=0)
    std = x_v[available].std(axis=0)
    rng = np.random.default_rng(rng_seed)
    out[missing] = rng.normal(loc=mean, scale=std, size=(len(missing), x_v.shape[1]))
    return out


# ---------------------------------------------------------------------------
# synthetic paired KGs (desk-scale fixture)

def generate_synthetic_pair(n_entities: int, n_relations: int, n_attrs: int,
                            d_v: int, noise: float, rng_seed: int,
                            triples_per_entity: int = 3,
                            attrs_per_entity: int = 4,
                            ) -> tuple[MMKG, MMKG, list[tuple[int, int]],
                                       tuple[FeatureBank, FeatureBank]]:
    """Random sparse KG plus an index-permuted, partially rewired copy.

    KG2 entity pi(e) mirrors KG1 entity e: same attributes, visual feature
    equal to KG1's plus Gaussian noise of scale `noise`, and each triple
    rewired (endpoints redrawn) with probability `noise`. All entities of
    the raw pair hold images; image dropping is a separate step.
    """
    if n_entities < 2:
        raise ValueError("need at least 2 entities")
    rng = np.random.default_rng(rng_seed)

    n_triples = triples_per_entity * n_entities
    heads = rng.integers(0, n_entities, size=n_triples)
    rels = rng.integers(0, n_relations, size=n_triples)
    tails = rng.integers(0, n_entities, size=n_triples)
    triples1 = list(zip(heads.tolist(), rels.tolist(), tails.tolist()))

    attrs1: list[set[int]] = []
    for _ in range(n_entities):
        k = min(n_attrs, int(rng.integers(1, attrs_per_entity + 1)))
        attrs1.append(set(rng.choice(n_attrs, size=k, replace=False).tolist()))

    perm = rng.permutation(n_entities)
    triples2 = []
    rewire = rng.random(n_triples) < noise
    for (h, r, t), rw in zip(triples1, rewire):
        if rw:
            triples2.append((int(rng.integers(0, n_entities)), r,
                             int(rng.integers(0, n_entities))))
        else:
            triples2.append((int(perm[h]), r, int(perm[t])))

    attrs2: list[set[int]] = [set() for _ in range(n_entities)]
    for e in range(n_entities):
        attrs2[perm[e]] = set(attrs1[e])

    x_v1 = rng.normal(size=(n_entities, d_v))
    x_v2 = np.zeros_like(x_v1)
    x_v2[perm] = x_v1 + noise * rng.normal(size=(n_entities, d_v))

    mask = np.ones(n_entities, dtype=bool)
    kg1 = MMKG(1, n_entities, _dedup(triples1), attrs1, mask.copy())
    kg2 = MMKG(2, n_entities, _dedup(triples2), attrs2, mask.copy())
    all_pairs = [(e, int(perm[e])) for e in range(n_entities)]

    bank1 = FeatureBank(x_v=x_v1, image_mask=mask.copy(), dims={"d_v": d_v})
    bank2 = FeatureBank(x_v=x_v2, image_mask=mask.copy(), dims={"d_v": d_v})
    return kg1, kg2, all_pairs, (bank1, bank2)


def _dedup(triples: list[tuple[int, int, int]]) -> list[tuple[int, int, int]]:
    seen: set[tuple[int, int, int]] = set()
    return [tr for tr in triples if not (tr in seen or seen.add(tr))]


def build_feature_banks(kg1: MMKG, kg2: MMKG, x_v1: np.ndarray, x_v2: np.ndarray,
                        d: int, d_r: int, d_a: int, init_seed: int,
                        impute_seed: int) -> tuple[FeatureBank, FeatureBank]:
    """Assemble complete per-KG feature banks from raw inputs.

    Builds joint BoW features, imputes missing visual rows (per KG, seeded
    independently), and draws trainable graph-embedding initializations
    from Normal(0, 1/sqrt(d)).
    """
    x_r1, x_r2 = build_bow_relation_features((kg1, kg2), d_r)
    x_a1, x_a2 = build_bow_attribute_features((kg1, kg2), d_a)
    x_v1 = impute_missing_visual(x_v1, kg1.image_mask, impute_seed)
    x_v2 = impute_missing_visual(x_v2, kg2.image_mask, impute_seed + 1)
    rng = np.random.default_rng(init_seed)
    sigma = 1.0 / math.sqrt(d)
    x_g1 = rng.normal(0.0, sigma, size=(kg1.num_entities, d))
    x_g2 = rng.normal(0.0, sigma, size=(kg2.num_entities, d))
    dims = {"d": d, "d_r": d_r, "d_a": d_a, "d_v": x_v1.shape[1]}
    bank1 = FeatureBank(x_g1, x_r1, x_a1, x_v1, kg1.image_mask.copy(), dict(dims))
    bank2 = FeatureBank(x_g2, x_r2, x_a2, x_v2, kg2.image_mask.copy(), dict(dims))
    return bank1, bank2
