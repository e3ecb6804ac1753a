from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umaea.kgdata import (AlignmentSeedSet, DataFormatError, MMKG,
                          build_bow_attribute_features,
                          build_bow_relation_features, build_feature_banks,
                          generate_synthetic_pair, impute_missing_visual,
                          load_kg_pair, load_pairs, load_visual_features,
                          split_seeds, write_kg_files, write_pairs,
                          write_visual_features)


def _mk_kg(kg_id, n, triples, attrs=None, mask=None):
    return MMKG(kg_id=kg_id, num_entities=n, triples=triples,
                entity_attrs=attrs or [set() for _ in range(n)],
                image_mask=np.ones(n, dtype=bool) if mask is None else mask)


# ---------------------------------------------------------------------------
# parsing

def _write_inputs(tmp_path, triples_text, attrs_text="", mask_text=""):
    t = tmp_path / "kg.triples"
    a = tmp_path / "kg.attrs"
    m = tmp_path / "kg.mask"
    t.write_text(triples_text)
    a.write_text(attrs_text)
    m.write_text(mask_text)
    return t, a, m


def test_empty_triples_file_with_declared_entities(tmp_path):
    t1, a1, m1 = _write_inputs(tmp_path, "#entities 3 #relations 1\n")
    t2 = tmp_path / "kg2.triples"
    t2.write_text("#entities 2 #relations 1\n0\t0\t1\n")
    a2 = tmp_path / "kg2.attrs"
    a2.write_text("")
    m2 = tmp_path / "kg2.mask"
    m2.write_text("0\n")
    kg1, kg2 = load_kg_pair((t1, t2), (a1, a2), (m1, m2))
    assert kg1.num_entities == 3
    assert kg1.triples == []
    assert kg2.triples == [(0, 0, 1)]


def test_triple_line_parses_directly(tmp_path):
    t, a, m = _write_inputs(tmp_path, "#entities 3 #relations 6\n0\t5\t2\n")
    kg1, _ = load_kg_pair((t, t), (a, a), (m, m))
    assert kg1.triples == [(0, 5, 2)]


def test_malformed_triple_line_names_line_number(tmp_path):
    t, a, m = _write_inputs(tmp_path, "#entities 3 #relations 6\n0\t5\n")
    with pytest.raises(DataFormatError, match=r":2"):
        load_kg_pair((t, t), (a, a), (m, m))


def test_out_of_range_entity_is_rejected(tmp_path):
    t, a, m = _write_inputs(tmp_path, "#entities 2 #relations 1\n0\t0\t5\n")
    with pytest.raises(DataFormatError, match="beyond declared"):
        load_kg_pair((t, t), (a, a), (m, m))


def test_duplicate_triples_are_deduplicated(tmp_path):
    body = "#entities 2 #relations 1\n0\t0\t1\n0\t0\t1\n"
    t, a, m = _write_inputs(tmp_path, body)
    kg1, _ = load_kg_pair((t, t), (a, a), (m, m))
    assert kg1.triples == [(0, 0, 1)]


def test_visual_features_direct_parse(tmp_path):
    kg = _mk_kg(1, 4, [])
    path = tmp_path / "feat"
    rows = "\n".join(" ".join(str(float(i)) for _ in range(512)) for i in range(4))
    path.write_text("4 512\n" + rows + "\n")
    x_v, mask = load_visual_features(path, kg)
    assert x_v.shape == (4, 512)
    assert mask.all()


def test_visual_features_short_row_is_rejected(tmp_path):
    kg = _mk_kg(1, 4, [])
    path = tmp_path / "feat"
    good = " ".join("1.0" for _ in range(512))
    bad = " ".join("1.0" for _ in range(511))
    path.write_text("4 512\n" + "\n".join([good, bad, good, good]) + "\n")
    with pytest.raises(DataFormatError, match=r":3"):
        load_visual_features(path, kg)


def test_mask_order_matches_feature_rows(tmp_path):
    mask = np.array([False, True, False, True])
    kg = _mk_kg(1, 4, [], mask=mask)
    path = tmp_path / "feat"
    path.write_text("2 3\n1 1 1\n2 2 2\n")
    x_v, _ = load_visual_features(path, kg)
    assert np.array_equal(x_v[1], [1, 1, 1])
    assert np.array_equal(x_v[3], [2, 2, 2])
    assert np.array_equal(x_v[0], [0, 0, 0])


def test_kg_files_roundtrip(tmp_path):
    kg = _mk_kg(1, 4, [(0, 1, 2), (3, 0, 0)],
                attrs=[{1, 2}, set(), {0}, set()],
                mask=np.array([True, False, True, True]))
    write_kg_files(kg, tmp_path / "t", tmp_path / "a", tmp_path / "m")
    kg2, _ = load_kg_pair((tmp_path / "t", tmp_path / "t"),
                          (tmp_path / "a", tmp_path / "a"),
                          (tmp_path / "m", tmp_path / "m"))
    assert kg2.triples == kg.triples
    assert kg2.entity_attrs == kg.entity_attrs
    assert np.array_equal(kg2.image_mask, kg.image_mask)


def test_visual_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    mask = np.array([True, False, True])
    x = np.zeros((3, 5))
    x[mask] = rng.normal(size=(2, 5))
    write_visual_features(x, mask, tmp_path / "feat")
    kg = _mk_kg(1, 3, [], mask=mask)
    back, _ = load_visual_features(tmp_path / "feat", kg)
    assert back.tobytes() == x.tobytes()


def test_pairs_roundtrip(tmp_path):
    pairs = [(0, 3), (2, 1)]
    write_pairs(pairs, tmp_path / "p")
    assert load_pairs(tmp_path / "p") == pairs


# ---------------------------------------------------------------------------
# seed splitting

def test_split_counts():
    pairs = [(i, i) for i in range(10)]
    seeds = split_seeds(pairs, 0.3, rng_seed=7)
    assert len(seeds.train_pairs) == 3
    assert len(seeds.test_pairs) == 7


def test_split_deterministic():
    pairs = [(i, i) for i in range(25)]
    a = split_seeds(pairs, 0.4, rng_seed=7)
    b = split_seeds(pairs, 0.4, rng_seed=7)
    assert a.train_pairs == b.train_pairs
    assert a.test_pairs == b.test_pairs


def test_split_matches_published_ratio():
    pairs = [(i, i) for i in range(15000)]
    seeds = split_seeds(pairs, 0.3, rng_seed=1)
    assert len(seeds.train_pairs) == 4500


def test_split_partitions_without_overlap():
    pairs = [(i, i + 100) for i in range(40)]
    seeds = split_seeds(pairs, 0.25, rng_seed=3)
    assert set(seeds.train_pairs).isdisjoint(seeds.test_pairs)
    assert sorted(seeds.train_pairs + seeds.test_pairs) == sorted(pairs)


def test_split_rejects_bad_ratio():
    with pytest.raises(ValueError):
        split_seeds([(0, 0)], 1.5, 0)


# ---------------------------------------------------------------------------
# bag-of-words features

def test_bow_relation_zero_row_for_isolated_entity():
    kg1 = _mk_kg(1, 3, [(0, 0, 1)])
    kg2 = _mk_kg(2, 2, [(0, 0, 1)])
    x1, _ = build_bow_relation_features((kg1, kg2), 4)
    assert np.all(x1[2] == 0)


def test_bow_relation_counts_against_direct_oracle():
    # entity 0 participates twice in relation 7; rank of 7 determined by
    # brute-force joint frequency sort
    kg1 = _mk_kg(1, 3, [(0, 7, 1), (1, 7, 0), (0, 3, 2)])
    kg2 = _mk_kg(2, 2, [(0, 3, 1), (1, 3, 0), (0, 3, 0)])
    x1, x2 = build_bow_relation_features((kg1, kg2), 4)

    counts = Counter()
    for kg in (kg1, kg2):
        counts.update(r for _, r, _ in kg.triples)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    rank = {r: i for i, (r, _) in enumerate(ranked)}
    assert rank == {3: 0, 7: 1}
    assert x1[0, rank[7]] == 2.0  # head of one triple, tail of another
    assert x1[0, rank[3]] == 1.0
    assert np.all(x1[:, 2:] == 0)  # only two distinct relations


def test_bow_relation_truncates_long_tail():
    # relation 9 appears once; relations 0..3 appear twice each; d_r = 4
    triples = [(0, r, 1) for r in range(4)] + [(1, r, 0) for r in range(4)]
    kg1 = _mk_kg(1, 3, triples + [(2, 9, 0)])
    kg2 = _mk_kg(2, 2, [(0, 0, 1)])
    x1, _ = build_bow_relation_features((kg1, kg2), 4)
    # entity 2 only participates in the dropped relation (as head), and
    # entity 0 as its tail: neither contributes anything for id 9
    assert np.all(x1[2] == 0)


def test_bow_column_sums_equal_participation(kg_pair=None):
    rng = np.random.default_rng(5)
    triples1 = [(int(rng.integers(0, 20)), int(rng.integers(0, 8)),
                 int(rng.integers(0, 20))) for _ in range(60)]
    triples2 = [(int(rng.integers(0, 15)), int(rng.integers(0, 8)),
                 int(rng.integers(0, 15))) for _ in range(50)]
    kg1 = _mk_kg(1, 20, list(dict.fromkeys(triples1)))
    kg2 = _mk_kg(2, 15, list(dict.fromkeys(triples2)))
    d_r = 6
    x1, x2 = build_bow_relation_features((kg1, kg2), d_r)

    counts = Counter()
    for kg in (kg1, kg2):
        counts.update(r for _, r, _ in kg.triples)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:d_r]
    for pos, (rel, _) in enumerate(ranked):
        participation = sum(2 for kg in (kg1, kg2) for _, r, _ in kg.triples
                            if r == rel)
        assert x1[:, pos].sum() + x2[:, pos].sum() == participation


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 49), st.integers(0, 9)),
                min_size=1, max_size=60))
def test_bow_ranking_is_top_k_most_frequent(triples):
    kg1 = _mk_kg(1, 10, list(dict.fromkeys(triples)))
    kg2 = _mk_kg(2, 2, [])
    d_r = 5
    x1, _ = build_bow_relation_features((kg1, kg2), d_r)
    counts = Counter(r for _, r, _ in kg1.triples)
    expected = [r for r, _ in sorted(counts.items(),
                                     key=lambda kv: (-kv[1], kv[0]))[:d_r]]
    for pos, rel in enumerate(expected):
        participation = sum(2 for _, r, _ in kg1.triples if r == rel)
        assert x1[:, pos].sum() == participation
    assert np.all(x1[:, len(expected):] == 0)


def test_bow_attribute_no_attrs_row_is_zero():
    kg1 = _mk_kg(1, 2, [], attrs=[{1}, set()])
    kg2 = _mk_kg(2, 1, [], attrs=[{1}])
    x1, _ = build_bow_attribute_features((kg1, kg2), 3)
    assert np.all(x1[1] == 0)


def test_bow_attribute_set_semantics():
    # duplicates in the input collapse because attributes are sets
    kg1 = _mk_kg(1, 1, [], attrs=[{2, 2}])
    kg2 = _mk_kg(2, 1, [], attrs=[{2}])
    x1, _ = build_bow_attribute_features((kg1, kg2), 2)
    assert x1[0, 0] == 1.0


def test_bow_attribute_rarest_never_set():
    # 1200 distinct attribute ids on a strict frequency ladder (attribute a
    # held by 1200 - a entities); width 1000 drops the 200 rarest per a
    # brute-force frequency sort
    n = 1200
    attrs1 = [set(range(n - e)) for e in range(n)]
    kg1 = _mk_kg(1, n, [], attrs=attrs1)
    kg2 = _mk_kg(2, 1, [], attrs=[set()])
    x1, _ = build_bow_attribute_features((kg1, kg2), 1000)

    counts = Counter()
    for ids in attrs1:
        counts.update(ids)
    kept = {a for a, _ in sorted(counts.items(),
                                 key=lambda kv: (-kv[1], kv[0]))[:1000]}
    assert kept == set(range(1000))
    assert int(x1.sum()) == sum(counts[a] for a in kept)
    assert int(x1.sum()) == sum(n - a for a in range(1000))


# ---------------------------------------------------------------------------
# imputation

def test_impute_noop_when_all_present():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    out = impute_missing_visual(x, np.ones(5, dtype=bool), 1)
    assert np.array_equal(out, x)


def test_impute_degenerate_std_copies_the_single_row():
    x = np.zeros((3, 4))
    x[0] = [1.0, 2.0, 3.0, 4.0]
    mask = np.array([True, False, False])
    out = impute_missing_visual(x, mask, 9)
    assert np.array_equal(out[1], x[0])
    assert np.array_equal(out[2], x[0])


def test_impute_never_touches_present_rows():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 3))
    mask = np.zeros(10, dtype=bool)
    mask[[0, 4, 7]] = True
    out = impute_missing_visual(x, mask, 3)
    assert np.array_equal(out[mask], x[mask])


def test_impute_law_of_large_numbers():
    rng = np.random.default_rng(42)
    n_avail, n_missing, dims = 1000, 10000, 3
    x = np.zeros((n_avail + n_missing, dims))
    mask = np.zeros(n_avail + n_missing, dtype=bool)
    mask[:n_avail] = True
    x[:n_avail] = rng.normal(3.0, 2.0, size=(n_avail, dims))
    out = impute_missing_visual(x, mask, 3)
    imputed_mean = out[n_avail:].mean(axis=0)
    assert np.all(np.abs(imputed_mean - 3.0) < 0.3)


def test_impute_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(20, 4))
    mask = rng.random(20) < 0.5
    mask[0] = True
    a = impute_missing_visual(x, mask, 77)
    b = impute_missing_visual(x, mask, 77)
    assert a.tobytes() == b.tobytes()


def test_impute_requires_an_available_image():
    with pytest.raises(ValueError, match="disable the visual modality"):
        impute_missing_visual(np.zeros((2, 2)), np.zeros(2, dtype=bool), 0)


# ---------------------------------------------------------------------------
# synthetic generator

def test_synthetic_noise_zero_is_isomorphic():
    kg1, kg2, pairs, _ = generate_synthetic_pair(30, 5, 10, 8, noise=0.0,
                                                 rng_seed=4)
    perm = dict(pairs)
    mapped = {(perm[h], r, perm[t]) for h, r, t in kg1.triples}
    assert mapped == set(kg2.triples)


def test_synthetic_deterministic():
    a = generate_synthetic_pair(200, 10, 30, 16, noise=0.1, rng_seed=12)
    b = generate_synthetic_pair(200, 10, 30, 16, noise=0.1, rng_seed=12)
    assert a[0].triples == b[0].triples
    assert a[1].triples == b[1].triples
    assert a[2] == b[2]
    assert a[3][0].x_v.tobytes() == b[3][0].x_v.tobytes()


def test_synthetic_full_noise_overlap_is_chance_level():
    kg1, kg2, pairs, _ = generate_synthetic_pair(100, 5, 10, 4, noise=1.0,
                                                 rng_seed=8)
    perm = dict(pairs)
    mapped = {(perm[h], r, perm[t]) for h, r, t in kg1.triples}
    overlap = len(mapped & set(kg2.triples)) / len(kg1.triples)
    # chance of hitting one of ~300 mapped triples among 100*100*5 slots
    assert overlap < 0.05


def test_feature_banks_shapes_and_determinism():
    kg1, kg2, pairs, (b1, b2) = generate_synthetic_pair(40, 6, 12, 8,
                                                        noise=0.1, rng_seed=3)
    bank1, bank2 = build_feature_banks(kg1, kg2, b1.x_v, b2.x_v, d=16, d_r=10,
                                       d_a=10, init_seed=1, impute_seed=2)
    assert bank1.x_g.shape == (40, 16)
    assert bank1.x_r.shape == (40, 10)
    assert bank1.x_a.shape == (40, 10)
    assert bank1.x_v.shape == (40, 8)
    again, _ = build_feature_banks(kg1, kg2, b1.x_v, b2.x_v, d=16, d_r=10,
                                   d_a=10, init_seed=1, impute_seed=2)
    assert again.x_g.tobytes() == bank1.x_g.tobytes()
