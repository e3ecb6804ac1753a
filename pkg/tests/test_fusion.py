import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import umaea.numcore as nc
from umaea.fusion import (AttentionRecord, MhcaParams, MODALITIES,
                          ModalityWeights, alignment_probability,
                          batch_alignment_probs, contrastive_loss, ecia_loss,
                          entity_confidence, gmi_embed, iir_loss, mhca_layer,
                          stage1_loss)


def _unit_rows(vectors):
    x = np.asarray(vectors, dtype=np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _brute_force_pair_probs(z1, z2, tau):
    """In-batch probabilities evaluated with explicit python loops."""
    b = len(z1)
    gamma = lambda u, v: math.exp(float(u @ v) / tau)
    p12, p21 = [], []
    for i in range(b):
        negs = [z1[j] for j in range(b) if j != i] + \
               [z2[j] for j in range(b) if j != i]
        num = gamma(z1[i], z2[i])
        p12.append(num / (num + sum(gamma(z1[i], n) for n in negs)))
        num = gamma(z2[i], z1[i])
        p21.append(num / (num + sum(gamma(z2[i], n) for n in negs)))
    return np.array(p12), np.array(p21)


def _brute_force_loss(z1, z2, tau):
    p12, p21 = _brute_force_pair_probs(z1, z2, tau)
    return float(np.mean(-np.log((p12 + p21) / 2.0)))


# ---------------------------------------------------------------------------
# global modality integration

def _toy_embeddings(n=6, d=5, seed=0):
    rng = np.random.default_rng(seed)
    return {m: nc.constant(rng.normal(size=(n, d))) for m in MODALITIES}


def test_gmi_output_dimension():
    h = _toy_embeddings(d=300)
    weights = nc.constant(np.full(4, 0.25))
    assert gmi_embed(h, weights).data.shape == (6, 1200)


def test_gmi_equal_logits_scale_each_segment_by_quarter():
    h = _toy_embeddings()
    mw = ModalityWeights.init(np.float64)
    weights = mw.weights(None)
    out = gmi_embed(h, weights)
    for i, m in enumerate(MODALITIES):
        seg = out.data[:, i * 5:(i + 1) * 5]
        assert np.allclose(seg, 0.25 * h[m].data)


def test_gmi_dominant_logit():
    mw = ModalityWeights.init(np.float64)
    mw.logits.value[...] = [10.0, -10.0, -10.0, -10.0]
    w = mw.weights(None).data
    assert w[0] > 0.999999
    assert np.all(w[1:] < 1e-8)
    assert w.sum() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# alignment probabilities and contrastive loss

def test_single_pair_probability_is_one():
    v = nc.constant(np.array([1.0, 0.0]))
    p = alignment_probability(v, v, None, tau=0.1)
    assert float(p.data) == 1.0


def test_probability_identical_pair_one_orthogonal_negative():
    src = nc.constant(np.array([2.0, 0.0]))       # normalization makes it unit
    pos = nc.constant(np.array([5.0, 0.0]))
    neg = nc.constant(np.array([[0.0, 3.0]]))
    p = alignment_probability(src, pos, neg, tau=1.0)
    expected = math.e / (math.e + 1.0)            # 0.7310585786300049
    assert float(p.data) == pytest.approx(expected, abs=1e-12)


def test_probability_scale_invariance_under_normalization():
    rng = np.random.default_rng(1)
    src = rng.normal(size=3)
    pos = rng.normal(size=3)
    negs = rng.normal(size=(4, 3))
    p1 = alignment_probability(nc.constant(src), nc.constant(pos),
                               nc.constant(negs), tau=0.1)
    p2 = alignment_probability(nc.constant(5.0 * src), nc.constant(5.0 * pos),
                               nc.constant(5.0 * negs), tau=0.1)
    assert float(p1.data) == pytest.approx(float(p2.data), abs=1e-12)


def test_batch_probs_match_explicit_negative_construction():
    # dual route: the batched masked-softmax against the single-query form
    rng = np.random.default_rng(2)
    z1 = _unit_rows(rng.normal(size=(5, 4)))
    z2 = _unit_rows(rng.normal(size=(5, 4)))
    p12, p21 = batch_alignment_probs(nc.constant(z1), nc.constant(z2), 0.1)
    bf12, bf21 = _brute_force_pair_probs(z1, z2, 0.1)
    assert np.allclose(p12.data, bf12, atol=1e-12)
    assert np.allclose(p21.data, bf21, atol=1e-12)


def test_single_pair_batch_loss_is_exactly_zero():
    rng = np.random.default_rng(3)
    h1 = nc.constant(rng.normal(size=(1, 6)))
    h2 = nc.constant(rng.normal(size=(1, 6)))
    assert float(contrastive_loss(h1, h2, 0.1).data) == 0.0


def test_two_orthogonal_pairs_match_brute_force():
    z1 = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    z2 = np.array([[0, 0, 1.0, 0], [0, 0, 0, 1.0]])
    loss = contrastive_loss(nc.constant(z1), nc.constant(z2), 0.1)
    expected = _brute_force_loss(z1, z2, 0.1)
    assert float(loss.data) == pytest.approx(expected, abs=1e-12)
    # all similarities are zero, so each direction is uniform over 3
    # candidates: loss = -log(1/3)
    assert float(loss.data) == pytest.approx(math.log(3.0), abs=1e-12)


def test_loss_is_batch_order_invariant():
    rng = np.random.default_rng(4)
    z1 = rng.normal(size=(6, 5))
    z2 = rng.normal(size=(6, 5))
    loss = float(contrastive_loss(nc.constant(z1), nc.constant(z2), 0.1).data)
    perm = np.array([3, 0, 5, 1, 4, 2])
    loss_p = float(contrastive_loss(nc.constant(z1[perm]),
                                    nc.constant(z2[perm]), 0.1).data)
    assert loss_p == pytest.approx(loss, abs=1e-12)


def test_embedding_rescale_leaves_probs_unchanged():
    rng = np.random.default_rng(5)
    h1 = rng.normal(size=(4, 3))
    h2 = rng.normal(size=(4, 3))
    a = batch_alignment_probs(nc.constant(h1), nc.constant(h2), 0.1)
    b = batch_alignment_probs(nc.constant(7.0 * h1), nc.constant(7.0 * h2), 0.1)
    assert np.allclose(a[0].data, b[0].data, atol=1e-12)


def test_adding_a_negative_strictly_increases_single_pair_loss():
    z1 = np.array([[1.0, 0.0]])
    z2 = np.array([[1.0, 0.0]])
    base = float(contrastive_loss(nc.constant(z1), nc.constant(z2), 0.1).data)
    z1b = np.vstack([z1, [[0.0, 1.0]]])
    z2b = np.vstack([z2, [[0.0, -1.0]]])
    bigger = float(contrastive_loss(nc.constant(z1b), nc.constant(z2b), 0.1).data)
    assert base == 0.0
    assert bigger > base


# ---------------------------------------------------------------------------
# cross-modal attention

def _mhca(d=6, heads=1, seed=0, dtype=np.float64):
    return MhcaParams.init(d, heads, 4, np.random.default_rng(seed), dtype)


def test_identical_modalities_give_uniform_attention():
    params = _mhca()
    rng = np.random.default_rng(1)
    base = rng.normal(size=(5, 6))
    h = {m: nc.constant(base.copy()) for m in MODALITIES}
    _, record = mhca_layer(h, params, None)
    for betas in record.beta:
        for m in MODALITIES:
            assert np.allclose(betas[m].data, 0.25, atol=1e-6)


def test_attention_rows_sum_to_one():
    params = _mhca(heads=2, seed=2)
    h = _toy_embeddings(n=7, d=6, seed=3)
    _, record = mhca_layer(h, params, None)
    assert record.n_heads == 2
    for betas in record.beta:
        for m in MODALITIES:
            assert np.allclose(betas[m].data.sum(axis=1), 1.0, atol=1e-6)


def test_degenerate_weights_reduce_to_double_layernorm():
    # zero output projection and zero second FFN layer leave only the two
    # residual-normalization steps
    params = _mhca(seed=4)
    params.w_o.value[...] = 0.0
    params.ffn_w2.value[...] = 0.0
    params.ffn_b2.value[...] = 0.0
    h = _toy_embeddings(n=4, d=6, seed=5)
    out, _ = mhca_layer(h, params, None)
    gamma = nc.constant(params.ln_attn_gamma.value)
    beta = nc.constant(params.ln_attn_beta.value)
    for m in MODALITIES:
        ln1 = nc.layer_norm(h[m], gamma, beta)
        ln2 = nc.layer_norm(ln1, nc.constant(params.ln_ffn_gamma.value),
                            nc.constant(params.ln_ffn_beta.value))
        assert np.allclose(out[m].data, ln2.data, atol=1e-12)


def test_confidence_uniform_beta_gives_quarter():
    rows = nc.constant(np.full((3, 4), 0.25))
    record = AttentionRecord(beta=[{m: rows for m in MODALITIES}], n_heads=1)
    w = entity_confidence(record)
    assert np.allclose(w.data, 0.25, atol=1e-12)


def test_confidence_rows_sum_to_one():
    rng = np.random.default_rng(6)
    betas = {}
    for m in MODALITIES:
        raw = rng.random((5, 4))
        betas[m] = nc.constant(raw / raw.sum(axis=1, keepdims=True))
    record = AttentionRecord(beta=[betas], n_heads=1)
    w = entity_confidence(record)
    assert np.allclose(w.data.sum(axis=1), 1.0, atol=1e-6)


def test_confidence_mass_concentrated_on_visual():
    # every modality attends only to the visual slot: its received mass is
    # maximal, so its confidence must be the unique maximum
    concentrated = np.zeros((3, 4))
    concentrated[:, MODALITIES.index("v")] = 1.0
    rows = nc.constant(concentrated)
    record = AttentionRecord(beta=[{m: rows for m in MODALITIES}], n_heads=1)
    w = entity_confidence(record).data
    v_col = MODALITIES.index("v")
    for j in range(4):
        if j != v_col:
            assert np.all(w[:, v_col] > w[:, j])
    # direct evaluation: softmax of [0,0,0,4]/sqrt(4) per row
    expected = np.exp(np.array([0.0, 0, 0, 4.0]) / 2.0)
    expected /= expected.sum()
    assert np.allclose(w, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# confidence-damped and refined objectives

def _batch_inputs(b=3, d=5, seed=7):
    rng = np.random.default_rng(seed)
    h = {m: nc.constant(rng.normal(size=(2 * b, d))) for m in MODALITIES}
    return h


def test_ecia_with_unit_confidence_equals_plain_sum():
    b = 3
    h = _batch_inputs(b)
    conf = nc.constant(np.ones((2 * b, 4)))
    total, per_mod = ecia_loss(h, b, conf, 0.1)
    plain = sum(float(contrastive_loss(
        nc.gather_rows(h[m], np.arange(b)),
        nc.gather_rows(h[m], np.arange(b, 2 * b)), 0.1).data)
        for m in MODALITIES)
    assert float(total.data) == pytest.approx(plain, abs=1e-9)


def test_ecia_constant_half_confidence_adds_log2_per_modality():
    b = 4
    h = _batch_inputs(b, seed=8)
    conf = nc.constant(np.full((2 * b, 4), 0.5))
    total, per_mod = ecia_loss(h, b, conf, 0.1)
    for m in MODALITIES:
        plain = float(contrastive_loss(
            nc.gather_rows(h[m], np.arange(b)),
            nc.gather_rows(h[m], np.arange(b, 2 * b)), 0.1).data)
        assert float(per_mod[m].data) == pytest.approx(plain + math.log(2.0),
                                                       abs=1e-9)


def test_ecia_uses_pairwise_minimum():
    b = 2
    h = _batch_inputs(b, seed=9)
    conf = np.ones((2 * b, 4))
    conf[0, :] = 0.3   # first pair, side 1
    conf[b, :] = 0.7   # first pair, side 2
    total_min, _ = ecia_loss(h, b, nc.constant(conf), 0.1)
    conf_eq = conf.copy()
    conf_eq[b, :] = 0.3  # force both sides to the smaller value
    total_eq, _ = ecia_loss(h, b, nc.constant(conf_eq), 0.1)
    assert float(total_min.data) == pytest.approx(float(total_eq.data), abs=1e-12)


def test_iir_single_pair_batch_is_zero():
    h_hat = {m: nc.constant(np.random.default_rng(10).normal(size=(2, 4)))
             for m in MODALITIES}
    assert float(iir_loss(h_hat, 1, 0.1).data) == 0.0


def test_iir_equals_contrastive_on_hidden_states():
    b = 4
    h_hat = _batch_inputs(b, seed=11)
    expected = sum(float(contrastive_loss(
        nc.gather_rows(h_hat[m], np.arange(b)),
        nc.gather_rows(h_hat[m], np.arange(b, 2 * b)), 0.1).data)
        for m in MODALITIES)
    assert float(iir_loss(h_hat, b, 0.1).data) == pytest.approx(expected, abs=1e-12)


def test_iir_matches_brute_force_on_four_pairs():
    b = 4
    rng = np.random.default_rng(12)
    h_hat = {m: nc.constant(rng.normal(size=(2 * b, 5))) for m in MODALITIES}
    expected = 0.0
    for m in MODALITIES:
        z1 = _unit_rows(h_hat[m].data[:b])
        z2 = _unit_rows(h_hat[m].data[b:])
        expected += _brute_force_loss(z1, z2, 0.1)
    assert float(iir_loss(h_hat, b, 0.1).data) == pytest.approx(expected, abs=1e-10)


# ---------------------------------------------------------------------------
# stage-1 total

def test_stage1_breakdown_sums_to_total():
    b = 3
    rng = np.random.default_rng(13)
    h = {m: nc.constant(rng.normal(size=(2 * b, 6))) for m in MODALITIES}
    params = _mhca(d=6, seed=14)
    weights = nc.constant(np.full(4, 0.25))
    total, breakdown = stage1_loss(h, weights, b, params, 0.1, None)
    assert breakdown.l_total == pytest.approx(
        breakdown.l_gmi + breakdown.l_ecia + breakdown.l_iir, abs=1e-6)
    assert float(total.data) == pytest.approx(breakdown.l_total, abs=1e-9)
    assert breakdown.l_gmi >= 0.0


def test_stage1_losses_finite_on_random_inputs():
    rng = np.random.default_rng(15)
    for trial in range(5):
        b = int(rng.integers(1, 6))
        h = {m: nc.constant(rng.normal(size=(2 * b, 6))) for m in MODALITIES}
        params = _mhca(d=6, seed=trial)
        weights = nc.constant(np.full(4, 0.25))
        total, breakdown = stage1_loss(h, weights, b, params, 0.1, None)
        assert math.isfinite(breakdown.l_total)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (8, 4),
                  elements=st.floats(-5, 5, allow_nan=False)))
def test_normalization_invariants_hold_for_arbitrary_inputs(raw):
    h = {m: nc.constant(raw + i) for i, m in enumerate(MODALITIES)}
    params = _mhca(d=4, seed=16)
    _, record = mhca_layer(h, params, None)
    for betas in record.beta:
        for m in MODALITIES:
            assert np.allclose(betas[m].data.sum(axis=1), 1.0, atol=1e-6)
    conf = entity_confidence(record)
    assert np.allclose(conf.data.sum(axis=1), 1.0, atol=1e-6)


def test_stage1_gradients_pass_finite_difference():
    b = 3
    d = 4
    rng = np.random.default_rng(20)
    params = _mhca(d=d, seed=21)
    mw = ModalityWeights.init(np.float64)
    mw.logits.value[...] = rng.normal(size=4) * 0.1
    h_base = {m: nc.Parameter(f"h_{m}", rng.normal(size=(2 * b, d)))
              for m in MODALITIES}

    def loss_fn(tape):
        h = {m: h_base[m].tensor(tape) for m in MODALITIES}
        total, _ = stage1_loss(h, mw.weights(tape), b, params, 0.5, tape)
        return total

    checked = list(h_base.values()) + mw.parameters() + params.parameters()
    err = nc.finite_diff_check(loss_fn, checked, epsilon=1e-5)
    assert err < 1e-4
