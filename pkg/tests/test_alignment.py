import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from urbanalign import alignment as al
from urbanalign import autodiff as ad
from urbanalign.optim import Adam


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _manual_transform(row, p):
    h = row @ p.w1.values + p.b1.values
    from urbanalign.encoders import _np_gelu

    return _np_gelu(h) @ p.w2.values + p.b2.values


def test_aggregate_single_slot_is_its_transform():
    rng = np.random.default_rng(0)
    p = al.AggregatorParams.create(6, rng)
    feats = ad.constant(rng.normal(size=(1, 6)))
    out = al.aggregate(feats, [True], p)
    expected = _manual_transform(feats.values[0:1], p)[0]
    np.testing.assert_array_equal(out.values, expected)


def test_aggregate_permutation_invariance_bit_exact():
    rng = np.random.default_rng(1)
    p = al.AggregatorParams.create(6, rng)
    feats = rng.normal(size=(4, 6))
    out = al.aggregate(ad.constant(feats), [True] * 4, p)
    out_perm = al.aggregate(ad.constant(feats[[2, 0, 3, 1]]), [True] * 4, p)
    assert out.values.tobytes() == out_perm.values.tobytes()


def test_aggregate_masked_padding_bit_exact():
    rng = np.random.default_rng(2)
    p = al.AggregatorParams.create(6, rng)
    feats = rng.normal(size=(3, 6))
    padded = np.vstack([feats, np.zeros((2, 6))])
    out = al.aggregate(ad.constant(feats), [True] * 3, p)
    out_pad = al.aggregate(ad.constant(padded), [True] * 3 + [False] * 2, p)
    assert out.values.tobytes() == out_pad.values.tobytes()


def test_aggregate_all_invalid_is_zero():
    rng = np.random.default_rng(3)
    p = al.AggregatorParams.create(6, rng)
    out = al.aggregate(ad.constant(np.zeros((2, 6))), [False, False], p)
    np.testing.assert_array_equal(out.values, np.zeros(6))


def test_aggregate_mask_length_mismatch():
    rng = np.random.default_rng(4)
    p = al.AggregatorParams.create(6, rng)
    with pytest.raises(ad.ShapeError, match="mask length"):
        al.aggregate(ad.constant(np.zeros((2, 6))), [True], p)


def test_aggregate_gradient():
    rng = np.random.default_rng(5)
    p = al.AggregatorParams.create(4, rng)
    feats = ad.parameter(rng.normal(size=(3, 4)))
    w = ad.constant(rng.normal(size=4))

    def loss(*_):
        return ad.sum_all(ad.mul(al.aggregate(feats, [True, False, True], p), w))

    report = ad.grad_check(loss, [feats, p.w1, p.b1, p.w2, p.b2])
    assert report.passed, report


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def test_fuse_additive_identity():
    rng = np.random.default_rng(6)
    params = al.FusionParams.create("addition", 5, rng)
    x = ad.constant(rng.normal(size=5))
    zero = ad.constant(np.zeros(5))
    out = al.fuse(x, zero, zero, params)
    assert out.values.tobytes() == x.values.tobytes()


def test_fuse_commutative_bit_exact():
    rng = np.random.default_rng(7)
    params = al.FusionParams.create("addition", 5, rng)
    x, y, z = (ad.constant(rng.normal(size=5)) for _ in range(3))
    a = al.fuse(x, y, z, params)
    b = al.fuse(x, z, y, params)
    assert a.values.tobytes() == b.values.tobytes()


def test_fusion_modes_differ_on_generic_input():
    rng = np.random.default_rng(8)
    x, y, z = (ad.constant(rng.normal(size=5)) for _ in range(3))
    add_out = al.fuse(x, y, z, al.FusionParams.create("addition", 5, rng))
    cat_out = al.fuse(x, y, z, al.FusionParams.create("concat", 5, rng))
    mlp_out = al.fuse(x, y, z, al.FusionParams.create("mlp", 5, rng))
    assert np.linalg.norm(add_out.values - cat_out.values) > 1e-9
    assert np.linalg.norm(add_out.values - mlp_out.values) > 1e-9


def test_fuse_dimension_mismatch():
    rng = np.random.default_rng(9)
    params = al.FusionParams.create("addition", 5, rng)
    with pytest.raises(ad.ShapeError, match="dimension"):
        al.fuse(ad.constant(np.zeros(5)), ad.constant(np.zeros(4)),
                ad.constant(np.zeros(5)), params)


def test_fusion_mode_validation():
    with pytest.raises(ValueError, match="fusion mode"):
        al.FusionParams.create("bogus", 4, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# global contrastive loss
# ---------------------------------------------------------------------------


def test_global_loss_identity_n2_hand_value():
    eye = ad.constant(np.eye(2))
    loss = al.global_contrastive_loss(eye, eye, tau=1.0)
    expected = -math.log(math.e / (math.e + 1.0))  # 0.31326...
    assert abs(loss.item() - expected) < 1e-12
    assert abs(loss.item() - 0.31326) < 1e-4


@pytest.mark.parametrize("n", [2, 4, 8])
@pytest.mark.parametrize("tau", [0.07, 1.0, 3.0])
def test_global_loss_uniform_similarity_is_log_n(n, tau):
    rng = np.random.default_rng(n)
    row = rng.normal(size=8)
    row /= np.linalg.norm(row)
    same = ad.constant(np.tile(row, (n, 1)))  # all similarities equal 1
    loss = al.global_contrastive_loss(same, same, tau=tau)
    assert abs(loss.item() - math.log(n)) < 1e-12


def test_global_loss_vanishes_at_low_temperature():
    eye = ad.constant(np.eye(4))
    loss = al.global_contrastive_loss(eye, eye, tau=0.01)
    assert 0.0 <= loss.item() < 1e-3


def test_global_loss_positive_and_permutation_invariant():
    rng = np.random.default_rng(10)
    i_emb = unit_rows(rng, 5, 6)
    t_emb = unit_rows(rng, 5, 6)
    loss = al.global_contrastive_loss(ad.constant(i_emb), ad.constant(t_emb), 0.5)
    assert loss.item() > 0.0
    perm = [3, 1, 4, 0, 2]
    loss_p = al.global_contrastive_loss(
        ad.constant(i_emb[perm]), ad.constant(t_emb[perm]), 0.5
    )
    np.testing.assert_allclose(loss_p.item(), loss.item(), atol=1e-12)


def test_global_loss_validation():
    eye = ad.constant(np.eye(2))
    with pytest.raises(ValueError, match="at least 2"):
        al.global_contrastive_loss(ad.constant(np.ones((1, 3))),
                                   ad.constant(np.ones((1, 3))), 1.0)
    with pytest.raises(ValueError, match="positive"):
        al.global_contrastive_loss(eye, eye, tau=0.0)
    with pytest.raises(ValueError, match="unit-norm"):
        al.global_contrastive_loss(ad.constant(2.0 * np.eye(2)), eye, 1.0)


def test_global_loss_gradient():
    rng = np.random.default_rng(11)
    raw_i = ad.parameter(rng.normal(size=(3, 4)))
    raw_t = ad.parameter(rng.normal(size=(3, 4)))

    def loss(*_):
        return al.global_contrastive_loss(
            ad.l2_normalize_rows(raw_i), ad.l2_normalize_rows(raw_t), 0.3
        )

    report = ad.grad_check(loss, [raw_i, raw_t])
    assert report.passed, report


def test_global_loss_learnable_temperature_gradient():
    rng = np.random.default_rng(12)
    raw_i = ad.parameter(rng.normal(size=(3, 4)))
    raw_t = ad.parameter(rng.normal(size=(3, 4)))
    tau = ad.parameter(np.asarray(0.4))

    def loss(*_):
        return al.global_contrastive_loss(
            ad.l2_normalize_rows(raw_i), ad.l2_normalize_rows(raw_t), tau
        )

    report = ad.grad_check(loss, [raw_i, raw_t, tau])
    assert report.passed, report


# ---------------------------------------------------------------------------
# token similarity
# ---------------------------------------------------------------------------


def brute_force_sim(v: np.ndarray, t: np.ndarray) -> tuple[float, float]:
    """Independent double-loop reference for the token similarity scores."""
    l1, l2 = v.shape[0], t.shape[0]
    s_vt = sum(max(np.dot(v[k1], t[k2]) for k2 in range(l2)) for k1 in range(l1)) / l1
    s_tv = sum(max(np.dot(t[k2], v[k1]) for k1 in range(l1)) for k2 in range(l2)) / l2
    return s_vt, s_tv


def test_token_similarity_singletons_reduce_to_dot():
    rng = np.random.default_rng(13)
    v = unit_rows(rng, 1, 5)
    t = unit_rows(rng, 1, 5)
    s_vt, s_tv = al.token_similarity(ad.constant(v), ad.constant(t))
    dot = float(np.dot(v[0], t[0]))
    assert s_vt.item() == pytest.approx(dot, abs=1e-15)
    assert s_tv.item() == pytest.approx(dot, abs=1e-15)


def test_token_similarity_self_match_is_one():
    v = ad.constant(np.eye(3))
    s_vt, s_tv = al.token_similarity(v, v)
    assert s_vt.item() == 1.0
    assert s_tv.item() == 1.0


def test_token_similarity_hand_case():
    v = ad.constant([[1.0, 0.0], [0.0, 1.0]])
    t = ad.constant([[0.6, 0.8]])
    s_vt, s_tv = al.token_similarity(v, t)
    assert s_vt.item() == pytest.approx(0.7, abs=1e-15)
    assert s_tv.item() == pytest.approx(0.8, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_token_similarity_matches_brute_force_exactly(seed):
    rng = np.random.default_rng(seed)
    l1, l2 = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    v = unit_rows(rng, l1, 6)
    t = unit_rows(rng, l2, 6)
    s_vt, s_tv = al.token_similarity(ad.constant(v), ad.constant(t))
    ref_vt, ref_tv = brute_force_sim(v, t)
    assert s_vt.item() == ref_vt
    assert s_tv.item() == ref_tv


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)).filter(
        lambda x: np.all(np.linalg.norm(x, axis=1) > 1e-3)
    ),
    hnp.arrays(np.float64, (2, 4), elements=st.floats(-5, 5)).filter(
        lambda x: np.all(np.linalg.norm(x, axis=1) > 1e-3)
    ),
)
def test_token_similarity_bounded(v, t):
    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    tn = t / np.linalg.norm(t, axis=1, keepdims=True)
    s_vt, s_tv = al.token_similarity(ad.constant(vn), ad.constant(tn))
    assert -1.0 - 1e-12 <= s_vt.item() <= 1.0 + 1e-12
    assert -1.0 - 1e-12 <= s_tv.item() <= 1.0 + 1e-12


def test_token_similarity_empty_error():
    with pytest.raises(ad.ShapeError):
        al.token_similarity(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 4))))


def test_token_similarity_gradient():
    rng = np.random.default_rng(14)
    v = ad.parameter(rng.normal(size=(3, 4)))
    t = ad.parameter(rng.normal(size=(2, 4)))

    def loss(*_):
        s_vt, s_tv = al.token_similarity(
            ad.l2_normalize_rows(v), ad.l2_normalize_rows(t)
        )
        return ad.add(s_vt, s_tv)

    assert ad.grad_check(loss, [v, t]).passed


# ---------------------------------------------------------------------------
# local contrastive loss
# ---------------------------------------------------------------------------


def test_local_loss_uniform_similarity_is_log2():
    u = np.zeros(4)
    u[0] = 1.0
    tok = ad.constant(u[None, :])
    loss = al.local_contrastive_loss([tok, tok], [tok, tok], tau=0.7)
    assert abs(loss.item() - math.log(2.0)) < 1e-12


def test_local_loss_singleton_tokens_equal_global_loss():
    rng = np.random.default_rng(15)
    i_emb = unit_rows(rng, 3, 6)
    t_emb = unit_rows(rng, 3, 6)
    views = [ad.constant(i_emb[i: i + 1]) for i in range(3)]
    texts = [ad.constant(t_emb[i: i + 1]) for i in range(3)]
    local = al.local_contrastive_loss(views, texts, tau=0.07)
    global_ = al.global_contrastive_loss(
        ad.constant(i_emb), ad.constant(t_emb), tau=0.07
    )
    assert abs(local.item() - global_.item()) < 1e-12


def test_local_loss_requires_two_pairs():
    tok = ad.constant(np.eye(3)[:1])
    with pytest.raises(ValueError, match="at least 2"):
        al.local_contrastive_loss([tok], [tok], tau=0.1)


def test_local_loss_decreases_under_training():
    rng = np.random.default_rng(16)
    views = [ad.parameter(rng.normal(size=(3, 6))) for _ in range(2)]
    texts = [ad.parameter(rng.normal(size=(2, 6))) for _ in range(2)]
    opt = Adam(views + texts, lr=0.05)

    def compute():
        return al.local_contrastive_loss(
            [ad.l2_normalize_rows(v) for v in views],
            [ad.l2_normalize_rows(t) for t in texts],
            tau=0.2,
        )

    ad.reset_tape()
    initial = compute().item()
    last = initial
    for _ in range(50):
        ad.reset_tape()
        loss = compute()
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
        last = loss.item()
    assert last < initial


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------


def test_total_loss_weights():
    l_cg = ad.constant(np.asarray(0.4))
    l_cl = ad.constant(np.asarray(0.6))
    assert al.total_loss(l_cg, l_cl, 1.0, 0.0).item() == 0.4
    assert al.total_loss(l_cg, l_cl, 0.5, 0.5).item() == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError, match="nonnegative"):
        al.total_loss(l_cg, l_cl, -0.1, 0.5)


def test_total_loss_gradient_is_weighted_sum_of_parts():
    rng = np.random.default_rng(17)
    raw_i = ad.parameter(rng.normal(size=(2, 4)))
    raw_t = ad.parameter(rng.normal(size=(2, 4)))
    alpha, beta = 0.5, 0.5

    def views():
        return [ad.slice_rows(ad.l2_normalize_rows(raw_i), i, i + 1) for i in range(2)]

    def texts():
        return [ad.slice_rows(ad.l2_normalize_rows(raw_t), i, i + 1) for i in range(2)]

    def l_cg():
        return al.global_contrastive_loss(
            ad.l2_normalize_rows(raw_i), ad.l2_normalize_rows(raw_t), 0.3
        )

    def l_cl():
        return al.local_contrastive_loss(views(), texts(), 0.3)

    ad.reset_tape()
    ad.backward(al.total_loss(l_cg(), l_cl(), alpha, beta))
    total_gi, total_gt = raw_i.grad.copy(), raw_t.grad.copy()
    raw_i.grad = raw_t.grad = None

    ad.reset_tape()
    ad.backward(l_cg())
    cg_gi, cg_gt = raw_i.grad.copy(), raw_t.grad.copy()
    raw_i.grad = raw_t.grad = None

    ad.reset_tape()
    ad.backward(l_cl())
    cl_gi, cl_gt = raw_i.grad.copy(), raw_t.grad.copy()
    raw_i.grad = raw_t.grad = None
    ad.reset_tape()

    np.testing.assert_allclose(total_gi, alpha * cg_gi + beta * cl_gi, atol=1e-10)
    np.testing.assert_allclose(total_gt, alpha * cg_gt + beta * cl_gt, atol=1e-10)
