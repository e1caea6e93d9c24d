import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from urbanalign import autodiff as ad


def finite_floats(lo=-10.0, hi=10.0):
    return st.floats(min_value=lo, max_value=hi, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 2))
    out = ad.matmul(ad.constant(np.eye(2)), ad.constant(a))
    np.testing.assert_array_equal(out.values, a)


def test_matmul_hand_case():
    out = ad.matmul(ad.constant([[1.0, 2.0], [3.0, 4.0]]), ad.constant([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.values, [[2.0], [4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(4, 2)))
    report = ad.grad_check(lambda a, b: ad.sum_all(ad.matmul(a, b)), [a, b], step=1e-5)
    assert report.max_rel_error < 1e-5, report


# ---------------------------------------------------------------------------
# softmax_rows
# ---------------------------------------------------------------------------


def test_softmax_symmetric_row():
    out = ad.softmax_rows(ad.constant([[0.0, 0.0]]))
    np.testing.assert_allclose(out.values, [[0.5, 0.5]], atol=1e-15)


def test_softmax_extreme_logits_stable():
    out = ad.softmax_rows(ad.constant([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.values))
    np.testing.assert_allclose(out.values, [[1.0, 0.0]], atol=1e-12)


def test_softmax_gradient():
    rng = np.random.default_rng(7)
    x = ad.parameter(rng.normal(size=(2, 3)))
    w = ad.constant(rng.normal(size=(2, 3)))
    report = ad.grad_check(
        lambda x: ad.sum_all(ad.mul(ad.softmax_rows(x), w)), x
    )
    assert report.passed, report


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4, 5), elements=finite_floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax_rows(ad.constant(x)).values
    np.testing.assert_allclose(out.sum(axis=1), np.ones(4), atol=1e-9)
    assert np.all(out >= 0.0) and np.all(out <= 1.0)


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    x = ad.constant([[3.0, 3.0, 3.0]])
    out = ad.layer_norm(x, ad.constant(np.ones(3)), ad.constant(np.zeros(3)))
    np.testing.assert_allclose(out.values, np.zeros((1, 3)), atol=1e-12)


def test_layer_norm_two_point_row():
    out = ad.layer_norm(
        ad.constant([[1.0, 3.0]]), ad.constant(np.ones(2)), ad.constant(np.zeros(2))
    )
    np.testing.assert_allclose(out.values, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_gradient():
    rng = np.random.default_rng(3)
    x = ad.parameter(rng.normal(size=(4, 6)))
    gain = ad.parameter(rng.normal(size=6))
    bias = ad.parameter(rng.normal(size=6))
    w = ad.constant(rng.normal(size=(4, 6)))
    report = ad.grad_check(
        lambda x, g, b: ad.sum_all(ad.mul(ad.layer_norm(x, g, b), w)),
        [x, gain, bias],
    )
    assert report.passed, report


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------


def _attn_params(rng, d):
    mats = [ad.parameter(rng.normal(size=(d, d)) * 0.5) for _ in range(4)]
    biases = [ad.parameter(rng.normal(size=d) * 0.1) for _ in range(4)]
    wq, wk, wv, wo = mats
    bq, bk, bv, bo = biases
    return wq, bq, wk, bk, wv, bv, wo, bo


def test_attention_single_token_is_value_projection():
    rng = np.random.default_rng(11)
    d = 4
    wq, bq, wk, bk, wv, bv, wo, bo = _attn_params(rng, d)
    x = ad.constant(rng.normal(size=(1, d)))
    out = ad.multi_head_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, num_heads=2)
    expected = (x.values @ wv.values + bv.values) @ wo.values + bo.values
    np.testing.assert_allclose(out.values, expected, atol=1e-12)


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(12)
    d = 6
    wq, bq, wk, bk, wv, bv, wo, bo = _attn_params(rng, d)
    x = rng.normal(size=(3, d))
    perm = x[[1, 0, 2]]
    out = ad.multi_head_attention(
        ad.constant(x), wq, bq, wk, bk, wv, bv, wo, bo, num_heads=3
    )
    out_p = ad.multi_head_attention(
        ad.constant(perm), wq, bq, wk, bk, wv, bv, wo, bo, num_heads=3
    )
    np.testing.assert_allclose(out_p.values, out.values[[1, 0, 2]], atol=1e-12)


def test_attention_head_divisibility_error():
    rng = np.random.default_rng(13)
    wq, bq, wk, bk, wv, bv, wo, bo = _attn_params(rng, 6)
    with pytest.raises(ad.ShapeError, match="divisible"):
        ad.multi_head_attention(
            ad.constant(rng.normal(size=(2, 6))),
            wq, bq, wk, bk, wv, bv, wo, bo,
            num_heads=4,
        )


def test_attention_gradient_two_tokens_two_heads():
    rng = np.random.default_rng(14)
    d = 4
    params = _attn_params(rng, d)
    x = ad.parameter(rng.normal(size=(2, d)))
    w = ad.constant(rng.normal(size=(2, d)))

    def loss(*_):
        out = ad.multi_head_attention(x, *params, num_heads=2)
        return ad.sum_all(ad.mul(out, w))

    report = ad.grad_check(loss, [x, *params], tolerance=1e-4)
    assert report.passed, report


# ---------------------------------------------------------------------------
# aux ops
# ---------------------------------------------------------------------------


def test_l2_normalize_345_triangle():
    out = ad.l2_normalize_rows(ad.constant([[3.0, 4.0]]))
    np.testing.assert_allclose(out.values, [[0.6, 0.8]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=finite_floats(0.1, 10.0)))
def test_l2_normalized_rows_have_unit_norm(x):
    out = ad.l2_normalize_rows(ad.constant(x)).values
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.ones(3), atol=1e-9)


def test_max_axis_selection_and_gradient_routing():
    x = ad.parameter([[1.0, 5.0, 2.0]])
    vals, idx = ad.max_axis_with_indices(x, axis=1)
    assert vals.values.tolist() == [5.0]
    assert idx.tolist() == [1]
    ad.backward(ad.sum_all(vals))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])
    ad.reset_tape()


def test_max_axis_tie_breaks_to_lowest_index():
    x = ad.parameter([[4.0, 4.0, 1.0]])
    vals, idx = ad.max_axis_with_indices(x, axis=1)
    assert idx.tolist() == [0]
    ad.backward(ad.sum_all(vals))
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])
    ad.reset_tape()


def test_gelu_at_origin():
    assert ad.gelu(ad.constant([0.0])).values[0] == 0.0


def test_elementwise_gradients():
    rng = np.random.default_rng(21)
    for fn in (ad.gelu, ad.negate, ad.exp):
        x = ad.parameter(rng.normal(size=(3, 3)))
        report = ad.grad_check(lambda x, fn=fn: ad.sum_all(fn(x)), x)
        assert report.passed, (fn.__name__, report)
    x = ad.parameter(rng.uniform(0.5, 3.0, size=(3, 3)))
    report = ad.grad_check(lambda x: ad.sum_all(ad.log(x)), x)
    assert report.passed, report


def test_structural_op_gradients():
    rng = np.random.default_rng(22)
    x = ad.parameter(rng.normal(size=(4, 3)))
    w = ad.constant(rng.normal(size=(2, 3)))

    def loss(x):
        part = ad.take_rows(x, [1, 3])
        return ad.sum_all(ad.mul(part, w))

    assert ad.grad_check(loss, x).passed

    y = ad.parameter(rng.normal(size=(3, 4)))
    assert ad.grad_check(
        lambda y: ad.mean_all(ad.slice_last_axis(y, 1, 3)), y
    ).passed
    assert ad.grad_check(lambda y: ad.sum_all(ad.sum_rows_exact(y)), y).passed
    assert ad.grad_check(
        lambda y: ad.sum_all(ad.diagonal(ad.matmul(y, ad.transpose(y)))), y
    ).passed


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    ad.reset_tape()


def test_backward_zero_scaled_input_gives_zeros():
    x = ad.parameter(np.ones((2, 2)))
    loss = ad.add(ad.sum_all(ad.scale(x, 0.0)), ad.constant(3.0))
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))
    ad.reset_tape()


def test_backward_rejects_non_scalar_loss():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ad.TapeError, match="scalar"):
        ad.backward(ad.scale(x, 2.0))
    ad.reset_tape()


def test_double_backward_without_reset_is_error():
    x = ad.parameter(np.ones(3))
    loss = ad.sum_all(x)
    ad.backward(loss)
    with pytest.raises(ad.TapeError, match="reset"):
        ad.backward(loss)
    ad.reset_tape()


def test_constant_never_accumulates_gradient():
    c = ad.constant(np.ones(3))
    x = ad.parameter(np.ones(3))
    ad.backward(ad.sum_all(ad.mul(x, c)))
    assert c.grad is None
    assert x.grad is not None
    ad.reset_tape()


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 4))

    def run():
        t = ad.softmax_rows(ad.matmul(ad.constant(x), ad.constant(w)))
        return ad.gelu(t).values

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


def test_gradient_accumulates_across_reuse():
    x = ad.parameter([2.0])
    loss = ad.sum_all(ad.add(ad.scale(x, 1.0), ad.scale(x, 2.0)))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [3.0])
    ad.reset_tape()


# ---------------------------------------------------------------------------
# randomized per-op finite-difference sweep (small version of the
# acceptance suite's 20-seed run)
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_composite_expression_gradients(seed):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(4, 3)))
    gain = ad.parameter(rng.normal(size=3))
    bias = ad.parameter(rng.normal(size=3))

    def loss(*_):
        h = ad.layer_norm(ad.matmul(a, b), gain, bias)
        p = ad.softmax_rows(h)
        m, _ = ad.max_axis_with_indices(ad.gelu(p), axis=1)
        return ad.mean_all(ad.concat_vectors([m, ad.sum_rows_exact(h)]))

    report = ad.grad_check(loss, [a, b, gain, bias])
    assert report.passed, report
