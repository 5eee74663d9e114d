"""Substrate contract: elementwise/structural ops, softmax family, bilinear
resize/sample, conv, and the finite-difference checker itself.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phraseground import ops
from phraseground.gradcheck import NonFiniteLossError, finite_difference_check
from phraseground.tensor import (
    ContractViolation,
    Parameter,
    Tensor,
    concat,
    clip,
    embedding,
    no_grad,
    sigmoid,
    silu,
    sqrt,
    texp,
    tlog,
)

F64 = np.float64


def _param(rng, shape, name, scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale, name=name, dtype=F64)


# ---------------------------------------------------------------------------
# per-op gradients vs central differences: 20 seeded trials, <=64 entries


OP_CASES = {
    "add": lambda a, b: (a + b * 2.0 - 1.5).sum(),
    "mul_div": lambda a, b: ((a * b) / (sigmoid(b) + 2.0)).sum(),
    "matmul": lambda a, b: (a.reshape((8, 8)) @ b.reshape((8, 8))[:, :4]).sum(),
    "exp_log": lambda a, b: (texp(a * 0.3) + tlog(b * b + 1.0)).sum(),
    "sigmoid_silu": lambda a, b: (sigmoid(a) * silu(b)).sum(),
    "sqrt_clip": lambda a, b: (sqrt(a * a + 1.0) + clip(b, -5.0, 5.0) * b).mean(),
    "reduce": lambda a, b: (a.reshape((4, 16)).sum(axis=1) * b.reshape((4, 16)).mean(axis=0)[:4]).sum(),
    "softmax": lambda a, b: (ops.softmax(a.reshape((8, 8)), axis=1) * b.reshape((8, 8))).sum(),
    "log_softmax": lambda a, b: (ops.log_softmax(a.reshape((8, 8)), axis=0) * b.reshape((8, 8))).mean(),
    "normalize": lambda a, b: (ops.normalize(a.reshape((4, 16)), axes=1) * b.reshape((4, 16))).sum(),
    "transpose_concat": lambda a, b: concat(
        [a.reshape((8, 8)).T, b.reshape((8, 8))], axis=0).sum(axis=0).mean(),
    "getitem": lambda a, b: (a.reshape((8, 8))[np.array([1, 3, 5]), :] * b.reshape((8, 8))[2:5]).sum(),
    "bce": lambda a, b: (ops.bce_with_logits(a, np.linspace(0, 1, 64)) * sigmoid(b)).sum(),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    fn = OP_CASES[name]
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        a = _param(rng, (64,), "a")
        b = _param(rng, (64,), "b")
        rep = finite_difference_check(lambda: fn(a, b), [a, b], epsilon=1e-3)
        assert rep.ok(1e-4), f"{name} trial {trial}: {rep.max_rel_err:.3e}"


def test_conv2d_gradients():
    for trial in range(5):
        rng = np.random.default_rng(trial)
        x = _param(rng, (6, 5, 3), "x", 0.5)
        w = _param(rng, (3, 3, 3, 4), "w", 0.3)
        b = _param(rng, (4,), "b", 0.1)

        def f():
            y = ops.conv2d(x, w, b, stride=2, padding=1)
            return (y * y).sum()

        rep = finite_difference_check(f, [x, w, b], epsilon=1e-3)
        assert rep.ok(1e-4), rep.max_rel_err


def test_bilinear_ops_gradients():
    rng = np.random.default_rng(3)
    feat = _param(rng, (5, 7, 3), "feat")
    pts = Parameter(rng.uniform(0.15, 0.85, (9, 2)), name="pts", dtype=F64)

    def f():
        s = ops.bilinear_sample(feat, pts)
        r = ops.bilinear_resize_hwc(feat, (11, 4))
        m = ops.bilinear_resize_nhw(feat.transpose((2, 0, 1)), (10, 14))
        return (s * s).sum() + r.sum() + (m * m).mean()

    rep = finite_difference_check(f, [feat, pts], epsilon=1e-4)
    assert rep.ok(1e-4), rep.max_rel_err


# ---------------------------------------------------------------------------
# softmax contract


def test_softmax_symmetry_pair():
    y = ops.softmax(Tensor(np.array([0.0, 0.0])), axis=-1)
    np.testing.assert_allclose(y.data, [0.5, 0.5], atol=1e-7)


def test_softmax_stabilized_extreme():
    y = ops.softmax(Tensor(np.array([1000.0, 0.0])), axis=-1)
    assert np.isfinite(y.data).all()
    np.testing.assert_allclose(y.data, [1.0, 0.0], atol=1e-6)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    y = ops.softmax(Tensor(rng.standard_normal((3, 4))), axis=-1)
    np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(3), atol=1e-6)


def test_softmax_axis_out_of_range():
    with pytest.raises(ContractViolation):
        ops.softmax(Tensor(np.zeros((2, 2))), axis=2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8),
       st.floats(-50, 50))
def test_softmax_shift_invariance(values, shift):
    x = np.asarray(values, dtype=np.float64)
    a = ops.softmax(Tensor(x), axis=-1).data
    b = ops.softmax(Tensor(x + shift), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-6)


# ---------------------------------------------------------------------------
# bilinear sampling contract


def test_bilinear_sample_grid_identity():
    rng = np.random.default_rng(1)
    feat = Tensor(rng.standard_normal((4, 5, 2)))
    pts = Tensor(np.array([[2 / 4.0, 1 / 3.0], [0.0, 0.0], [1.0, 1.0]]))
    out = ops.bilinear_sample(feat, pts)
    np.testing.assert_allclose(out.data[0], feat.data[1, 2], atol=1e-6)
    np.testing.assert_allclose(out.data[1], feat.data[0, 0], atol=1e-6)
    np.testing.assert_allclose(out.data[2], feat.data[3, 4], atol=1e-6)


def test_bilinear_sample_constant_field():
    feat = Tensor(np.full((6, 6, 3), 2.5))
    pts = Tensor(np.random.default_rng(0).uniform(-0.5, 1.5, (20, 2)))
    out = ops.bilinear_sample(feat, pts)
    np.testing.assert_allclose(out.data, 2.5, atol=1e-6)


def test_bilinear_sample_midpoint():
    # four cells valued 0, 2, 4, 6: center point interpolates to 3
    feat = Tensor(np.array([[0.0, 2.0], [4.0, 6.0]]).reshape(2, 2, 1))
    out = ops.bilinear_sample(feat, Tensor(np.array([[0.5, 0.5]])))
    np.testing.assert_allclose(out.data, [[3.0]], atol=1e-6)


def test_bilinear_sample_linear_in_feature():
    rng = np.random.default_rng(2)
    base = rng.standard_normal((5, 5, 2))
    pts = Tensor(rng.uniform(0, 1, (11, 2)))
    one = ops.bilinear_sample(Tensor(base), pts).data
    scaled = ops.bilinear_sample(Tensor(3.5 * base), pts).data
    np.testing.assert_allclose(scaled, 3.5 * one, atol=1e-6)


def test_bilinear_resize_matches_constant_and_mean():
    x = Tensor(np.full((4, 4, 1), 1.25))
    y = ops.bilinear_resize_hwc(x, (9, 3))
    np.testing.assert_allclose(y.data, 1.25, atol=1e-6)


# ---------------------------------------------------------------------------
# masked softmax: exact zeros, exact fallback


def test_masked_softmax_exact_zero_and_sums():
    rng = np.random.default_rng(0)
    for trial in range(50):
        x = Tensor(rng.standard_normal((6, 9)) * 5)
        mask = rng.random((6, 9)) > 0.6
        y = ops.masked_softmax(x, mask, axis=-1).data
        rows_with = mask.any(axis=1)
        assert (y[~mask & rows_with[:, None]] == 0.0).all()
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_masked_softmax_all_false_fallback_exact():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 7)))
    mask = np.zeros((4, 7), dtype=bool)
    y = ops.masked_softmax(x, mask, axis=-1).data
    ref = ops.softmax(x, axis=-1).data
    assert (y == ref).all()


def test_masked_softmax_shape_mismatch():
    with pytest.raises(ContractViolation):
        ops.masked_softmax(Tensor(np.zeros((2, 3))), np.ones((3, 2), bool), axis=-1)


# ---------------------------------------------------------------------------
# the checker itself


def test_fd_checker_quadratic():
    theta = Parameter(np.array([1.0, 2.0]), name="theta", dtype=F64)
    rep = finite_difference_check(lambda: (theta * theta).sum(), [theta], epsilon=1e-3)
    assert rep.ok(1e-6)
    theta.grad = None
    loss = (theta * theta).sum()
    loss.backward()
    np.testing.assert_allclose(theta.grad, [2.0, 4.0], atol=1e-6)


def test_fd_checker_softmax_cross_entropy():
    rng = np.random.default_rng(0)
    logits = Parameter(rng.standard_normal(3), name="logits", dtype=F64)
    target = 1

    def f():
        return -ops.log_softmax(logits, axis=-1)[np.array([target])].sum()

    rep = finite_difference_check(f, [logits], epsilon=1e-3)
    assert rep.max_rel_err < 1e-4


def test_fd_checker_frozen_reports_zero():
    theta = Parameter(np.array([1.0, -2.0]), name="theta", dtype=F64)
    free = Parameter(np.array([0.5]), name="free", dtype=F64)
    theta.frozen = True
    rep = finite_difference_check(lambda: (theta * theta).sum() + (free * free).sum(),
                                  [theta, free], epsilon=1e-3)
    frozen_entry = [p for p in rep.params if p.name == "theta"][0]
    assert frozen_entry.frozen and frozen_entry.max_rel_err == 0.0
    assert rep.ok(1e-6)
    theta.frozen = False


def test_fd_checker_nonfinite_diagnostic():
    bad = Parameter(np.array([0.0]), name="bad", dtype=F64)

    def f():
        return tlog(bad)  # log(0) = -inf at the unperturbed point

    with pytest.raises(NonFiniteLossError):
        finite_difference_check(f, [bad], epsilon=1e-3)


# ---------------------------------------------------------------------------
# engine behavior


def test_clip_saturation_zero_gradient():
    p = Parameter(np.array([-2.0, 0.3, 2.0]), name="p", dtype=F64)
    clip(p, -1.0, 1.0).sum().backward()
    np.testing.assert_allclose(p.grad, [0.0, 1.0, 0.0])


def test_no_grad_blocks_graph():
    p = Parameter(np.ones(3), name="p", dtype=F64)
    with no_grad():
        y = (p * 2.0).sum()
    assert y._backward is None and not y.requires_grad


def test_gradient_accumulation_over_reuse():
    p = Parameter(np.array([3.0]), name="p", dtype=F64)
    y = p * 2.0 + p * 5.0
    y.sum().backward()
    np.testing.assert_allclose(p.grad, [7.0])


def test_embedding_scatter_gradient():
    table = Parameter(np.arange(12.0).reshape(4, 3), name="t", dtype=F64)
    out = embedding(table, np.array([1, 1, 3]))
    out.sum().backward()
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_allclose(table.grad, expected)


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((8, 8)) * 50)
    for out in [ops.softmax(x, -1), ops.log_softmax(x, -1), ops.normalize(x, -1),
                sigmoid(x), silu(x)]:
        assert np.isfinite(out.data).all()
