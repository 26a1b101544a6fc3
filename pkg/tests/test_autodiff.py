"""Tests for the reverse-mode engine, optimizer, and gradient checker."""

import math

import numpy as np
import pytest

from shotrank import autodiff as ad
from shotrank.errors import LogNonPositive, NotScalarLoss, ShapeMismatch


def param(name, arr):
    return ad.Parameter(name, np.asarray(arr, dtype=np.float64))


class TestLinear:
    def test_identity_map(self):
        w = param("w", np.eye(3))
        x = ad.constant(np.arange(6, dtype=np.float64).reshape(2, 3))
        y = ad.linear(x, w)
        np.testing.assert_array_equal(y.value, x.value)

    def test_hand_dot_product(self):
        # [[3, 4]] . [[1, 2]] = 1*3 + 2*4 = 11
        w = param("w", [[1.0, 2.0]])
        x = ad.constant([[3.0, 4.0]])
        np.testing.assert_array_equal(ad.linear(x, w).value, [[11.0]])

    def test_bias_broadcast(self):
        w = param("w", np.zeros((2, 3)))
        b = param("b", [[5.0, -1.0]])
        x = ad.constant(np.ones((4, 3)))
        np.testing.assert_array_equal(ad.linear(x, w, b).value,
                                      np.tile([5.0, -1.0], (4, 1)))

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        w = param("w", rng.standard_normal((3, 4)))
        b = param("b", rng.standard_normal((1, 3)))
        x = rng.standard_normal((5, 4))

        def loss_fn():
            return ad.sum_all(ad.linear(ad.constant(x), w, b))

        report = ad.finite_diff_check(loss_fn, [w, b], h=1e-5, tol=1e-4)
        assert report.passed, report.per_param

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.linear(ad.constant(np.ones((2, 3))), param("w", np.ones((2, 4))))


class TestSoftmax:
    def test_equal_values_give_uniform(self):
        y = ad.softmax_row(ad.constant(np.full((3, 5), 2.0))).value
        np.testing.assert_allclose(y, 1.0 / 5.0)

    def test_closed_form_quarter_three_quarters(self):
        # exp(0) = 1 and exp(ln 3) = 3, so weights are 1/4 and 3/4
        y = ad.softmax_row(ad.constant([[0.0, math.log(3.0)]])).value
        np.testing.assert_allclose(y, [[0.25, 0.75]], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            row = rng.standard_normal((1, 7))
            c = rng.standard_normal()
            a = ad.softmax_row(ad.constant(row)).value
            b = ad.softmax_row(ad.constant(row + c)).value
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one_and_bounded(self):
        rng = np.random.default_rng(2)
        y = ad.softmax_row(ad.constant(rng.standard_normal((20, 9)) * 50)).value
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
        assert (y >= 0).all() and (y <= 1).all()


class TestElementwise:
    def test_relu_and_sigmoid_values(self):
        x = ad.constant([[-2.0, 0.0, 3.0]])
        np.testing.assert_array_equal(ad.relu(x).value, [[0.0, 0.0, 3.0]])
        assert ad.sigmoid(ad.constant([[0.0]])).value[0, 0] == pytest.approx(0.5)

    def test_sigmoid_saturation_is_finite(self):
        y = ad.sigmoid(ad.constant([[1e6, -1e6]], dtype=np.float32)).value
        assert np.isfinite(y).all()
        assert y[0, 0] == pytest.approx(1.0) and y[0, 1] == pytest.approx(0.0)

    def test_concat_doubles_width(self):
        a = ad.constant(np.ones((1, 4)))
        b = ad.constant(np.zeros((1, 4)))
        assert ad.concat_cols(a, b).value.shape == (1, 8)

    def test_log_rejects_nonpositive(self):
        with pytest.raises(LogNonPositive):
            ad.log(ad.constant([[0.0]]))

    def test_max_tie_routes_gradient_to_lowest_index(self):
        x = param("x", [[3.0, 3.0, 1.0]])
        with ad.Tape() as tape:
            tape.backward(ad.sum_all(ad.row_max(x)))
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])


class TestBackward:
    def test_hand_jacobian_for_sum_of_linear(self):
        # d sum(x W^T) / dW has every row equal to the column sums of x
        rng = np.random.default_rng(3)
        w = param("w", rng.standard_normal((3, 4)))
        x = rng.standard_normal((5, 4))
        with ad.Tape() as tape:
            tape.backward(ad.sum_all(ad.linear(ad.constant(x), w)))
        np.testing.assert_allclose(w.grad, np.tile(x.sum(axis=0), (3, 1)), atol=1e-12)

    def test_unreachable_parameter_keeps_zero_grad(self):
        w = param("w", np.ones((2, 2)))
        other = param("other", np.ones((2, 2)))
        with ad.Tape() as tape:
            tape.backward(ad.sum_all(ad.mul(w, w)))
        np.testing.assert_array_equal(other.grad, 0.0)

    def test_two_uses_of_one_parameter_accumulate(self):
        rng = np.random.default_rng(4)
        w = param("w", rng.standard_normal((2, 3)))
        x = rng.standard_normal((4, 3))

        def loss_fn():
            a = ad.linear(ad.constant(x), w)
            b = ad.relu(ad.linear(ad.constant(x * 0.5 + 0.3), w))
            return ad.sum_all(ad.add(a, b))

        report = ad.finite_diff_check(loss_fn, [w], h=1e-5, tol=1e-4)
        assert report.passed, report.per_param

    def test_backward_is_linear(self):
        rng = np.random.default_rng(5)
        w = param("w", rng.standard_normal((3, 3)))
        x = ad.constant(rng.standard_normal((3, 3)))

        def grads_of(a, b):
            ad.zero_grads([w])
            with ad.Tape() as tape:
                l1 = ad.sum_all(ad.mul(ad.linear(x, w), ad.linear(x, w)))
                l2 = ad.sum_all(ad.sigmoid(ad.linear(x, w)))
                combined = ad.add(ad.affine(l1, a), ad.affine(l2, b))
                tape.backward(combined)
            return w.grad.copy()

        g10 = grads_of(1.0, 0.0)
        g01 = grads_of(0.0, 1.0)
        g_mix = grads_of(2.0, -3.0)
        np.testing.assert_allclose(g_mix, 2.0 * g10 - 3.0 * g01, rtol=1e-10)

    def test_not_scalar_loss(self):
        w = param("w", np.ones((2, 2)))
        with ad.Tape() as tape:
            y = ad.relu(w)
            with pytest.raises(NotScalarLoss):
                tape.backward(y)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((8, 8)).astype(np.float32)
        w = param("w", rng.standard_normal((8, 8)))
        w32 = ad.Parameter("w32", w.value.astype(np.float32))
        a = ad.softmax_row(ad.linear(ad.constant(x), w32)).value
        b = ad.softmax_row(ad.linear(ad.constant(x), w32)).value
        assert np.array_equal(a, b)


def _op_cases(rng):
    """(name, param arrays, loss builder) for every differentiable primitive.

    All random coefficients are drawn eagerly so each loss builder is a
    deterministic function of its parameters.
    """
    def pos(shape):
        return rng.uniform(0.2, 1.5, size=shape)

    def signed(shape):
        # keep magnitudes away from relu/abs kinks at the FD step size
        return rng.uniform(0.1, 1.1, size=shape) * rng.choice([-1.0, 1.0], size=shape)

    def weighted(t, coeffs):
        return ad.sum_all(ad.mul(t, ad.constant(coeffs)))

    cases = []
    n, k = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    m = int(rng.integers(1, 5))

    def case(name, spec, build, out_shape):
        coeffs = rng.standard_normal(out_shape)
        cases.append((name, spec, lambda p, b=build, c=coeffs: weighted(b(p), c)))

    case("linear", [("w", signed((m, k))), ("b", signed((1, m))), ("x", signed((n, k)))],
         lambda p: ad.linear(p["x"], p["w"], p["b"]), (n, m))
    case("matmul", [("a", signed((n, k))), ("b", signed((k, m)))],
         lambda p: ad.matmul(p["a"], p["b"]), (n, m))
    case("transpose", [("x", signed((n, k)))],
         lambda p: ad.transpose(p["x"]), (k, n))
    for name, fn in [("add", ad.add), ("sub", ad.sub), ("mul", ad.mul)]:
        case(name, [("a", signed((n, k))), ("b", signed((n, k)))],
             lambda p, fn=fn: fn(p["a"], p["b"]), (n, k))
    case("affine", [("x", signed((n, k)))],
         lambda p: ad.affine(p["x"], 1.7, -0.3), (n, k))
    for name, fn, make in [("relu", ad.relu, signed), ("sigmoid", ad.sigmoid, signed),
                           ("exp", ad.exp, signed), ("log", ad.log, pos),
                           ("absolute", ad.absolute, signed), ("sqrt", ad.sqrt, pos),
                           ("reciprocal", ad.reciprocal, pos),
                           ("softmax_row", ad.softmax_row, signed)]:
        case(name, [("x", make((n, k)))], lambda p, fn=fn: fn(p["x"]), (n, k))
    case("row_mean", [("x", signed((n, k)))], lambda p: ad.row_mean(p["x"]), (n, 1))
    # distinct row values keep the argmax stable under the FD stencil
    spread = np.stack([rng.permutation(np.linspace(0.0, 1.0, k)) for _ in range(n)])
    case("row_max", [("x", spread)], lambda p: ad.row_max(p["x"]), (n, 1))
    case("scale_rows", [("x", signed((n, k))), ("s", signed((n, 1)))],
         lambda p: ad.scale_rows(p["x"], p["s"]), (n, k))
    cases.append(("sum_all", [("x", signed((n, k)))], lambda p: ad.sum_all(p["x"])))
    idx = rng.integers(0, n, size=n + 2)  # duplicates exercise scatter-add
    case("gather_rows", [("x", signed((n, k)))],
         lambda p: ad.gather_rows(p["x"], idx), (len(idx), k))
    cols = rng.permutation(k)[: max(1, k - 1)]
    case("gather_row_cols", [("x", signed((n, k)))],
         lambda p: ad.gather_row_cols(p["x"], n - 1, cols), (1, len(cols)))
    case("slice_rows", [("x", signed((n, k)))],
         lambda p: ad.slice_rows(p["x"], 0, max(1, n - 1)), (max(1, n - 1), k))
    case("vstack", [("a", signed((n, k))), ("b", signed((m, k)))],
         lambda p: ad.vstack([p["a"], p["b"], p["a"]]), (2 * n + m, k))
    case("concat_cols", [("a", signed((n, k))), ("b", signed((n, m)))],
         lambda p: ad.concat_cols(p["a"], p["b"]), (n, k + m))
    return cases


def test_every_primitive_passes_finite_diff_on_random_shapes():
    """Each differentiable op, 20 random shapes, float64, h=1e-5, tol 1e-4."""
    failures = []
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        for name, spec, build in _op_cases(rng):
            params = {pname: param(pname, arr) for pname, arr in spec}
            report = ad.finite_diff_check(lambda: build(params),
                                          list(params.values()), h=1e-5, tol=1e-4)
            if not report.passed:
                failures.append((trial, name, report.max_rel_err))
    assert not failures, failures


class TestFiniteDiffChecker:
    def test_quadratic_gradient(self):
        w = param("w", [[3.0]])
        report = ad.finite_diff_check(lambda: ad.sum_all(ad.mul(w, w)), [w])
        assert report.max_rel_err < 1e-8
        ad.zero_grads([w])
        with ad.Tape() as tape:
            tape.backward(ad.sum_all(ad.mul(w, w)))
        assert w.grad[0, 0] == pytest.approx(6.0, abs=1e-12)

    def test_constant_function(self):
        w = param("w", [[2.0, 5.0]])
        report = ad.finite_diff_check(lambda: ad.sum_all(ad.constant([[1.5]])), [w])
        assert report.max_rel_err == 0.0


class TestAdam:
    def test_zero_grads_leave_parameters_unchanged(self):
        w = param("w", [[1.0, -2.0]])
        state = ad.AdamState([w], lr=0.1)
        before = w.value.copy()
        for _ in range(5):
            state.step([w])
        np.testing.assert_array_equal(w.value, before)

    def test_single_step_closed_form(self):
        # grad 1, t=1: m_hat = 1, v_hat = 1 -> update = -lr / (1 + eps)
        w = param("w", [[0.0]])
        state = ad.AdamState([w], lr=0.001)
        w.grad[0, 0] = 1.0
        state.step([w])
        expected = -0.001 * 1.0 / (math.sqrt(1.0) + 1e-8)
        assert w.value[0, 0] == pytest.approx(expected, abs=1e-15)
        assert w.grad[0, 0] == 0.0  # grads zeroed after the step

    def test_identical_parameters_stay_identical(self):
        a = param("a", [[0.3, -0.7]])
        b = param("b", [[0.3, -0.7]])
        state = ad.AdamState([a, b], lr=0.01)
        rng = np.random.default_rng(7)
        for _ in range(10):
            g = rng.standard_normal((1, 2))
            a.grad[...] = g
            b.grad[...] = g
            state.step([a, b])
        np.testing.assert_array_equal(a.value, b.value)

    def test_state_counter_increments(self):
        w = param("w", [[1.0]])
        state = ad.AdamState([w])
        state.step([w])
        state.step([w])
        assert state.t == 2


def test_clip_grad_norm():
    w = param("w", [[0.0, 0.0]])
    w.grad[...] = [[3.0, 4.0]]
    norm = ad.clip_grad_norm([w], max_norm=1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(w.grad, [[0.6, 0.8]])
