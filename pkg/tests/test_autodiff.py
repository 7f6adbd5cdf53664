"""Backward-pass semantics and the finite-difference oracle machinery."""

import numpy as np
import pytest

from dsfusion import tensor as T
from dsfusion.gradcheck import grad_check
from dsfusion.tensor import Tensor, backward, zero_grads


class TestBackwardSemantics:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic_gradient(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_repeated_backward_doubles(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        backward(loss)
        first = x.grad.copy()
        backward(loss)
        np.testing.assert_allclose(x.grad, 2.0 * first)

    def test_grads_accumulate_across_losses(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        backward(T.sum_all(x))
        backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [1.0 + 6.0])

    def test_zero_grads_resets(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        backward(T.sum_all(x))
        zero_grads([x])
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(T.mul(x, x))

    def test_no_grad_leaves_untouched(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=False)
        y = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        backward(T.sum_all(T.mul(x, y)))
        assert x.grad is None
        np.testing.assert_allclose(y.grad, [1.0, 2.0])

    def test_diamond_graph_sums_paths(self):
        # z = sum(x*x + x*x) -> dz/dx = 4x
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        sq = T.mul(x, x)
        backward(T.sum_all(T.add(sq, sq)))
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_branch_without_grad_is_pruned(self):
        x = Tensor(np.array([2.0]), requires_grad=False)
        y = T.mul(x, x)
        assert y._backward is None and y._prev == ()


class TestGradCheckOracle:
    def test_linear_function_has_zero_error(self):
        x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
        report = grad_check(lambda: T.sum_all(T.mul_scalar(x, 3.0)), {"x": x})
        assert report.ok
        assert report.max_rel_error < 1e-8

    def test_constant_function_has_zero_gradient(self):
        x = Tensor(np.ones(4), requires_grad=True)
        c = Tensor(np.ones(()))
        report = grad_check(lambda: T.sum_all(c), {"x": x})
        assert report.ok
        assert report.max_rel_error == 0.0

    def test_flags_a_wrong_gradient(self):
        x = Tensor(np.random.default_rng(1).standard_normal(3) + 2.0, requires_grad=True)

        def f():
            # forward x^2 whose registered backward lies (3x instead of 2x)
            out = T._make(x.data * x.data, (x,), lambda g: (g * 3.0 * x.data,))
            return T.sum_all(out)

        report = grad_check(f, {"x": x})
        assert not report.ok

    def test_report_format_lists_entries(self):
        x = Tensor(np.ones(2), requires_grad=True)
        report = grad_check(lambda: T.sum_all(T.mul(x, x)), {"x": x})
        assert "x" in report.format()
        assert "PASS" in report.format()


class TestDifferentiableOpGradients:
    """Spot FD checks; the full battery lives in dsfusion.checks."""

    def _check(self, f, inputs, tol=1e-4):
        report = grad_check(f, inputs, tol)
        assert report.ok, report.format()

    def test_bilinear_coordinate_gradients(self):
        rng = np.random.default_rng(3)
        feat = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
        coords = Tensor(
            np.stack(
                [
                    rng.integers(0, 4, 10) + rng.uniform(0.15, 0.85, 10),
                    rng.integers(0, 4, 10) + rng.uniform(0.15, 0.85, 10),
                ],
                axis=1,
            ),
            requires_grad=True,
        )
        proj = Tensor(np.random.default_rng(4).standard_normal((2, 10)))
        self._check(
            lambda: T.sum_all(T.mul(T.bilinear_sample(feat, coords), proj)),
            {"feature": feat, "coords": coords},
        )

    def test_softmax_log_softmax_agree(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((3, 6))
        sm = T.softmax_T(Tensor(logits), 3.0).data
        lsm = T.log_softmax_T(Tensor(logits), 3.0).data
        np.testing.assert_allclose(np.log(sm), lsm, atol=1e-9)

    def test_dropout_gradient_uses_mask(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        mask = np.array([[2.0, 0.0, 2.0], [0.0, 2.0, 0.0]])
        out = T.dropout(x, 0.5, training=True, mask=mask)
        backward(T.sum_all(out))
        np.testing.assert_array_equal(x.grad, mask)
