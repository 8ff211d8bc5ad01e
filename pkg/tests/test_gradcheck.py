"""The finite-difference checker itself, on models with known gradients."""

import numpy as np

from lwm import tensor as T
from lwm.gradcheck import grad_check
from lwm.tensor import Tensor


def test_linear_model_exact():
    # y = w * x, loss y^2: analytic gradient is exact, error ~ roundoff
    w = Tensor(np.array([[1.5]]), requires_grad=True)
    x = Tensor(np.array([[2.0]]))

    def loss():
        y = T.matmul(x, w)
        return T.sum_all(T.mul(y, y))

    report = grad_check([w], loss, tol=1e-8)
    assert report.passed
    assert report.max_rel_error < 1e-8


def test_zero_tolerance_fails_on_nonlinear_model():
    # documents that a tolerance is necessary: fd error never vanishes exactly
    rng = np.random.default_rng(5)
    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 3)))

    def loss():
        return T.sum_all(T.softmax_rows(T.matmul(x, w)))

    report = grad_check([w], loss, tol=0.0)
    assert not report.passed
    assert report.max_rel_error > 0.0


def test_report_lists_every_parameter():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)

    def loss():
        return T.sum_all(T.add(T.mul(a, a), b))

    report = grad_check([a, b], loss, tol=1e-6, names=["a", "b"])
    assert [name for name, _ in report.per_param] == ["a", "b"]
    assert report.passed
    assert "PASS" in str(report)
