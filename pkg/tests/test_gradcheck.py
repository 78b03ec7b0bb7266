import numpy as np
import pytest

from routedlm.autodiff import Tensor
from routedlm.gradcheck import grad_check
from routedlm.optim import Parameter


def test_linear_function_passes():
    w = Parameter(np.array([1.0]), "w")
    report = grad_check(lambda: (w * 2.0).sum(), [w])
    assert report.passed
    assert report.max_rel_error <= 1e-7


def test_square_at_three():
    w = Parameter(np.array([3.0]), "w")
    report = grad_check(lambda: (w * w).sum(), [w])
    assert report.passed
    # analytic gradient is 2w = 6
    w.grad = None
    out = (w * w).sum()
    out.backward()
    assert abs(w.grad[0] - 6.0) <= 1e-12


def test_scaled_analytic_gradient_fails():
    w = Parameter(np.array([3.0]), "w")

    def rigged():
        # forward value of w^2 but backward claims 1.1 * 2w
        def bwd(g):
            w._accumulate(g * 1.1 * 2.0 * w.data)
        return Tensor(w.data * w.data, _parents=(w,), _backward=bwd).sum()

    report = grad_check(rigged, [w])
    assert not report.passed
    assert report.max_rel_error > 1e-2


def test_non_deterministic_loss_rejected():
    w = Parameter(np.array([1.0]), "w")
    calls = {"n": 0}

    def noisy():
        calls["n"] += 1
        return (w * float(calls["n"])).sum()

    with pytest.raises(ValueError, match="non-deterministic"):
        grad_check(noisy, [w])


def test_report_fields_consistent():
    a = Parameter(np.array([0.3, -0.7]), "a")
    b = Parameter(np.array([[1.0, 2.0]]), "b")
    report = grad_check(lambda: ((a * a).sum() + (b.tanh()).sum()), [a, b])
    assert set(report.per_param) == {"a", "b"}
    assert report.passed == (report.max_rel_error <= report.tolerance)
