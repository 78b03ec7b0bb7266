"""Finite-difference validation of analytic gradients.

Central differences (O(h^2) truncation error) against the reverse-mode
gradients of a scalar loss, per parameter element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .optim import Parameter, zero_grads

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    passed: bool = True

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
                f"(tolerance {self.tolerance:.1e})")


def _rel_error(a: float, n: float) -> float:
    denom = max(abs(a), abs(n), 1e-6)
    return abs(a - n) / denom


def grad_check(loss_fn, params: list[Parameter],
               tolerance: float = DEFAULT_TOLERANCE,
               step: float = DEFAULT_STEP) -> GradCheckReport:
    """Compare analytic gradients of loss_fn against central differences.

    loss_fn takes no arguments, reads the given params, and returns a scalar
    Tensor. It must be deterministic; two identical evaluations are compared
    and a mismatch raises.
    """
    def scalar() -> float:
        return float(np.asarray(loss_fn().data).reshape(()))

    base1 = scalar()
    base2 = scalar()
    if base1 != base2:
        raise ValueError("loss_fn is non-deterministic: two identical calls disagree")

    zero_grads(params)
    out = loss_fn()
    out.backward()
    analytic = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    report = GradCheckReport(tolerance=tolerance)
    for p, a_grad in zip(params, analytic):
        worst = 0.0
        flat = p.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = scalar()
            flat[i] = orig - step
            down = scalar()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, _rel_error(float(a_flat[i]), numeric))
        name = p.name or f"param{len(report.per_param)}"
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    report.passed = report.max_rel_error <= tolerance
    zero_grads(params)
    return report
