"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, zero_grads

# Elementwise error denominator floor: below it the comparison is effectively
# absolute, so finite-difference roundoff on near-zero gradients cannot
# dominate the reported maximum.
DENOM_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: list = field(default_factory=list)  # (name, worst error)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        lines = [f"grad check: max relative error {self.max_rel_error:.3e} "
                 f"(tol {self.tol:.1e}) -> {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.per_param:
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(params: Sequence[Tensor], loss_fn: Callable[[], Tensor],
               tol: float = 1e-4, step: float = 1e-5,
               names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values and be deterministic across calls (fix any internal seeds).
    Returns the max relative error over every parameter element; the check
    passes iff it is <= ``tol``.
    """
    if names is None:
        names = [f"param[{i}]" for i in range(len(params))]
    zero_grads(params)
    backward(loss_fn())
    analytic = []
    for i, p in enumerate(params):
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())
    zero_grads(params)

    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    for p, ga, name in zip(params, analytic, names):
        flat = p.data.reshape(-1)
        fd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * step)
        ga_flat = ga.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ga_flat), np.abs(fd)), DENOM_FLOOR)
        worst = float(np.max(np.abs(ga_flat - fd) / denom)) if flat.size else 0.0
        report.per_param.append((name, worst))
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
