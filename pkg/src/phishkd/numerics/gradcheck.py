"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from phishkd.exceptions import ParameterError
from phishkd.numerics.tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    floor: float = 1e-6,
    max_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` against ``(f(θ+eps) - f(θ-eps)) / 2eps`` elementwise.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    The relative error of one element is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps elements whose true gradient is ~0 from dividing noise by
    noise. ``max_per_param`` subsamples large tensors (seeded).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    analytic = backward(f(), params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0)
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ParameterError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2.0 * eps)
                a = a_flat[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
        report.per_param[name] = worst
        report.checked += len(idx)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
