"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, tuple, float, float] | None = None  # name, index, analytic, numeric
    coords_checked: int = 0
    near_zero: int = 0  # coordinates judged by absolute error (see zero_atol)
    max_abs_near_zero: float = 0.0


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
    names: list[str] | None = None,
    zero_atol: float | None = None,
) -> GradCheckReport:
    """Compare backward() against central differences on sampled coordinates.

    ``loss_fn`` must rebuild the forward pass from the current parameter
    values and be deterministic (no dropout).

    With ``zero_atol`` set, coordinates where both gradients are within
    ``zero_atol`` of 0 are scored by absolute error instead: relative error
    of two roundoff-sized numbers carries no information. They are counted
    in ``near_zero`` and ``max_abs_near_zero``.
    """
    rng = np.random.default_rng(seed)
    params.zero_grad()
    loss_fn().backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    report = GradCheckReport(0.0)
    for name in names or list(params):
        p = params[name]
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = loss_fn().item()
            flat[c] = orig - h
            f_minus = loss_fn().item()
            flat[c] = orig
            num = (f_plus - f_minus) / (2 * h)
            a = float(analytic[name].reshape(-1)[c])
            if zero_atol is not None and abs(a) <= zero_atol and abs(num) <= zero_atol:
                report.near_zero += 1
                report.max_abs_near_zero = max(report.max_abs_near_zero, abs(a - num))
                continue
            err = rel_error(a, num)
            if err > worst:
                worst = err
            if report.worst is None or err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, np.unravel_index(c, p.shape), a, num)
        report.per_param[name] = worst
        report.coords_checked += len(coords)
    return report
