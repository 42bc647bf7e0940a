"""Central-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tolerance: float
    failures: list[tuple[int, int, float, float]] = field(default_factory=list)
    unresolved: list[tuple[int, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


# (offset, weight) pairs of central first-derivative stencils, keyed by accuracy order
_STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)),
}


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_elems: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    scale_floor: float = 1e-3,
    order: int = 2,
    screen: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` against central differences.

    ``max_elems`` caps the probed coordinates per input (sampled with ``rng``).
    Relative error uses ``max(|analytic|, |numeric|, floor')`` as denominator,
    where ``floor' = max(floor, scale_floor * max|analytic|)`` over all inputs,
    so coordinates whose gradient is orders of magnitude below the largest are judged against rounding noise of the difference quotient
    rather than against themselves.
    ``order=4`` uses the five-point stencil, for compositions whose curvature
    makes the ``O(h^2)`` term of the central difference exceed the tolerance.
    ``screen=True`` also differences at ``step / 2`` and compares only coordinates
    where the two estimates agree within ``tolerance``; the rest (a kink inside
    the stencil, or curvature the step cannot resolve) are listed in
    ``unresolved`` instead of being judged against an unreliable oracle.
    Failures are ``(input_index, flat_index, analytic, numeric)``.
    """
    if step <= 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}, got {order}")
    stencil = _STENCILS[order]
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for x in xs:
        x.requires_grad = True
        x.grad = None
    out = f(*xs)
    backward(out)
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in xs]
    rng = rng or np.random.default_rng(0)

    g_max = max((float(np.max(np.abs(a))) for a in analytic if a.size), default=0.0)
    fl = max(floor, scale_floor * g_max)
    worst = 0.0
    checked = 0
    failures = []
    unresolved = []
    with no_grad():
        for k, x in enumerate(xs):
            flat = x.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elems is not None and flat.size > max_elems:
                idx = rng.choice(flat.size, size=max_elems, replace=False)
            for i in idx:
                num = _difference(f, xs, flat, i, step, stencil)
                if screen:
                    half = _difference(f, xs, flat, i, step / 2, stencil)
                    if _rel_err(num, half, fl) > tolerance:
                        unresolved.append((k, int(i)))
                        continue
                    num = half
                ana = float(analytic[k].reshape(-1)[i])
                err = _rel_err(ana, num, fl)
                worst = max(worst, err)
                checked += 1
                if err > tolerance:
                    failures.append((k, int(i), ana, num))
    return GradCheckReport(worst, checked, tolerance, failures, unresolved)


def _difference(f, xs, flat: np.ndarray, i: int, step: float, stencil) -> float:
    orig = flat[i]
    num = 0.0
    for offset, weight in stencil:
        flat[i] = orig + offset * step
        num += weight * float(f(*xs).data)
    flat[i] = orig
    return num / step
