"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision

# gradients smaller than this are compared on an absolute scale
REL_FLOOR = 1e-6


@dataclass
class GradCheckEntry:
    input_index: int
    coord: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.rel_error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {len(self.entries)} coords, max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.0e}), {len(self.failures)} failures"
        )


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    wrt: Sequence[Tensor] = (),
) -> GradCheckReport:
    """Compare ``backward`` against central differences for every coordinate.

    ``fn`` maps Tensors built from ``inputs`` to a scalar Tensor and must be
    deterministic. Extra leaf tensors in ``wrt`` (e.g. layer parameters) are
    perturbed in place as well. Runs at 64-bit precision.
    """
    report = GradCheckReport(tolerance=tolerance)
    with precision(np.float64):
        xs = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        extra = list(wrt)
        for t in extra:
            t.data = t.data.astype(np.float64)
        targets = xs + extra
        loss = fn(*xs)
        grads = backward(loss, targets)
        for i, t in enumerate(targets):
            analytic = grads[t]
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                f_plus = float(fn(*xs).data)
                flat[j] = orig - step
                f_minus = float(fn(*xs).data)
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                a = float(analytic.reshape(-1)[j])
                coord = np.unravel_index(j, t.shape)
                report.entries.append(GradCheckEntry(i, tuple(int(c) for c in coord), a, numeric, rel_error(a, numeric)))
    return report
