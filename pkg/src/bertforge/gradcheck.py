"""Finite-difference verification of analytic gradients.

``grad_check`` perturbs every element of every parameter and compares the
central-difference slope of a scalar loss against the gradient the tape
produced. Run the fragment in f64 (build its parameters with
``dtype=np.float64``) so the difference quotient itself is trustworthy at
the default step size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor

# Relative error uses a floored denominator so near-zero gradient pairs
# are judged on absolute agreement at the same scale.
REL_ERR_FLOOR = 1e-2


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass(frozen=True)
class GradCheckReport:
    tolerance: float
    entries: tuple[GradCheckEntry, ...]

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def failures(self) -> tuple[GradCheckEntry, ...]:
        return tuple(e for e in self.entries if e.max_rel_err > self.tolerance)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [
            f"grad check: {len(self.entries)} parameters, tolerance {self.tolerance:g}"
        ]
        for e in self.entries:
            verdict = "ok" if e.max_rel_err <= self.tolerance else "FAIL"
            lines.append(
                f"  {verdict:4s} {e.name}: max rel err {e.max_rel_err:.3e} "
                f"at {e.worst_index} (analytic {e.analytic:.6e}, numeric {e.numeric:.6e})"
            )
        return "\n".join(lines)


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERR_FLOOR)


def grad_check(
    params: dict[str, Tensor],
    loss_fn: Callable[[], Tensor],
    tolerance: float = 1e-3,
    eps: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic and numeric gradients for every parameter element.

    ``loss_fn`` must close over ``params`` and rebuild the graph on every
    call (finite differencing re-evaluates it 2 x element-count times).
    Failures are report entries, never exceptions.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    entries = []
    for name, p in sorted(params.items()):
        flat = p.data.reshape(-1)
        worst = (0.0, (0,), 0.0, 0.0)
        for i in range(flat.size):
            original = flat[i]
            step = eps * max(1.0, abs(float(original)))
            flat[i] = original + step
            up = float(loss_fn().data)
            flat[i] = original - step
            down = float(loss_fn().data)
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[i])
            err = _rel_err(a, numeric)
            if err > worst[0] or i == 0:
                worst = (err, np.unravel_index(i, p.data.shape), a, numeric)
        if flat.size:
            entries.append(GradCheckEntry(name, worst[0], tuple(worst[1]), worst[2], worst[3]))
    return GradCheckReport(tolerance=tolerance, entries=tuple(entries))
