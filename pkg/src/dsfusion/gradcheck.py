"""Finite-difference gradient oracle.

Central differences with per-entry step h = 1e-5 * max(1, |x|).  Run the
function under check in double precision; single precision drowns the
signal in rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, zero_grads

DEFAULT_TOL = 1e-4
_STEP_SCALE = 1e-5


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple
    n_flagged: int

    def ok(self, tol: float) -> bool:
        return self.n_flagged == 0


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(e.ok(self.tol) for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def format(self) -> str:
        lines = []
        for e in self.entries:
            status = "PASS" if e.ok(self.tol) else f"FAIL ({e.n_flagged} entries, worst at {e.worst_index})"
            lines.append(f"{e.name:<28s} max_rel_err={e.max_rel_error:.3e}  {status}")
        return "\n".join(lines)


def _rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(
    f: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    tol: float = DEFAULT_TOL,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and must rebuild its forward pass from the
    current ``data`` of the tensors in ``inputs`` (they are perturbed in
    place and restored).  ``f`` must be deterministic.
    """
    tensors = dict(inputs)
    zero_grads(tensors.values())
    loss = f()
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }
    zero_grads(tensors.values())

    report = GradCheckReport(tol=tol)
    for name, t in tensors.items():
        an = analytic[name]
        worst = 0.0
        worst_idx: tuple = ()
        flagged = 0
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = _STEP_SCALE * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = _rel_error(float(an.reshape(-1)[i]), numeric)
            if rel > worst:
                worst = rel
                worst_idx = np.unravel_index(i, t.data.shape)
            if rel > tol:
                flagged += 1
        report.entries.append(GradCheckEntry(name, worst, worst_idx, flagged))
    return report
