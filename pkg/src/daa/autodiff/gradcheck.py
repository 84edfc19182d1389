"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tol: float = 1e-4
    valid: bool = True
    reason: str = ""
    skipped: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.valid and self.worst <= self.tol


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    names: Sequence[str] | None = None,
    numeric_f: Callable[[], float] | None = None,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads ``params`` through closure. The
    relative error of an element is ``|tape - fd| / max(|tape|, |fd|, floor)``;
    the report keeps the maximum per parameter. ``f`` is evaluated twice up
    front, and a mismatch marks the report invalid (hidden randomness).

    ``numeric_f`` is differenced instead of ``f`` when the tape gradient is
    not the derivative of the forward value, as upstream of a reversal layer.
    ``max_elements`` checks a random subset of each larger parameter.

    Central differences are no oracle where ``x +- h`` lies on another
    branch of a piecewise op than ``x``. Every evaluation is traced with
    :func:`ops.branch_trace`; elements whose perturbed evaluations change a
    branch are skipped (and, when sampling, replaced by other elements).
    The report is invalid when more than half of all attempted elements
    are skipped.
    """
    numeric_f = numeric_f or (lambda: f().item())
    rng = rng if rng is not None else np.random.default_rng(0)
    names = list(names) if names is not None else [f"p{i}" for i in range(len(params))]
    report = GradCheckReport(tol=tol)

    def traced():
        with ops.branch_trace() as log:
            value = numeric_f()
        return value, log

    for p in params:
        p.grad = None
    with ops.branch_trace() as base_branches:
        loss = f()
    again = f()
    if loss.data.tobytes() != again.data.tobytes():
        report.valid = False
        report.reason = "f is not deterministic for fixed parameters"
        return report
    backward(loss)
    checked_total = 0

    for name, p in zip(names, params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        order = rng.permutation(flat.size) if max_elements is not None else np.arange(flat.size)
        want = flat.size if max_elements is None else min(max_elements, flat.size)
        picks, numeric, skipped = [], [], 0
        for i in order:
            if len(picks) == want:
                break
            orig = flat[i]
            flat[i] = orig + h
            fp, bp = traced()
            flat[i] = orig - h
            fm, bm = traced()
            flat[i] = orig
            if bp != base_branches or bm != base_branches:
                skipped += 1
                continue
            picks.append(i)
            numeric.append((fp - fm) / (2 * h))
        report.skipped[name] = skipped
        checked_total += len(picks)
        picks, numeric = np.asarray(picks, dtype=np.intp), np.asarray(numeric)
        tape = analytic.reshape(-1)[picks]
        denom = np.maximum(np.maximum(np.abs(tape), np.abs(numeric)), floor)
        report.max_rel_error[name] = float((np.abs(tape - numeric) / denom).max(initial=0.0))
    skipped_total = sum(report.skipped.values())
    if skipped_total > checked_total:
        report.valid = False
        report.reason = f"{skipped_total} of {skipped_total + checked_total} elements straddle a kink"
    return report
