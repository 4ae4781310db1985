"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor, no_tape

log = logging.getLogger(__name__)


class NonDeterministicError(RuntimeError):
    """Two forward passes at identical parameters disagreed."""


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    skipped: int


@dataclass
class GradCheckReport:
    rows: list[ParamCheck] = field(default_factory=list)
    eps: float = 1e-5

    @property
    def worst(self) -> float:
        return max((r.max_rel_error for r in self.rows), default=0.0)

    @property
    def skipped(self) -> int:
        return sum(r.skipped for r in self.rows)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol

    def table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [9])
        lines = [f"{'parameter':<{width}}  {'max_rel_err':>12}  {'checked':>7}  {'skipped':>7}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {r.checked:7d}  {r.skipped:7d}")
        return "\n".join(lines)


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


Objective = Callable[[], "Tensor | tuple[Tensor, Hashable]"]


def _split(result) -> tuple[Tensor, Hashable]:
    if isinstance(result, tuple):
        return result[0], result[1]
    return result, None


def grad_check(fn: Objective, params: Sequence[Parameter], eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn`` rebuilds the computation from the current parameter values and
    returns the scalar loss, optionally paired with a hashable routing key.
    When the key at theta +/- eps differs from the key at theta (e.g. a top-k
    set flipped), that entry is skipped and logged.  ``max_entries`` caps the
    number of probed entries per parameter (sampled with ``rng``).
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check needs double precision, {p.name} is {p.data.dtype}")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss, key = _split(fn())
        tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    with no_tape():
        first = _split(fn())[0].item()
        second = _split(fn())[0].item()
    if first != second or first != loss.item():
        raise NonDeterministicError(f"forward passes disagree: {loss.item()!r}, {first!r}, {second!r}")

    report = GradCheckReport(eps=eps)
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        worst, skipped = 0.0, 0
        ana = analytic[p.name].reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_tape():
                flat[i] = orig + eps
                up, key_up = _split(fn())
                flat[i] = orig - eps
                down, key_down = _split(fn())
            flat[i] = orig
            if key is not None and (key_up != key or key_down != key):
                skipped += 1
                log.info("skip %s[%d]: routing set changed under perturbation", p.name, i)
                continue
            numeric = (up.item() - down.item()) / (2 * eps)
            worst = max(worst, float(relative_error(ana[i], numeric)))
        report.rows.append(ParamCheck(p.name, worst, len(idx) - skipped, skipped))
    return report
