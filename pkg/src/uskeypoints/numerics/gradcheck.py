"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor, record_branches


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    n_skipped: int = 0

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _eval(fn, guard: bool):
    if not guard:
        return float(fn().data), None
    with record_branches() as log:
        val = float(fn().data)
    return val, log


def check_gradients(fn: Callable[[], Tensor], inputs: Dict[str, Tensor], h: float = 1e-3,
                    max_elements: int = 64, rng: Optional[np.random.Generator] = None,
                    name: str = "", guard_branches: bool = False) -> GradCheckResult:
    """Compare tape gradients of the scalar ``fn()`` with central differences.

    ``inputs`` maps names to leaf tensors (float64 recommended) that ``fn``
    closes over. At most ``max_elements`` entries per input are perturbed,
    chosen at random when the input is larger.

    With ``guard_branches`` an entry whose stencil ``x +/- h`` changes the
    branch of any ReLU or max (so the difference quotient straddles a kink)
    is skipped, counted in ``n_skipped``, and replaced by another entry.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs.values():
        t.grad = None
    with record_branches() as base:
        loss = fn()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in inputs.items()}

    worst, count, skipped = 0.0, 0, 0
    for key, t in inputs.items():
        flat = t.data.reshape(-1)
        order = rng.permutation(flat.size) if flat.size > max_elements else np.arange(flat.size)
        idx, numeric = [], []
        for i in order:
            if len(idx) >= max_elements:
                break
            orig = flat[i]
            flat[i] = orig + h
            fp, lp = _eval(fn, guard_branches)
            flat[i] = orig - h
            fm, lm = _eval(fn, guard_branches)
            flat[i] = orig
            if guard_branches and (lp != base or lm != base):
                skipped += 1
                continue
            idx.append(i)
            numeric.append((fp - fm) / (2 * h))
        if not idx:
            continue
        err = relative_error(analytic[key].reshape(-1)[idx], np.asarray(numeric))
        worst = max(worst, float(err.max(initial=0.0)))
        count += len(idx)
    return GradCheckResult(name, worst, count, skipped)


def projection_loss(outputs: Sequence[Tensor], weights: Sequence[np.ndarray]) -> Tensor:
    """Reduce arbitrary outputs to a scalar with fixed random weights."""
    total = None
    for out, w in zip(outputs, weights):
        term = (out * Tensor(w, dtype=out.dtype)).sum()
        total = term if total is None else total + term
    return total
