"""Central finite-difference gradient checks on the float64 path."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: Optional[Tuple[int, tuple]] = None
    errors: List[float] = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


class _KinkRecorder:
    """Records ReLU masks of one forward so later forwards can be compared."""

    def __init__(self):
        self.masks: List[np.ndarray] = []

    def __call__(self, mask):
        self.masks.append(mask.copy())


def _eval(f, recorder: _KinkRecorder) -> float:
    recorder.masks = []
    with no_grad():
        return f().item()


def rel_error(a: float, n: float, floor: float = 1e-7) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3,
              samples_per_input: Optional[int] = None, seed: int = 0,
              floor: float = 1e-7) -> GradcheckResult:
    """Compare backward() against central differences for ``f`` wrt ``inputs``.

    ``f`` re-reads the inputs' data each call. Coordinates where a +-h
    perturbation flips any ReLU mask are skipped and another one is drawn.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        x.grad = None
    rec = _KinkRecorder()
    T._relu_hooks.append(rec)
    try:
        rec.masks = []
        out = f()
        base_masks = rec.masks
        out.backward()
        rng = np.random.default_rng(seed)
        worst, errors, checked, skipped = 0.0, [], 0, 0
        worst_at = None
        for k, x in enumerate(inputs):
            analytic = np.zeros(x.shape) if x.grad is None else x.grad
            flat = x.data.reshape(-1)
            n = flat.size
            if samples_per_input is None or samples_per_input >= n:
                candidates = list(range(n))
                want = n
            else:
                candidates = list(rng.permutation(n))
                want = samples_per_input
            done = 0
            for i in candidates:
                if done >= want:
                    break
                orig = flat[i]
                flat[i] = orig + h
                fp = _eval(f, rec)
                kink = _changed(base_masks, rec.masks)
                flat[i] = orig - h
                fm = _eval(f, rec)
                kink = kink or _changed(base_masks, rec.masks)
                flat[i] = orig
                if kink:
                    skipped += 1
                    continue
                num = (fp - fm) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                e = rel_error(a, num, floor)
                errors.append(e)
                if e > worst:
                    worst, worst_at = e, (k, np.unravel_index(i, x.shape))
                checked += 1
                done += 1
    finally:
        T._relu_hooks.remove(rec)
    return GradcheckResult(worst, checked, skipped, worst_at, errors)


def _changed(base: List[np.ndarray], now: List[np.ndarray]) -> bool:
    if len(base) != len(now):
        return True
    return any(not np.array_equal(a, b) for a, b in zip(base, now))
