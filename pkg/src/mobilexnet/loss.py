"""Masked depth-regression losses: L1, L2, berHu, gradient and hybrid.

All losses average over valid pixels only. ``d`` is a :class:`Tensor`;
``dstar`` and ``mask`` are plain arrays of the same shape (ground truth never
needs a gradient).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, abs_, getitem, mul, square, sub, sum_


LOSS_KINDS = ("l1", "l2", "berhu", "hybrid")


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "hybrid"
    berhu_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if not 0 < self.berhu_fraction <= 1:
            raise ValueError("berhu_fraction must lie in (0, 1]")


def _prep(d: Tensor, dstar, mask):
    dstar = np.asarray(dstar.data if isinstance(dstar, Tensor) else dstar, dtype=d.dtype)
    if dstar.shape != d.shape:
        raise ShapeError("loss", d.shape, dstar.shape)
    if mask is None:
        mask = np.ones(d.shape, dtype=bool)
    else:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
        if mask.shape != d.shape:
            raise ShapeError("loss mask", d.shape, mask.shape)
    return dstar, mask


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("no valid pixels")
    return mul(sum_(mul(values, mask.astype(values.dtype))), 1.0 / n)


def l1(d: Tensor, dstar, mask=None) -> Tensor:
    dstar, mask = _prep(d, dstar, mask)
    return _masked_mean(abs_(sub(d, dstar)), mask)


def l2(d: Tensor, dstar, mask=None) -> Tensor:
    dstar, mask = _prep(d, dstar, mask)
    return _masked_mean(square(sub(d, dstar)), mask)


def berhu(d: Tensor, dstar, mask=None, cfg: Optional[LossConfig] = None,
          threshold: Optional[float] = None) -> Tensor:
    """Reverse Huber loss.

    The threshold is ``berhu_fraction * max|d - d*|`` over valid pixels unless
    given explicitly, and is treated as a constant in backward. A zero
    threshold (perfect batch) reduces to L1.
    """
    cfg = LossConfig("berhu") if cfg is None else cfg
    dstar, mask = _prep(d, dstar, mask)
    if not mask.any():
        raise EmptyMaskError("no valid pixels")
    e = sub(d, dstar)
    a = np.abs(e.data)
    c = float(cfg.berhu_fraction * a[mask].max()) if threshold is None else float(threshold)
    if c <= 0:
        return _masked_mean(abs_(e), mask)
    lin = (a <= c).astype(d.dtype)
    # (e^2 + c^2) / 2c, written so the constant c^2/2c term carries no graph
    quad = mul(square(e), 1.0 / (2 * c)) + c / 2
    per_pixel = mul(abs_(e), lin) + mul(quad, 1 - lin)
    return _masked_mean(per_pixel, mask)


def _diff(t: Tensor, axis: int):
    n = t.shape[axis]
    hi = [slice(None)] * t.ndim
    lo = [slice(None)] * t.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    return getitem(t, tuple(hi)), getitem(t, tuple(lo))


def grad_loss(d: Tensor, dstar, mask=None) -> Tensor:
    """Mean |forward difference of d - d*| along x plus the same along y.

    A difference is valid only when both of its pixels are valid; each
    direction is averaged over its own valid set.
    """
    if d.ndim < 2:
        raise ShapeError("grad_loss", d.shape, ("H", "W"))
    dstar, mask = _prep(d, dstar, mask)
    e = sub(d, dstar)
    total = None
    for axis in (d.ndim - 1, d.ndim - 2):
        if d.shape[axis] < 2:
            continue
        hi, lo = _diff(e, axis)
        mh = [slice(None)] * d.ndim
        ml = [slice(None)] * d.ndim
        mh[axis] = slice(1, None)
        ml[axis] = slice(0, -1)
        valid = mask[tuple(mh)] & mask[tuple(ml)]
        if not valid.any():
            continue
        term = _masked_mean(abs_(sub(hi, lo)), valid)
        total = term if total is None else total + term
    if total is None:
        raise EmptyMaskError("no valid neighbouring pixel pairs")
    return total


def hybrid(d: Tensor, dstar, mask=None) -> Tensor:
    return l1(d, dstar, mask) + grad_loss(d, dstar, mask)


LOSSES = {"l1": l1, "l2": l2, "berhu": berhu, "hybrid": hybrid}


def compute_loss(cfg: LossConfig, d: Tensor, dstar, mask=None) -> Tensor:
    if cfg.kind == "berhu":
        return berhu(d, dstar, mask, cfg)
    return LOSSES[cfg.kind](d, dstar, mask)
