"""Depth evaluation metrics: RMSE, REL, log10 and delta thresholds.

Float sums are kept as exact non-overlapping partials (Shewchuk), so merging
accumulators from parallel shards gives the same report in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)
CSV_HEADER = "label,rmse,rel,log10,delta1,delta2,delta3,pixels,cap_m"


class NoValidPixelsError(ValueError):
    pass


class ExactSum:
    """Running float sum stored as exact partials; ``value`` rounds once."""

    __slots__ = ("partials",)

    def __init__(self):
        self.partials: List[float] = []

    def add(self, x: float) -> None:
        partials = []
        for y in self.partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                partials.append(lo)
            x = hi
        partials.append(x)
        self.partials = partials

    def merge(self, other: "ExactSum") -> None:
        for p in other.partials:
            self.add(p)

    @property
    def value(self) -> float:
        return math.fsum(self.partials)


@dataclass
class MetricsReport:
    rmse: float
    rel: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    pixels: int
    cap_m: Optional[float] = None

    def to_csv_row(self, label: str) -> str:
        cap = "" if self.cap_m is None else repr(float(self.cap_m))
        vals = [repr(float(v)) for v in (self.rmse, self.rel, self.log10,
                                          self.delta1, self.delta2, self.delta3)]
        return ",".join([label] + vals + [str(self.pixels), cap])

    @classmethod
    def from_csv_row(cls, row: str):
        parts = row.strip().split(",")
        if len(parts) != 9:
            raise ValueError(f"expected 9 fields, got {len(parts)}")
        label = parts[0]
        nums = [float(v) for v in parts[1:7]]
        cap = float(parts[8]) if parts[8] else None
        return label, cls(*nums, pixels=int(parts[7]), cap_m=cap)


@dataclass
class MetricsAccumulator:
    cap_m: Optional[float] = None
    min_depth_m: float = 1e-3
    rel_denominator: str = "groundtruth"
    sum_sq_err: ExactSum = field(default_factory=ExactSum)
    sum_rel: ExactSum = field(default_factory=ExactSum)
    sum_log10: ExactSum = field(default_factory=ExactSum)
    count: int = 0
    delta_counts: List[int] = field(default_factory=lambda: [0, 0, 0])

    def __post_init__(self):
        if self.rel_denominator not in ("groundtruth", "prediction"):
            raise ValueError("rel_denominator must be 'groundtruth' or 'prediction'")
        if self.min_depth_m <= 0:
            raise ValueError("min_depth_m must be positive")

    def accumulate(self, d, dstar, mask=None) -> None:
        d = np.asarray(getattr(d, "data", d), dtype=np.float64)
        dstar = np.asarray(getattr(dstar, "data", dstar), dtype=np.float64)
        if d.shape != dstar.shape:
            raise ValueError(f"prediction {d.shape} and ground truth {dstar.shape} differ")
        keep = dstar > 0
        if mask is not None:
            keep &= np.asarray(getattr(mask, "data", mask)).astype(bool)
        if self.cap_m is not None:
            keep &= dstar <= self.cap_m
        if not keep.any():
            return
        gt = dstar[keep]
        pred = np.clip(d[keep], self.min_depth_m,
                       np.inf if self.cap_m is None else self.cap_m)
        err = pred - gt
        denom = gt if self.rel_denominator == "groundtruth" else pred
        self.sum_sq_err.add(math.fsum((err * err).tolist()))
        self.sum_rel.add(math.fsum((np.abs(err) / denom).tolist()))
        self.sum_log10.add(math.fsum(np.abs(np.log10(pred) - np.log10(gt)).tolist()))
        ratio = np.maximum(pred / gt, gt / pred)
        for i, t in enumerate(THRESHOLDS):
            self.delta_counts[i] += int(np.count_nonzero(ratio < t))
        self.count += int(gt.size)

    def merge(self, other: "MetricsAccumulator") -> None:
        if (other.cap_m, other.min_depth_m, other.rel_denominator) != \
                (self.cap_m, self.min_depth_m, self.rel_denominator):
            raise ValueError("cannot merge accumulators with different settings")
        self.sum_sq_err.merge(other.sum_sq_err)
        self.sum_rel.merge(other.sum_rel)
        self.sum_log10.merge(other.sum_log10)
        self.count += other.count
        self.delta_counts = [a + b for a, b in zip(self.delta_counts, other.delta_counts)]

    def finalize(self) -> MetricsReport:
        if self.count == 0:
            raise NoValidPixelsError("no valid pixels")
        n = self.count
        return MetricsReport(
            rmse=math.sqrt(self.sum_sq_err.value / n),
            rel=self.sum_rel.value / n,
            log10=self.sum_log10.value / n,
            delta1=self.delta_counts[0] / n,
            delta2=self.delta_counts[1] / n,
            delta3=self.delta_counts[2] / n,
            pixels=n,
            cap_m=self.cap_m,
        )


def log10_err(d: float, dstar: float) -> float:
    return abs(math.log10(d) - math.log10(dstar))


def compute_metrics(d, dstar, mask=None, cap_m=None, **kw) -> MetricsReport:
    acc = MetricsAccumulator(cap_m=cap_m, **kw)
    acc.accumulate(d, dstar, mask)
    return acc.finalize()
