"""Accuracy/latency Pareto analysis: front extraction, CSV io, SVG scatter."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple
from xml.sax.saxutils import escape


class ParetoInputError(ValueError):
    pass


@dataclass(frozen=True)
class ParetoPoint:
    label: str
    error: float
    time_ms: float

    def __post_init__(self):
        for name in ("error", "time_ms"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ParetoInputError(f"{self.label!r}: {name} must be finite and > 0, got {v!r}")


def dominates(p: ParetoPoint, q: ParetoPoint) -> bool:
    return (p.error <= q.error and p.time_ms <= q.time_ms
            and (p.error < q.error or p.time_ms < q.time_ms))


def pareto_front(points: Sequence[ParetoPoint]) -> Tuple[List[ParetoPoint], List[ParetoPoint]]:
    """Split into (front ordered by time, dominated) with one sort and a sweep.

    Points are visited by increasing time; a point is dominated iff some point
    with strictly smaller time has error <= its own, or a point with equal
    time has strictly smaller error. Exact duplicates survive together.
    """
    if not points:
        raise ParetoInputError("no points")
    order = sorted(points, key=lambda p: (p.time_ms, p.error))
    front, dominated = [], []
    best_before = math.inf  # min error among strictly faster points
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and order[j].time_ms == order[i].time_ms:
            j += 1
        group_min = order[i].error
        for p in order[i:j]:
            if p.error >= best_before or p.error > group_min:
                dominated.append(p)
            else:
                front.append(p)
        best_before = min(best_before, group_min)
        i = j
    return front, dominated


def pareto_front_bruteforce(points: Sequence[ParetoPoint]) -> Tuple[List[ParetoPoint], List[ParetoPoint]]:
    front = [p for p in points if not any(dominates(q, p) for q in points)]
    dominated = [p for p in points if any(dominates(q, p) for q in points)]
    return sorted(front, key=lambda p: (p.time_ms, p.error)), dominated


# -- io ------------------------------------------------------------------------------

def read_points_csv(text: str) -> List[ParetoPoint]:
    """Parse ``label,error,time_ms`` rows; an optional header is skipped."""
    points = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip() or row[0].startswith("#"):
            continue
        if lineno == 1 and [c.strip() for c in row] == ["label", "error", "time_ms"]:
            continue
        if len(row) != 3:
            raise ParetoInputError(f"line {lineno}: expected 3 fields, got {len(row)}")
        try:
            points.append(ParetoPoint(row[0].strip(), float(row[1]), float(row[2])))
        except ValueError as exc:
            raise ParetoInputError(f"line {lineno}: {exc}") from None
    if not points:
        raise ParetoInputError("no data rows")
    return points


def write_points_csv(points: Sequence[ParetoPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "error", "time_ms"])
    for p in points:
        w.writerow([p.label, repr(float(p.error)), repr(float(p.time_ms))])
    return buf.getvalue()


def render_svg(points: Sequence[ParetoPoint], front: Sequence[ParetoPoint],
               width: int = 640, height: int = 420, x_label: str = "time per frame (ms)",
               y_label: str = "error") -> str:
    margin = 60
    xs = [p.time_ms for p in points]
    ys = [p.error for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    xr = (x1 - x0) or 1.0
    yr = (y1 - y0) or 1.0

    def sx(v):
        return margin + (v - x0) / xr * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y0) / yr * (height - 2 * margin)

    on_front = {id(p) for p in front}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
           f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 15}" text-anchor="middle" font-size="13">{escape(x_label)}</text>',
           f'<text x="18" y="{height / 2}" text-anchor="middle" font-size="13" '
           f'transform="rotate(-90 18 {height / 2})">{escape(y_label)}</text>']
    if len(front) > 1:
        pts = " ".join(f"{sx(p.time_ms):.2f},{sy(p.error):.2f}" for p in front)
        out.append(f'<polyline class="front" points="{pts}" fill="none" stroke="crimson" stroke-width="2"/>')
    for p in points:
        hit = id(p) in on_front
        cls, fill, r = ("front", "crimson", 6) if hit else ("dominated", "gray", 4)
        out.append(f'<circle class="{cls}" cx="{sx(p.time_ms):.2f}" cy="{sy(p.error):.2f}" r="{r}" fill="{fill}">'
                   f'<title>{escape(p.label)}</title></circle>')
        out.append(f'<text x="{sx(p.time_ms) + 8:.2f}" y="{sy(p.error) - 8:.2f}" font-size="11">{escape(p.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
