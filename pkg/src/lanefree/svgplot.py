"""Deterministic static SVG emission for run outputs.

Hand-rolled markup (no plotting library) so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import math
from typing import Sequence

from .geometry import RoundaboutGeometry


def _fmt(x: float) -> str:
    return f"{x:.3f}"


class SvgCanvas:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.parts: list[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]

    def circle(self, cx, cy, r, stroke="black", fill="none", width=1.0):
        self.parts.append(
            f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r)}" '
            f'stroke="{stroke}" fill="{fill}" stroke-width="{_fmt(width)}"/>')

    def line(self, x1, y1, x2, y2, stroke="black", width=1.0):
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{stroke}" stroke-width="{_fmt(width)}"/>')

    def polyline(self, pts: Sequence[tuple], stroke="blue", width=1.0):
        if len(pts) < 2:
            return
        joined = " ".join(f"{_fmt(px)},{_fmt(py)}" for px, py in pts)
        self.parts.append(
            f'<polyline points="{joined}" fill="none" stroke="{stroke}" '
            f'stroke-width="{_fmt(width)}"/>')

    def dot(self, x, y, r=2.0, fill="blue"):
        self.parts.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" fill="{fill}"/>')

    def text(self, x, y, s, size=12):
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
            f'font-family="monospace">{s}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78")


def _axes(canvas: SvgCanvas, x0, y0, x1, y1):
    canvas.line(x0, y1, x1, y1, stroke="black")
    canvas.line(x0, y0, x0, y1, stroke="black")


def _range_with_margin(values: Sequence[float]) -> tuple[float, float]:
    lo = min(values) if values else 0.0
    hi = max(values) if values else 1.0
    if hi == lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def plot_paths(geometry: RoundaboutGeometry, tracks: dict[int, list[tuple]]) -> str:
    """Trajectories over the annulus and branches; tracks maps id -> [(x, y)]."""
    size = 800
    extent = geometry.r_out + max((b.approach_length for b in geometry.branches),
                                  default=0.0) + 10.0
    scale = size / (2.0 * extent)

    def to_px(x, y):
        return (size / 2.0 + x * scale, size / 2.0 - y * scale)

    c = SvgCanvas(size, size)
    cx, cy = to_px(0.0, 0.0)
    c.circle(cx, cy, geometry.r_out * scale, stroke="#555555")
    c.circle(cx, cy, geometry.r_in * scale, stroke="#555555")
    for b in geometry.branches:
        ca, sa = math.cos(b.center_angle), math.sin(b.center_angle)
        tx, ty = -sa, ca
        u0 = geometry.branch_inner_limit(b)
        u1 = geometry.r_out + b.approach_length
        for side in (-1.0, 1.0):
            hx, hy = side * b.width / 2.0 * tx, side * b.width / 2.0 * ty
            p1 = to_px(u0 * ca + hx, u0 * sa + hy)
            p2 = to_px(u1 * ca + hx, u1 * sa + hy)
            c.line(p1[0], p1[1], p2[0], p2[1], stroke="#999999")
    for idx, (vid, pts) in enumerate(sorted(tracks.items())):
        c.polyline([to_px(px, py) for px, py in pts],
                   stroke=_COLORS[idx % len(_COLORS)])
    return c.render()


def plot_series(series: dict[int, list[tuple]], x_label: str, y_label: str) -> str:
    """Per-id time series: series maps id -> [(t, value)]."""
    w, h = 800, 500
    m = 50
    c = SvgCanvas(w, h)
    all_x = [p[0] for pts in series.values() for p in pts]
    all_y = [p[1] for pts in series.values() for p in pts]
    x_lo, x_hi = _range_with_margin(all_x)
    y_lo, y_hi = _range_with_margin(all_y)

    def to_px(px, py):
        return (m + (px - x_lo) / (x_hi - x_lo) * (w - 2 * m),
                h - m - (py - y_lo) / (y_hi - y_lo) * (h - 2 * m))

    _axes(c, m, m, w - m, h - m)
    c.text(w / 2.0, h - 10, x_label)
    c.text(10, m - 10, y_label)
    for idx, (sid, pts) in enumerate(sorted(series.items())):
        c.polyline([to_px(px, py) for px, py in pts],
                   stroke=_COLORS[idx % len(_COLORS)])
    return c.render()


def plot_scatter(points: Sequence[tuple], x_label: str, y_label: str) -> str:
    """Scatter plot with 5% axis margins around the data."""
    w, h = 600, 600
    m = 50
    c = SvgCanvas(w, h)
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = _range_with_margin(xs)
    y_lo, y_hi = _range_with_margin(ys)

    def to_px(px, py):
        return (m + (px - x_lo) / (x_hi - x_lo) * (w - 2 * m),
                h - m - (py - y_lo) / (y_hi - y_lo) * (h - 2 * m))

    _axes(c, m, m, w - m, h - m)
    c.text(w / 2.0, h - 10, x_label)
    c.text(10, m - 10, y_label)
    for px, py in points:
        x, y = to_px(px, py)
        c.dot(x, y)
    return c.render()
