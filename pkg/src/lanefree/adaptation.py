"""Local density measurement and density-adaptive desired speeds.

Density is the covered fraction of a heading-aligned moving rectangle,
computed with exact polygon clipping (vehicles) and exact polygon-disk
areas (road boundary), so partially overlapping vehicles contribute the
true fraction of their footprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import VehicleState, VehicleShape, vehicle_vertices
from .geometry import RoundaboutGeometry, Branch, wrap_2pi


@dataclass(frozen=True)
class DensityParams:
    rect_length: float = 80.0
    rect_width: float = 10.0
    eta: float = 1.0
    sigma_safety: float = 3.5
    w_safety: float = 2.0
    lambda_s: float = 1.3
    lambda_r: float = 0.02
    sector_span: float = math.radians(30.0)

    def __post_init__(self):
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must lie in [0, 1]")

    def rho_max(self, shape: VehicleShape) -> float:
        return max_density(shape, self)


def max_density(shape: VehicleShape, params: DensityParams) -> float:
    """Densest packing fraction given the longitudinal/lateral safety margins."""
    return shape.length * shape.width / (
        (shape.length + params.sigma_safety) * (shape.width + params.w_safety))


# ---------------------------------------------------------------------------
# exact area helpers (convex polygons, CCW vertex order)
# ---------------------------------------------------------------------------

def polygon_area(poly: Sequence[tuple]) -> float:
    s = 0.0
    n = len(poly)
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        s += x1 * y2 - y1 * x2
    return 0.5 * s


def clip_halfplane(poly: list, a: float, b: float, c: float) -> list:
    """Keep the part of a convex polygon with a*x + b*y <= c."""
    out = []
    n = len(poly)
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        in1 = a * x1 + b * y1 <= c
        in2 = a * x2 + b * y2 <= c
        if in1:
            out.append((x1, y1))
        if in1 != in2:
            t = (c - a * x1 - b * y1) / (a * (x2 - x1) + b * (y2 - y1))
            out.append((x1 + t * (x2 - x1), y1 + t * (y2 - y1)))
    return out


def convex_overlap_area(poly1: Sequence[tuple], poly2: Sequence[tuple]) -> float:
    """Area of the intersection of two convex CCW polygons."""
    clipped = list(poly2)
    n = len(poly1)
    for k in range(n):
        if not clipped:
            return 0.0
        x1, y1 = poly1[k]
        x2, y2 = poly1[(k + 1) % n]
        # inside is to the left of the CCW edge
        a, b = y2 - y1, x1 - x2
        c = a * x1 + b * y1
        clipped = clip_halfplane(clipped, a, b, c)
    return abs(polygon_area(clipped)) if len(clipped) >= 3 else 0.0


def _sector_area(ux: float, uy: float, wx: float, wy: float, radius: float) -> float:
    """Signed circular-sector area between two direction vectors."""
    ang = math.atan2(ux * wy - uy * wx, ux * wx + uy * wy)
    return 0.5 * radius * radius * ang


def _tri_disk_area(px: float, py: float, qx: float, qy: float, radius: float) -> float:
    """Signed area of triangle (O, p, q) intersected with the disk |z| <= radius."""
    cross = px * qy - py * qx
    if cross == 0.0:
        return 0.0
    in_p = math.hypot(px, py) <= radius
    in_q = math.hypot(qx, qy) <= radius
    if in_p and in_q:
        return 0.5 * cross

    dx, dy = qx - px, qy - py
    a = dx * dx + dy * dy
    b = 2.0 * (px * dx + py * dy)
    c = px * px + py * py - radius * radius
    disc = b * b - 4.0 * a * c
    if disc > 0.0:
        sq = math.sqrt(disc)
        t1 = (-b - sq) / (2.0 * a)
        t2 = (-b + sq) / (2.0 * a)
    else:
        t1 = t2 = math.nan

    def on_seg(t):
        return not math.isnan(t) and 0.0 < t < 1.0

    if in_p:  # leaves the disk at t2
        if math.isnan(t2):  # q numerically on the boundary
            return 0.5 * cross
        t2 = min(1.0, max(0.0, t2))
        xx, xy = px + t2 * dx, py + t2 * dy
        return 0.5 * (px * xy - py * xx) + _sector_area(xx, xy, qx, qy, radius)
    if in_q:  # enters the disk at t1
        if math.isnan(t1):
            return 0.5 * cross
        t1 = min(1.0, max(0.0, t1))
        xx, xy = px + t1 * dx, py + t1 * dy
        return _sector_area(px, py, xx, xy, radius) + 0.5 * (xx * qy - xy * qx)
    if on_seg(t1) and on_seg(t2):  # dips through the disk
        x1x, x1y = px + t1 * dx, py + t1 * dy
        x2x, x2y = px + t2 * dx, py + t2 * dy
        return (_sector_area(px, py, x1x, x1y, radius)
                + 0.5 * (x1x * x2y - x1y * x2x)
                + _sector_area(x2x, x2y, qx, qy, radius))
    return _sector_area(px, py, qx, qy, radius)


def polygon_disk_area(poly: Sequence[tuple], radius: float) -> float:
    """Area of (convex or star-shaped-about-origin) CCW polygon inside a disk."""
    total = 0.0
    n = len(poly)
    for k in range(n):
        px, py = poly[k]
        qx, qy = poly[(k + 1) % n]
        total += _tri_disk_area(px, py, qx, qy, radius)
    return abs(total)


def _branch_polygon(branch: Branch, geometry: RoundaboutGeometry) -> list:
    ca, sa = math.cos(branch.center_angle), math.sin(branch.center_angle)
    tx, ty = -sa, ca
    u0 = geometry.branch_inner_limit(branch)
    u1 = geometry.r_out + branch.approach_length
    hw = branch.width / 2.0
    return [
        (u0 * ca - hw * tx, u0 * sa - hw * ty),
        (u1 * ca - hw * tx, u1 * sa - hw * ty),
        (u1 * ca + hw * tx, u1 * sa + hw * ty),
        (u0 * ca + hw * tx, u0 * sa + hw * ty),
    ]


def road_overlap_area(poly: Sequence[tuple], geometry: RoundaboutGeometry) -> float:
    """Exact area of a convex polygon lying on the road surface.

    Road = annulus plus branch rectangles; the small branch/annulus overlap
    at each mouth is removed by inclusion-exclusion.
    """
    area = polygon_disk_area(poly, geometry.r_out) - polygon_disk_area(poly, geometry.r_in)
    for branch in geometry.branches:
        bp = _branch_polygon(branch, geometry)
        clipped = list(poly)
        for k in range(len(bp)):
            x1, y1 = bp[k]
            x2, y2 = bp[(k + 1) % len(bp)]
            a, b = y2 - y1, x1 - x2
            clipped = clip_halfplane(clipped, a, b, a * x1 + b * y1)
            if not clipped:
                break
        if len(clipped) >= 3:
            on_branch = abs(polygon_area(clipped))
            area += on_branch - polygon_disk_area(clipped, geometry.r_out)
    return area


# ---------------------------------------------------------------------------
# density measures
# ---------------------------------------------------------------------------

def density_rectangle(ego: VehicleState, shape: VehicleShape,
                      params: DensityParams) -> list:
    """Moving measurement rectangle, split eta*L ahead of the front axle."""
    c, s = math.cos(ego.theta), math.sin(ego.theta)
    fx = ego.x + shape.length * c
    fy = ego.y + shape.length * s
    lo = -(1.0 - params.eta) * params.rect_length
    hi = params.eta * params.rect_length
    hw = params.rect_width / 2.0
    return [
        (fx + lo * c + hw * s, fy + lo * s - hw * c),
        (fx + hi * c + hw * s, fy + hi * s - hw * c),
        (fx + hi * c - hw * s, fy + hi * s + hw * c),
        (fx + lo * c - hw * s, fy + lo * s + hw * c),
    ]


def local_density(ego: VehicleState,
                  neighbors: Sequence[tuple[VehicleState, VehicleShape]],
                  geometry: Optional[RoundaboutGeometry],
                  params: DensityParams,
                  shape: VehicleShape = VehicleShape()) -> float:
    """Fraction of the on-road measurement rectangle covered by other vehicles."""
    rect = density_rectangle(ego, shape, params)
    if geometry is None:
        denom = abs(polygon_area(rect))
    else:
        denom = road_overlap_area(rect, geometry)
    if denom <= 0.0:
        return 0.0

    # quick-reject radius: rectangle circumradius + vehicle circumradius
    cx = sum(p[0] for p in rect) / 4.0
    cy = sum(p[1] for p in rect) / 4.0
    rect_rad = max(math.hypot(p[0] - cx, p[1] - cy) for p in rect)

    covered = 0.0
    for other, other_shape in neighbors:
        reach = rect_rad + math.hypot(other_shape.length, other_shape.width)
        if math.hypot(other.x - cx, other.y - cy) > reach:
            continue
        v = vehicle_vertices(other, other_shape)
        quad = [tuple(v[0]), tuple(v[2]), tuple(v[3]), tuple(v[1])]  # CCW ring
        covered += convex_overlap_area(rect, quad)
    return min(1.0, covered / denom)


def adaptive_speed(rho: float, params: DensityParams, v_star: float,
                   shape: VehicleShape = VehicleShape()) -> float:
    """Triangular-fundamental-diagram desired speed for the measured density."""
    if rho <= 0.0:
        return v_star
    rmax = max_density(shape, params)
    return max(0.0, min(v_star, params.lambda_s * (1.0 / rho - 1.0 / rmax)))


def adaptive_angular_speed(rho: float, params: DensityParams, omega_star: float,
                           shape: VehicleShape = VehicleShape()) -> float:
    if rho <= 0.0:
        return omega_star
    rmax = max_density(shape, params)
    return max(0.0, min(omega_star, params.lambda_r * (1.0 / rho - 1.0 / rmax)))


def entering_speed_cap(rho: float, rho_sec: float, params: DensityParams,
                       policy: str, v_star: float,
                       shape: VehicleShape = VehicleShape()) -> float:
    """Desired speed for entering traffic.

    Under rotating priority the speed additionally shrinks with the density
    of the ring sector ahead of the entrance; entering priority drops that
    term, letting vehicles push in regardless of the ring state.
    """
    base = adaptive_speed(rho, params, v_star, shape)
    if policy == "entering":
        return base
    rmax = max_density(shape, params)
    return max(0.0, min(base, v_star * (1.0 - rho_sec / rmax)))


def sector_density(entrance: Branch,
                   vehicles: Sequence[tuple[VehicleState, VehicleShape]],
                   geometry: RoundaboutGeometry, params: DensityParams) -> float:
    """Area fraction of the ring sector just downstream of an entrance.

    A vehicle counts with its full footprint when its body centre lies in the
    sector; edge effects stay bounded by one vehicle length of arc.
    """
    span = params.sector_span
    sector_area = 0.5 * span * (geometry.r_out ** 2 - geometry.r_in ** 2)
    start = entrance.center_angle
    covered = 0.0
    for state, shape in vehicles:
        cx = state.x + shape.length / 2.0 * math.cos(state.theta)
        cy = state.y + shape.length / 2.0 * math.sin(state.theta)
        r = math.hypot(cx, cy)
        if not (geometry.r_in <= r <= geometry.r_out):
            continue
        if wrap_2pi(math.atan2(cy, cx) - start) < span:
            covered += shape.length * shape.width
    return min(1.0, covered / sector_area)
