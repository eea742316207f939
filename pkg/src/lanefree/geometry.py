"""Roundabout geometry: branches, coordinate transforms, visibility, OD corridors.

All angles are radians.  The roundabout centre is the coordinate origin and
travel on the ring is counter-clockwise, so angular distances are measured
counter-clockwise and wrapped to [0, 2*pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

TWO_PI = 2.0 * math.pi

VISIBLE = "visible"
INVISIBLE = "invisible"


def wrap_2pi(a):
    """Wrap angle(s) to [0, 2*pi)."""
    return np.mod(a, TWO_PI)


def wrap_pi(a):
    """Wrap angle(s) to (-pi, pi]."""
    if isinstance(a, np.ndarray):
        return math.pi - np.mod(math.pi - a, TWO_PI)
    return math.pi - (math.pi - a) % TWO_PI


@dataclass(frozen=True)
class Branch:
    """One radial street: a straight bidirectional approach meeting the ring."""

    id: int
    center_angle: float
    width: float = 18.0
    approach_length: float = 65.0
    bidirectional: bool = True

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"branch {self.id}: width must be > 0")
        if self.approach_length <= 0:
            raise ValueError(f"branch {self.id}: approach_length must be > 0")


@dataclass(frozen=True)
class RoundaboutGeometry:
    """Annulus (r_in < r < r_out) plus an ordered list of radial branches.

    The entry half of each branch mouth is the counter-clockwise-later half,
    so entering traffic merges tangentially with the rotation.
    """

    r_in: float
    r_out: float
    branches: tuple[Branch, ...]

    def __post_init__(self):
        if not (0.0 < self.r_in < self.r_out):
            raise ValueError("need 0 < r_in < r_out")
        angles = [wrap_2pi(b.center_angle) for b in self.branches]
        if any(b2 <= b1 for b1, b2 in zip(angles, angles[1:])):
            raise ValueError("branch center angles must be strictly increasing in [0, 2pi)")
        # mouths must not overlap
        spans = [(a - self.mouth_half_angle(b), a + self.mouth_half_angle(b))
                 for a, b in zip(angles, self.branches)]
        for (lo1, hi1), (lo2, hi2) in zip(spans, spans[1:] + [(spans[0][0] + TWO_PI, spans[0][1] + TWO_PI)]):
            if hi1 > lo2:
                raise ValueError("branch mouths overlap")

    def mouth_half_angle(self, branch: Branch) -> float:
        """Half the angular extent of a branch mouth on the outer circle."""
        return math.asin(min(1.0, (branch.width / 2.0) / self.r_out))

    def branch_by_id(self, branch_id: int) -> Branch:
        for b in self.branches:
            if b.id == branch_id:
                return b
        raise KeyError(f"no branch with id {branch_id}")

    def entry_mouth(self, branch: Branch) -> tuple[float, float]:
        """Angular interval (lo, hi) of the entry half-mouth at r_out."""
        return branch.center_angle, branch.center_angle + self.mouth_half_angle(branch)

    def exit_mouth(self, branch: Branch) -> tuple[float, float]:
        """Angular interval (lo, hi) of the exit half-mouth at r_out."""
        return branch.center_angle - self.mouth_half_angle(branch), branch.center_angle

    def branch_axis(self, branch: Branch) -> tuple[float, float]:
        """Unit vector pointing outward along the branch axis."""
        return math.cos(branch.center_angle), math.sin(branch.center_angle)

    def branch_frame(self, branch: Branch, x, y) -> tuple:
        """(u, l): axial distance from the centre and signed lateral offset.

        l > 0 is the counter-clockwise-later side (the entry carriageway).
        """
        ca, sa = math.cos(branch.center_angle), math.sin(branch.center_angle)
        u = x * ca + y * sa
        l = -x * sa + y * ca
        return u, l

    def branch_inner_limit(self, branch: Branch) -> float:
        """Axial distance where the branch rectangle begins (covers the mouth sliver)."""
        return self.r_out * math.cos(self.mouth_half_angle(branch))

    def on_branch(self, branch: Branch, x, y, margin: float = 0.0):
        u, l = self.branch_frame(branch, x, y)
        return (u >= self.branch_inner_limit(branch) - margin) \
            & (u <= self.r_out + branch.approach_length + margin) \
            & (np.abs(l) <= branch.width / 2.0 + margin)

    def on_road(self, x, y, margin: float = 0.0):
        """True where (x, y) lies on the annulus or any branch rectangle."""
        r = np.hypot(x, y)
        inside = (r >= self.r_in - margin) & (r <= self.r_out + margin)
        for b in self.branches:
            inside = inside | self.on_branch(b, x, y, margin)
        return inside


def default_geometry() -> RoundaboutGeometry:
    """Case-study layout: 84/46 m annulus, 12 equally spaced 18 m branches."""
    branches = tuple(
        Branch(id=k, center_angle=k * TWO_PI / 12.0, width=18.0, approach_length=65.0)
        for k in range(12)
    )
    return RoundaboutGeometry(r_in=46.0, r_out=84.0, branches=branches)


# ---------------------------------------------------------------------------
# poses and transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolarPose:
    """Vehicle pose in polar coordinates about the roundabout centre.

    s is the deviation of the heading from the circular angle phi + pi/2;
    s = 0 means perfect counter-clockwise rotation, s > 0 drifts inward.
    """

    r: float
    phi: float
    s: float
    v: float


@dataclass(frozen=True)
class SkewedPose:
    """Vehicle pose in coordinates rotated by a path angle theta_prime."""

    x_s: float
    y_s: float
    xi: float
    v: float


def to_polar(state, geometry: RoundaboutGeometry) -> PolarPose:
    """Cartesian pose -> polar pose.  Rejects the degenerate centre point."""
    r = math.hypot(state.x, state.y)
    if r == 0.0:
        raise ValueError("vehicle at the roundabout centre has no polar pose")
    phi = wrap_2pi(math.atan2(state.y, state.x))
    s = wrap_pi(state.theta - (phi + math.pi / 2.0))
    return PolarPose(r=r, phi=float(phi), s=float(s), v=state.v)


def from_polar(pose: PolarPose, geometry: RoundaboutGeometry):
    """Inverse of to_polar."""
    from .dynamics import VehicleState
    x = pose.r * math.cos(pose.phi)
    y = pose.r * math.sin(pose.phi)
    theta = wrap_pi(pose.s + pose.phi + math.pi / 2.0)
    return VehicleState(x=x, y=y, theta=theta, v=pose.v)


def to_skewed(state, theta_prime: float) -> SkewedPose:
    """Rotate into the frame of a skewed path with angle theta_prime."""
    c, s = math.cos(theta_prime), math.sin(theta_prime)
    return SkewedPose(
        x_s=state.x * c + state.y * s,
        y_s=state.y * c - state.x * s,
        xi=wrap_pi(state.theta - theta_prime),
        v=state.v,
    )


def from_skewed(pose: SkewedPose, theta_prime: float):
    """Inverse of to_skewed."""
    from .dynamics import VehicleState
    c, s = math.cos(theta_prime), math.sin(theta_prime)
    return VehicleState(
        x=pose.x_s * c - pose.y_s * s,
        y=pose.x_s * s + pose.y_s * c,
        theta=wrap_pi(pose.xi + theta_prime),
        v=pose.v,
    )


# ---------------------------------------------------------------------------
# visibility
# ---------------------------------------------------------------------------

def visibility_threshold(r: float, geometry: RoundaboutGeometry) -> float:
    """Largest angular distance at radius r from which an exit is still visible."""
    if not (geometry.r_in <= r <= geometry.r_out):
        raise ValueError(f"radius {r} outside the annulus")
    return math.acos(geometry.r_in / r) + math.acos(geometry.r_in / geometry.r_out)


def tangent_offset(r: float, geometry: RoundaboutGeometry) -> float:
    """Angular offset to the inner-circle touch point of the tangent from radius r."""
    if r < geometry.r_in:
        raise ValueError(f"radius {r} smaller than r_in")
    return math.acos(geometry.r_in / r)


def exit_point_angle(branch: Branch, geometry: RoundaboutGeometry) -> float:
    """Angle of the exit point: the left edge of the exit carriageway at r_out."""
    return wrap_2pi(branch.center_angle)


def is_visible(position: PolarPose, exit_branch: Branch, geometry: RoundaboutGeometry) -> bool:
    """True when the exit point can be reached on a straight in-annulus line.

    The visibility boundary itself counts as visible (closed set).
    """
    dphi = wrap_2pi(exit_point_angle(exit_branch, geometry) - position.phi)
    return bool(dphi <= visibility_threshold(position.r, geometry))


# ---------------------------------------------------------------------------
# corridors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Arc:
    """Circular-arc boundary primitive.

    Angles are about `center`, with phi_end >= phi_start (unwrapped CCW span).
    sense is the travel sense of corridor traffic about this centre: +1 CCW.
    """

    center: tuple[float, float]
    radius: float
    phi_start: float
    phi_end: float
    sense: int = 1

    def contains_angle(self, phi: float, margin: float = 0.0) -> bool:
        span = self.phi_end - self.phi_start
        rel = wrap_2pi(phi - self.phi_start)
        return rel <= span + margin or rel >= TWO_PI - margin


@dataclass(frozen=True)
class Segment:
    """Straight boundary primitive, travel direction p0 -> p1."""

    p0: tuple[float, float]
    p1: tuple[float, float]

    @property
    def direction(self) -> float:
        return math.atan2(self.p1[1] - self.p0[1], self.p1[0] - self.p0[0])

    @property
    def length(self) -> float:
        return math.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1])

    def lateral_offset(self) -> float:
        """y' of the segment line in its own skewed frame (Eq.-style rotation)."""
        th = self.direction
        return self.p0[1] * math.cos(th) - self.p0[0] * math.sin(th)

    def along(self, x: float, y: float) -> float:
        """Longitudinal progress of a point along the segment, from p0."""
        th = self.direction
        return (x - self.p0[0]) * math.cos(th) + (y - self.p0[1]) * math.sin(th)


BoundaryPrimitive = Union[Arc, Segment]


@dataclass(frozen=True)
class Corridor:
    """Admissible region for one origin-destination movement.

    The outer boundary is always the r_out arc.  The inner boundary is a
    chord (or a sagged arc when the chord corridor is too narrow) for visible
    ODs and the r_in arc for invisible ODs, which additionally carry an exit
    taper segment guiding traffic out of the ring.
    """

    od: tuple[int, int]
    visibility_class: str
    outer: Arc
    inner: BoundaryPrimitive
    exit_taper: Optional[Segment]
    origin_anchor: float   # angle of the corridor start point at r_out
    dest_anchor: float     # angle of the exit point at r_out
    span: float            # CCW angular extent origin_anchor -> dest_anchor
    phi_b: float           # taper trigger: angular distance from the exit


def _point(r: float, phi: float) -> tuple[float, float]:
    return r * math.cos(phi), r * math.sin(phi)


def chord_mid_width(r_out: float, span: float) -> float:
    """Width of the chord corridor at mid-span (sagitta of the outer arc)."""
    return r_out * (1.0 - math.cos(min(span, math.pi) / 2.0))


def build_corridor(od: tuple[Branch, Branch], geometry: RoundaboutGeometry,
                   min_corridor_width: float = 7.4,
                   phi_b: float = math.radians(30.0)) -> Corridor:
    """Construct the admissible corridor for one OD pair.

    The corridor starts at the far (CCW-earliest) edge of the origin mouth and
    ends at the exit point (left edge of the destination exit carriageway),
    so both half-mouths lie inside the corridor.
    """
    origin, dest = od
    r_out, r_in = geometry.r_out, geometry.r_in
    origin_anchor = wrap_2pi(origin.center_angle - geometry.mouth_half_angle(origin))
    dest_anchor = exit_point_angle(dest, geometry)

    same_branch = origin.id == dest.id
    centre_dphi = wrap_2pi(dest.center_angle - origin.center_angle)
    visible = (not same_branch) and centre_dphi <= visibility_threshold(r_out, geometry)

    if same_branch:
        span = TWO_PI
    else:
        span = wrap_2pi(dest_anchor - origin_anchor)

    outer = Arc(center=(0.0, 0.0), radius=r_out,
                phi_start=origin_anchor, phi_end=origin_anchor + span, sense=1)

    if visible:
        p0 = _point(r_out, origin_anchor)
        p1 = _point(r_out, origin_anchor + span)   # unwrapped end = dest anchor
        width = chord_mid_width(r_out, span)
        if width >= min_corridor_width:
            inner: BoundaryPrimitive = Segment(p0=p0, p1=p1)
        else:
            # sag the inner boundary inward just enough to restore the width
            sag = min_corridor_width - width
            half_chord = r_out * math.sin(span / 2.0)
            radius = (half_chord ** 2 + sag ** 2) / (2.0 * sag)
            mid = wrap_2pi(origin_anchor + span / 2.0)
            centre_dist = r_out * math.cos(span / 2.0) - sag + radius
            center = _point(centre_dist, mid)
            # angular extent of the sagged arc about its own centre
            half_span = math.asin(min(1.0, half_chord / radius))
            back = wrap_2pi(mid + math.pi)         # direction from centre toward the ring
            inner = Arc(center=center, radius=radius,
                        phi_start=back - half_span, phi_end=back + half_span,
                        sense=-1)
        taper = None
    else:
        inner = Arc(center=(0.0, 0.0), radius=r_in,
                    phi_start=origin_anchor, phi_end=origin_anchor + span, sense=1)
        taper = Segment(p0=_point(r_in, dest_anchor - phi_b),
                        p1=_point(r_out, dest_anchor))

    return Corridor(
        od=(origin.id, dest.id),
        visibility_class=VISIBLE if visible else INVISIBLE,
        outer=outer,
        inner=inner,
        exit_taper=taper,
        origin_anchor=float(origin_anchor),
        dest_anchor=float(dest_anchor),
        span=float(span),
        phi_b=phi_b,
    )


def corridor_bounds_at(position, corridor: Corridor,
                       geometry: RoundaboutGeometry) -> tuple[BoundaryPrimitive, Arc]:
    """Active (left, right) boundary primitives at the vehicle's progress.

    The right bound is always the outer arc.  For invisible ODs the left bound
    switches from the inner arc to the exit taper once the vehicle is within
    phi_b of its exit.
    """
    polar = to_polar(position, geometry)
    if corridor.visibility_class == VISIBLE:
        return corridor.inner, corridor.outer
    dphi_exit = wrap_2pi(corridor.dest_anchor - polar.phi)
    if dphi_exit <= corridor.phi_b and corridor.exit_taper is not None:
        return corridor.exit_taper, corridor.outer
    return corridor.inner, corridor.outer


def boundary_excess(primitive: BoundaryPrimitive, x: float, y: float,
                    is_left: bool) -> float:
    """How far a point lies beyond a boundary, on the forbidden side.

    Positive values mean the point is outside the corridor through this
    boundary; 0 means on the admissible side (or out of the primitive's
    longitudinal extent, for segments and off-centre arcs).
    """
    if isinstance(primitive, Segment):
        if not (0.0 <= primitive.along(x, y) <= primitive.length):
            return 0.0
        th = primitive.direction
        yp = y * math.cos(th) - x * math.sin(th)
        excess = yp - primitive.lateral_offset()
        return max(0.0, excess) if is_left else max(0.0, -excess)
    cx, cy = primitive.center
    rc = math.hypot(x - cx, y - cy)
    if (cx, cy) != (0.0, 0.0):
        if not primitive.contains_angle(math.atan2(y - cy, x - cx), margin=0.02):
            return 0.0
        # corridor traffic is on the near side of an off-centre (sagged) arc
        return max(0.0, rc - primitive.radius) if is_left else max(0.0, primitive.radius - rc)
    if is_left:
        return max(0.0, primitive.radius - rc)   # inner arc: violated when r < radius
    return max(0.0, rc - primitive.radius)       # outer arc: violated when r > radius


def corridor_violation(position, corridor: Corridor,
                       geometry: RoundaboutGeometry) -> float:
    """Depth (m) by which a pose lies outside its corridor; 0 when inside."""
    left, right = corridor_bounds_at(position, corridor, geometry)
    return max(boundary_excess(left, position.x, position.y, is_left=True),
               boundary_excess(right, position.x, position.y, is_left=False))
