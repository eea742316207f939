"""Conflict-point prediction and the longitudinal safety acceleration cap.

Each vehicle's short-term motion is classed as circular (stays on its
radius) or skewed (moves along its desired heading); crossings of the
predicted paths, plus the nearest in-corridor leading obstacle, yield a
conflict point whose distance feeds a stabilised braking law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .dynamics import VehicleState
from .geometry import RoundaboutGeometry, wrap_2pi, wrap_pi

CIRCULAR = "circular"
SKEWED = "skewed"

_PARALLEL_EPS = 1e-12

# below this speed an obstacle has no predictable path: it is treated as a
# static obstacle (leading-obstacle logic) rather than a crossing one, which
# also lets mutually stopped vehicles release each other
MOTION_FLOOR = 0.5


@dataclass(frozen=True)
class SafetyParams:
    d0_circular: float = 5.0
    d1_circular: float = 6.0
    d0_straight: float = 10.0
    d1_straight: float = 8.0
    d_s: float = 7.0
    k_s: tuple[float, float] = (20.0, 9.0)
    w_th: float = 2.0
    circular_class_threshold: float = math.radians(10.0)

    def __post_init__(self):
        # double-integrator loop must close with real negative eigenvalues
        k1, k2 = self.k_s
        disc = k2 * k2 - 4.0 * k1
        if not (k1 > 0.0 and k2 > 0.0 and disc >= 0.0):
            raise ValueError("k_s must give real negative closed-loop eigenvalues")

    def threshold(self, v: float, on_branch: bool) -> float:
        """Speed-dependent attention radius (time-gap style)."""
        if on_branch:
            return self.d0_straight + self.d1_straight * v
        return self.d0_circular + self.d1_circular * v

    def eigenvalues(self) -> tuple[float, float]:
        k1, k2 = self.k_s
        sq = math.sqrt(k2 * k2 - 4.0 * k1)
        return (-(k2 + sq) / 2.0, -(k2 - sq) / 2.0)


@dataclass(frozen=True)
class MotionIntent:
    """A vehicle's state plus the heading its guidance currently demands."""

    state: VehicleState
    theta_d: float
    on_branch: bool


@dataclass(frozen=True)
class ConflictPoint:
    position: tuple[float, float]
    source: str
    distance: float


def classify_motion(intent: MotionIntent, params: SafetyParams) -> str:
    """Circular only for small desired deviation on the ring; branches are skewed."""
    if intent.on_branch:
        return SKEWED
    phi = math.atan2(intent.state.y, intent.state.x)
    s_d = wrap_pi(intent.theta_d - (phi + math.pi / 2.0))
    return CIRCULAR if abs(s_d) < params.circular_class_threshold else SKEWED


def _ahead_of(point: tuple, origin: tuple, heading: float) -> bool:
    return (point[0] - origin[0]) * math.cos(heading) \
        + (point[1] - origin[1]) * math.sin(heading) >= 0.0


def _downstream_on_circle(point: tuple, phi_ref: float) -> bool:
    """Within half a lap ahead of phi_ref in the travel direction."""
    return wrap_2pi(math.atan2(point[1], point[0]) - phi_ref) < math.pi


def cross_point_skew_skew(ego: MotionIntent, obstacle: MotionIntent,
                          geometry: RoundaboutGeometry) -> Optional[tuple]:
    """Crossing of the two desired-heading lines, filtered per the discard rules."""
    ai, aj = ego.theta_d, obstacle.theta_d
    den = math.sin(aj - ai)
    if abs(den) < _PARALLEL_EPS:
        return None
    pi = (ego.state.x, ego.state.y)
    pj = (obstacle.state.x, obstacle.state.y)
    t = ((pj[0] - pi[0]) * math.sin(aj) - (pj[1] - pi[1]) * math.cos(aj)) / den
    c = (pi[0] + t * math.cos(ai), pi[1] + t * math.sin(ai))
    if math.hypot(*c) > geometry.r_out + max(b.approach_length for b in geometry.branches):
        return None
    # both positions must be behind the crossing in the ego's desired frame
    if not (_ahead_of(c, pi, ai) and _ahead_of(c, pj, ai)):
        return None
    return c


def _line_circle_roots(p: tuple, heading: float, radius: float) -> list:
    """Intersections of the forward line from p with the origin circle."""
    dx, dy = math.cos(heading), math.sin(heading)
    t0 = -(p[0] * dx + p[1] * dy)
    fx, fy = p[0] + t0 * dx, p[1] + t0 * dy
    h2 = radius * radius - (fx * fx + fy * fy)
    if h2 < 0.0:
        return []
    h = math.sqrt(h2)
    if h == 0.0:
        return [(fx, fy)]
    return [(p[0] + (t0 - h) * dx, p[1] + (t0 - h) * dy),
            (p[0] + (t0 + h) * dx, p[1] + (t0 + h) * dy)]


def cross_point_circ_skew(ego: MotionIntent, obstacle: MotionIntent,
                          geometry: RoundaboutGeometry) -> Optional[tuple]:
    """Ego proceeds on its radius, the obstacle along its desired heading."""
    r_i = math.hypot(ego.state.x, ego.state.y)
    phi_i = math.atan2(ego.state.y, ego.state.x)
    pj = (obstacle.state.x, obstacle.state.y)
    candidates = [
        c for c in _line_circle_roots(pj, obstacle.theta_d, r_i)
        if _downstream_on_circle(c, phi_i) and _ahead_of(c, pj, obstacle.theta_d)
    ]
    if not candidates:
        return None
    return min(candidates,
               key=lambda c: math.hypot(c[0] - ego.state.x, c[1] - ego.state.y))


def cross_point_skew_circ(ego: MotionIntent, obstacle: MotionIntent,
                          geometry: RoundaboutGeometry) -> Optional[tuple]:
    """Ego moves along its desired heading, the obstacle stays on its radius."""
    r_j = math.hypot(obstacle.state.x, obstacle.state.y)
    phi_j = math.atan2(obstacle.state.y, obstacle.state.x)
    pi = (ego.state.x, ego.state.y)
    candidates = [
        c for c in _line_circle_roots(pi, ego.theta_d, r_j)
        if _ahead_of(c, pi, ego.theta_d) and _downstream_on_circle(c, phi_j)
    ]
    if not candidates:
        return None
    return min(candidates,
               key=lambda c: math.hypot(c[0] - ego.state.x, c[1] - ego.state.y))


def closest_leading_obstacle(ego: MotionIntent, ego_class: str,
                             neighbors: Sequence[MotionIntent],
                             params: SafetyParams,
                             vehicle_width: float) -> Optional[ConflictPoint]:
    """Nearest neighbour inside the narrow corridor along the predicted path."""
    band = vehicle_width + params.w_th
    best: Optional[ConflictPoint] = None
    ex, ey = ego.state.x, ego.state.y
    if ego_class == CIRCULAR:
        r_i = math.hypot(ex, ey)
        phi_i = math.atan2(ey, ex)
    else:
        ci, si = math.cos(ego.theta_d), math.sin(ego.theta_d)
    for other in neighbors:
        ox, oy = other.state.x, other.state.y
        if ego_class == CIRCULAR:
            if not (0.0 <= wrap_2pi(math.atan2(oy, ox) - phi_i) < math.pi / 2.0):
                continue
            if abs(math.hypot(ox, oy) - r_i) >= band:
                continue
        else:
            dx, dy = ox - ex, oy - ey
            if dx * ci + dy * si < 0.0:
                continue
            if abs(dy * ci - dx * si) >= band:
                continue
        dist = math.hypot(ox - ex, oy - ey)
        if best is None or dist < best.distance:
            best = ConflictPoint(position=(ox, oy), source="leading-obstacle",
                                 distance=dist)
    return best


_CROSS_SOURCES = {
    (SKEWED, SKEWED): ("skew-skew", cross_point_skew_skew),
    (CIRCULAR, SKEWED): ("circ-skew", cross_point_circ_skew),
    (SKEWED, CIRCULAR): ("skew-circ", cross_point_skew_circ),
}


def conflict_point(ego: MotionIntent, neighbors: Sequence[MotionIntent],
                   params: SafetyParams, geometry: RoundaboutGeometry,
                   vehicle_width: float) -> Optional[ConflictPoint]:
    """Closest predicted conflict among path crossings and the leading obstacle."""
    d_th = params.threshold(ego.state.v, ego.on_branch)
    near = [n for n in neighbors
            if math.hypot(n.state.x - ego.state.x, n.state.y - ego.state.y) < d_th]
    if not near:
        return None
    ego_class = classify_motion(ego, params)
    best = closest_leading_obstacle(ego, ego_class, near, params, vehicle_width)
    for other in near:
        if other.state.v < MOTION_FLOOR:
            continue  # not moving: no predictable path to cross
        key = (ego_class, classify_motion(other, params))
        if key not in _CROSS_SOURCES:
            continue  # two circular motions run in parallel
        source, finder = _CROSS_SOURCES[key]
        c = finder(ego, other, geometry)
        if c is None:
            continue
        dist = math.hypot(c[0] - ego.state.x, c[1] - ego.state.y)
        if best is None or dist < best.distance:
            best = ConflictPoint(position=c, source=source, distance=dist)
    return best


def safety_accel_limit(ego: MotionIntent, neighbors: Sequence[MotionIntent],
                       params: SafetyParams, geometry: RoundaboutGeometry,
                       vehicle_width: float) -> float:
    """Upper acceleration limit keeping the conflict point at the safety distance.

    Returns +inf when nothing within the attention radius can conflict.
    """
    cp = conflict_point(ego, neighbors, params, geometry, vehicle_width)
    if cp is None:
        return math.inf
    k1, k2 = params.k_s
    return k1 * (cp.distance - params.d_s) - k2 * ego.state.v
