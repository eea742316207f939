"""Vehicle motion: exact discrete bicycle step, continuous derivatives, collisions.

The state lives at the rear-axle midpoint.  All functions here are pure and
array-safe where noted, so the engine can evaluate whole populations at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PolarPose, SkewedPose, wrap_pi

# below this |tan(steer)| the closed-form step switches to its series limit;
# keeps the sigma/tan(delta) terms away from catastrophic cancellation
TAN_EPS = 1e-6


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    v: float


@dataclass(frozen=True)
class ControlInput:
    accel: float
    steer: float


@dataclass(frozen=True)
class VehicleShape:
    length: float = 4.2
    width: float = 1.7

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("vehicle dimensions must be positive")


def step_arrays(x, y, theta, v, accel, steer, dt: float, length):
    """Vectorised exact sampled-data step; returns (x', y', theta', v').

    Acceleration is truncated so the speed never goes negative, and for
    near-zero steering the second-order series of the closed form is used
    (exact to ~1e-13 at the switch, so the branch seam is smooth).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    accel = np.asarray(accel, dtype=float)
    steer = np.asarray(steer, dtype=float)

    f_eff = np.where(v + accel * dt < 0.0, -v / dt, accel)
    v_new = np.maximum(v + f_eff * dt, 0.0)

    t = np.tan(steer)
    adv = v * dt + 0.5 * f_eff * dt * dt          # arc length covered
    dth = t / length * adv
    theta_new = theta + dth

    small = np.abs(t) < TAN_EPS
    t_safe = np.where(small, 1.0, t)
    x_exact = x + length / t_safe * (np.sin(theta_new) - np.sin(theta))
    y_exact = y + length / t_safe * (np.cos(theta) - np.cos(theta_new))
    x_lim = x + adv * np.cos(theta) - t / (2.0 * length) * adv * adv * np.sin(theta)
    y_lim = y + adv * np.sin(theta) + t / (2.0 * length) * adv * adv * np.cos(theta)

    return (np.where(small, x_lim, x_exact),
            np.where(small, y_lim, y_exact),
            theta_new,
            v_new)


def step_exact(state: VehicleState, control: ControlInput, dt: float,
               shape: VehicleShape) -> VehicleState:
    """One exact sampled-data step of the kinematic bicycle model."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x, y, th, v = step_arrays(state.x, state.y, state.theta, state.v,
                              control.accel, control.steer, dt, shape.length)
    return VehicleState(x=float(x), y=float(y), theta=float(th), v=float(v))


def derivatives(pose, control: ControlInput, shape: VehicleShape,
                frame: str = "cartesian"):
    """Continuous-time right-hand sides, used by oracles and analysis.

    frame selects the model: "cartesian" takes a VehicleState, "polar" a
    PolarPose (rejecting r = 0), "skewed" a SkewedPose.
    """
    turn = pose.v * math.tan(control.steer) / shape.length
    if frame == "cartesian":
        return (pose.v * math.cos(pose.theta),
                pose.v * math.sin(pose.theta),
                turn,
                control.accel)
    if frame == "polar":
        if pose.r <= 0.0:
            raise ValueError("polar derivatives need r > 0")
        return (-pose.v * math.sin(pose.s),
                pose.v * math.cos(pose.s) / pose.r,
                turn - pose.v * math.cos(pose.s) / pose.r,
                control.accel)
    if frame == "skewed":
        return (pose.v * math.cos(pose.xi),
                pose.v * math.sin(pose.xi),
                turn,
                control.accel)
    raise ValueError(f"unknown frame {frame!r}")


# ---------------------------------------------------------------------------
# collision detection
# ---------------------------------------------------------------------------

def vehicle_vertices(state: VehicleState, shape: VehicleShape) -> np.ndarray:
    """The four body corners: rear pair at the state point, front pair ahead."""
    c, s = math.cos(state.theta), math.sin(state.theta)
    hw = shape.width / 2.0
    lx, ly = shape.length * c, shape.length * s
    return np.array([
        (state.x + hw * s, state.y - hw * c),
        (state.x - hw * s, state.y + hw * c),
        (state.x + hw * s + lx, state.y - hw * c + ly),
        (state.x - hw * s + lx, state.y + hw * c + ly),
    ])


def no_collision_distance(shape: VehicleShape) -> float:
    """Centre distance above which two equal rectangles cannot touch."""
    return math.sqrt(4.0 * shape.length ** 2 + shape.width ** 2)


def no_collision_sufficient(a: VehicleState, b: VehicleState,
                            shape: VehicleShape) -> bool:
    """Cheap certainly-no-collision test (strict inequality on the threshold)."""
    return math.hypot(a.x - b.x, a.y - b.y) > no_collision_distance(shape)


def _vertices_inside(host: VehicleState, guest: VehicleState,
                     shape: VehicleShape) -> bool:
    """Any corner of guest inside the host rectangle, in the host frame."""
    c, s = math.cos(host.theta), math.sin(host.theta)
    for gx, gy in vehicle_vertices(guest, shape):
        dx, dy = gx - host.x, gy - host.y
        xp = dx * c + dy * s
        yp = dy * c - dx * s
        if 0.0 <= xp <= shape.length and -shape.width / 2.0 <= yp <= shape.width / 2.0:
            return True
    return False


def collides_exact(a: VehicleState, b: VehicleState, shape: VehicleShape) -> bool:
    """Vertex-containment collision test, run in both directions.

    This mirrors the production check: it can miss cross overlaps where the
    rectangles overlap without either containing a corner of the other; the
    audit layer covers that blind spot with a full overlap test.
    """
    return _vertices_inside(a, b, shape) or _vertices_inside(b, a, shape)


def rectangles_overlap(a: VehicleState, b: VehicleState,
                       shape: VehicleShape) -> bool:
    """Exact rectangle intersection via the separating axis theorem."""
    va = vehicle_vertices(a, shape)
    vb = vehicle_vertices(b, shape)
    return _sat_overlap(va, vb)


def overlap_depth(a: VehicleState, b: VehicleState, shape: VehicleShape) -> float:
    """Penetration depth: the smallest translation separating the rectangles."""
    va = vehicle_vertices(a, shape)
    vb = vehicle_vertices(b, shape)
    depth = math.inf
    for rect in (a, b):
        c, s = math.cos(rect.theta), math.sin(rect.theta)
        for ax, ay in ((c, s), (-s, c)):
            pa = va[:, 0] * ax + va[:, 1] * ay
            pb = vb[:, 0] * ax + vb[:, 1] * ay
            gap = min(pa.max(), pb.max()) - max(pa.min(), pb.min())
            if gap <= 0.0:
                return 0.0
            depth = min(depth, gap)
    return depth


def _sat_overlap(va: np.ndarray, vb: np.ndarray) -> bool:
    for verts, other in ((va, vb), (vb, va)):
        edges = np.roll(verts, -1, axis=0) - verts
        for k in range(2):  # two distinct edge directions per rectangle
            ex, ey = edges[k]
            ax, ay = -ey, ex
            pa = verts[:, 0] * ax + verts[:, 1] * ay
            pb = other[:, 0] * ax + other[:, 1] * ay
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
