"""Nonlinear feedback cruise controller for straight and skewed road sections.

The law tracks a desired speed and heading while repelling from neighbours
through a saturating distance potential; the lateral road-boundary potential
of the original design is dropped here (boundary controllers take that role).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import VehicleState, ControlInput, VehicleShape
from .geometry import wrap_pi

V_FLOOR = 0.1          # lower clamp on speeds appearing in divisions
THETA_MARGIN = 1e-3    # orientation argument is kept this far inside +-Theta


@dataclass(frozen=True)
class StraightParams:
    v_star: float = 12.0
    v_max: float = 25.0
    mu1: float = 0.3
    mu2: float = 0.1
    A: float = 0.5
    Theta: float = math.radians(10.0)
    p: float = 1.5
    gamma1_base: float = 0.02
    gamma1_speed: float = 1.1
    gamma2: float = 4.0
    gamma3: float = 9.0
    eps_f: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.Theta < math.pi / 2.0):
            raise ValueError("Theta must lie in (0, pi/2)")
        if self.p < 1.0:
            raise ValueError("p must be >= 1")
        if self.eps_f <= 0.0:
            raise ValueError("eps_f must be positive")


def straight_entering_params() -> StraightParams:
    return StraightParams(mu1=0.3, mu2=0.1, Theta=math.radians(10.0))


def straight_exiting_params() -> StraightParams:
    return StraightParams(mu1=3.0, mu2=7.0, Theta=math.radians(80.0))


def potential_derivative(d, gamma1, gamma2, gamma3):
    """Slope of the repulsive distance potential; <= 0, vanishing at range."""
    return gamma1 * (1.0 / (1.0 + np.exp(gamma3 - np.asarray(d, dtype=float) / gamma2)) - 1.0)


def smooth_ramp(x, eps: float):
    """C1 one-sided ramp: 0 below -eps, quadratic blend, then linear."""
    x = np.asarray(x, dtype=float)
    quad = (x + eps) ** 2 / (2.0 * eps)
    lin = (eps * eps + 2.0 * eps * x) / (2.0 * eps)
    out = np.where(x <= -eps, 0.0, np.where(x < 0.0, quad, lin))
    return float(out) if out.ndim == 0 else out


def elliptic_distance(a: tuple, b: tuple, p: float) -> float:
    """Elliptic inter-vehicle distance, lateral offsets weighted by p."""
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    return math.sqrt(dx * dx + p * dy * dy)


def front_axle(state: VehicleState, shape: VehicleShape) -> tuple:
    """Aura centre: the front-axle midpoint."""
    return (state.x + shape.length * math.cos(state.theta),
            state.y + shape.length * math.sin(state.theta))


def nlfc_straight(ego: VehicleState, theta_d: float,
                  neighbors: Sequence[tuple[VehicleState, VehicleShape, float]],
                  params: StraightParams, shape: VehicleShape,
                  v_track: Optional[float] = None) -> ControlInput:
    """Raw (accel, steer) command on a road skewed by theta_d.

    Positions are rotated into the desired-heading frame and distances are
    taken between front-axle midpoints.  v_track overrides the tracked speed
    (density adaptation) without touching the structural gains.  Outputs are
    unclamped; limits and boundary/safety caps are applied downstream.
    """
    p = params.p
    v = ego.v
    v_div = max(v, V_FLOOR)
    v_target = params.v_star if v_track is None else v_track

    lim = params.Theta - THETA_MARGIN
    th = min(lim, max(-lim, wrap_pi(ego.theta - theta_d)))
    cos_th, sin_th = math.cos(th), math.sin(th)

    cd, sd = math.cos(theta_d), math.sin(theta_d)
    fx, fy = front_axle(ego, shape)
    ex = fx * cd + fy * sd
    ey = fy * cd - fx * sd

    gamma1 = params.gamma1_base + params.gamma1_speed * v
    vx_sum = 0.0
    vy_sum = 0.0
    for other, other_shape, weight in neighbors:
        ox, oy = front_axle(other, other_shape)
        nx = ox * cd + oy * sd
        ny = oy * cd - ox * sd
        d = math.sqrt((ex - nx) ** 2 + p * (ey - ny) ** 2)
        if d == 0.0:
            continue
        vp = weight * float(potential_derivative(d, gamma1, params.gamma2, params.gamma3))
        vx_sum += vp * (ex - nx) / d
        vy_sum += vp * (ey - ny) / d

    # can cross zero when Theta exceeds acos(v_star/v_max); keep the sign
    margin = params.v_max * cos_th - params.v_star
    if abs(margin) < 1e-9:
        margin = math.copysign(1e-9, margin if margin != 0.0 else 1.0)
    k = params.mu2 + vx_sum / params.v_star \
        + params.v_max * cos_th / (params.v_star * margin) \
        * float(smooth_ramp(-vx_sum, params.eps_f))
    accel = -k / cos_th * (v * cos_th - v_target) - vx_sum / cos_th

    gain = params.v_star + params.A / (v_div * (cos_th - math.cos(params.Theta)))
    u = -(params.mu1 * v * sin_th + p * vy_sum + sin_th * accel) / gain
    steer = math.atan(shape.length * u / v_div)

    return ControlInput(accel=accel, steer=steer)
