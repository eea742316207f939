"""Nonlinear feedback cruise controller specialised for circular motion.

Tracks a desired angular (or linear) speed and a desired deviation from the
circular angle, repelling from neighbours through the curved elliptic
distance.  Near neighbours additionally couple through an orientation
viscous term that pulls headings together, which damps crossing conflicts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import ControlInput, VehicleShape
from .geometry import PolarPose, wrap_pi
from .control_straight import smooth_ramp, potential_derivative, V_FLOOR, THETA_MARGIN

# fallbacks for the new-origin construction of the pair transform
PARALLEL_EPS = 1e-12
FAR_CENTER_FACTOR = 10.0
A_DENOM_FLOOR = 1e-6


@dataclass(frozen=True)
class CircularParams:
    omega_star: float = 0.143
    v_star: float = 12.0
    track_linear_speed: bool = False
    v_max: float = 25.0
    mu1: float = 10.0
    mu2: float = 40.0
    A: float = 0.005
    b: float = 1.2
    Theta: float = math.radians(50.0)
    p: float = 3.0
    gamma1_base: float = 0.0004
    gamma1_speed: float = 0.03
    gamma2: float = 6.0
    gamma3: float = 9.0
    eps_f: float = 0.1
    q: float = 0.02
    lambda_visc: float = 25.0
    use_speed_viscous: bool = False

    def __post_init__(self):
        if not (0.0 < self.Theta < math.pi / 2.0):
            raise ValueError("Theta must lie in (0, pi/2)")
        if self.p < 1.0:
            raise ValueError("p must be >= 1")

    def check_feasibility(self, r_in: float, r_out: float) -> list[str]:
        """Load-time conditions; violations are warnings, not errors."""
        issues = []
        if self.b <= 1.0 / (r_in * r_in):
            issues.append(f"b={self.b} must exceed 1/r_in^2={1.0 / r_in ** 2:.6g}")
        if not (0.0 <= self.omega_star <= self.v_max / r_out):
            issues.append(f"omega_star={self.omega_star} outside [0, v_max/r_out]")
        if math.cos(self.Theta) <= r_out * self.omega_star / self.v_max:
            issues.append(
                f"cos(Theta)={math.cos(self.Theta):.4f} <= r_out*omega_star/v_max="
                f"{r_out * self.omega_star / self.v_max:.4f}; orientation barrier "
                "can conflict with angular-speed tracking")
        return issues


def circular_rotating_params() -> CircularParams:
    return CircularParams(gamma2=6.0, mu2=40.0, Theta=math.radians(50.0))


def circular_entering_params() -> CircularParams:
    return CircularParams(gamma2=3.5, mu2=80.0, Theta=math.radians(80.0))


def circular_exiting_params() -> CircularParams:
    return CircularParams(gamma2=3.5, mu2=80.0, Theta=math.radians(80.0))


def polar_elliptic_distance(a: PolarPose, b: PolarPose, p: float) -> float:
    """Curved elliptic distance: radial offsets weighted by p, arcs by radius."""
    d2 = p * (a.r - b.r) ** 2 + 2.0 * a.r * b.r * (1.0 - math.cos(a.phi - b.phi))
    return math.sqrt(max(0.0, d2))


def viscous_kernel(d, q: float, lambda_visc: float):
    """Quadratic coupling weight, active below the lambda_visc range."""
    d = np.asarray(d, dtype=float)
    out = np.where(d < lambda_visc, q * (lambda_visc - d) ** 2, 0.0)
    return float(out) if out.ndim == 0 else out


def _pair_center(xi: float, yi: float, ai: float,
                 xj: float, yj: float, aj: float,
                 far_limit: float) -> Optional[tuple]:
    """Origin of the pair frame: crossing of the two axle perpendiculars.

    Returns None whenever the construction degenerates (parallel lines, a
    crossing beyond far_limit, or one lying between the vehicles), in which
    case the caller centres the frame on the ego vehicle.
    """
    cross = math.sin(aj - ai)
    if abs(cross) < PARALLEL_EPS:
        return None
    # solve P_i + t*u_i = P_j + s*u_j
    dx, dy = xj - xi, yj - yi
    t = (dx * math.sin(aj) - dy * math.cos(aj)) / cross
    cx = xi + t * math.cos(ai)
    cy = yi + t * math.sin(ai)
    if math.hypot(cx - xi, cy - yi) > far_limit:
        return None
    if (xi - cx) * (xj - cx) + (yi - cy) * (yj - cy) < 0.0:
        return None
    return cx, cy


def transformed_distance(ego: PolarPose, s_d: float, other: PolarPose,
                         p: float, r_out: float = 84.0) -> float:
    """Elliptic distance in the pair frame aligned with the ego's desired path.

    Both perpendiculars are tilted by the ego's desired deviation, so each
    vehicle measures others in its own frame; at s_d = 0 the frame is the
    roundabout frame and this reduces to polar_elliptic_distance.
    """
    xi, yi = ego.r * math.cos(ego.phi), ego.r * math.sin(ego.phi)
    xj, yj = other.r * math.cos(other.phi), other.r * math.sin(other.phi)
    center = _pair_center(xi, yi, ego.phi + s_d, xj, yj, other.phi + s_d,
                          FAR_CENTER_FACTOR * r_out)
    if center is None:
        return math.sqrt(p) * math.hypot(xi - xj, yi - yj)
    cx, cy = center
    ax, ay = xi - cx, yi - cy
    bx, by = xj - cx, yj - cy
    r1 = math.hypot(ax, ay)
    r2 = math.hypot(bx, by)
    d2 = p * (r1 - r2) ** 2 + 2.0 * (r1 * r2 - (ax * bx + ay * by))
    return math.sqrt(max(0.0, d2))


def _front_polar(pose: PolarPose, length: float) -> tuple:
    """Front-axle midpoint of a polar pose, as (r, phi) about the origin."""
    theta = pose.phi + math.pi / 2.0 + pose.s
    x = pose.r * math.cos(pose.phi) + length * math.cos(theta)
    y = pose.r * math.sin(pose.phi) + length * math.sin(theta)
    return math.hypot(x, y), math.atan2(y, x)


def nlfc_circular(ego: PolarPose, s_d: float,
                  neighbors: Sequence[tuple[PolarPose, float]],
                  params: CircularParams, shape: VehicleShape,
                  v_track: Optional[float] = None,
                  omega_track: Optional[float] = None,
                  r_out: float = 84.0) -> ControlInput:
    """Raw (accel, steer) command for motion about the roundabout centre.

    neighbors are (pose, weight) pairs.  The deviation argument is s - s_d
    everywhere except the orientation viscous term, which compares actual
    headings.  Distances and their gradient factors are taken between
    front-axle midpoints, distances through the pair-frame transform.
    """
    w_star = params.omega_star
    v = ego.v
    v_div = max(v, V_FLOOR)
    r = ego.r

    lim = params.Theta - THETA_MARGIN
    s_hat = min(lim, max(-lim, wrap_pi(ego.s - s_d)))
    cos_s, sin_s = math.cos(s_hat), math.sin(s_hat)

    rf_i, phf_i = _front_polar(ego, shape.length)
    gamma1 = params.gamma1_base + params.gamma1_speed * v

    lam_sum = 0.0
    phi_sum = 0.0
    m_sum = 0.0
    g_sum = 0.0
    for other, weight in neighbors:
        d = transformed_distance(ego, s_d, other, params.p, r_out)
        if d == 0.0:
            continue
        rf_j, phf_j = _front_polar(other, shape.length)
        vp = weight * float(potential_derivative(d, gamma1, params.gamma2, params.gamma3))
        ddphi = phf_i - phf_j
        lam_sum += (params.p * (rf_i - rf_j) + rf_j * (1.0 - math.cos(ddphi))) * vp / d
        phi_sum += (rf_i / w_star) * vp * rf_j * math.sin(ddphi) / d
        kap = float(viscous_kernel(d, params.q, params.lambda_visc))
        m_sum += kap * (math.sin(other.s) - math.sin(ego.s))
        if params.use_speed_viscous:
            g_sum += kap / w_star * (other.v / other.r * math.cos(other.s)
                                     - v / r * math.cos(ego.s))

    phi_i = phi_sum
    g_i = g_sum if params.use_speed_viscous else 0.0
    m_i = m_sum

    track = (params.v_star if v_track is None else v_track) if params.track_linear_speed \
        else r * (w_star if omega_track is None else omega_track)

    # can cross zero when Theta exceeds acos(r*omega_star/v_max); keep the sign
    margin = params.v_max * cos_s - r * w_star
    if abs(margin) < 1e-9:
        margin = math.copysign(1e-9, margin if margin != 0.0 else 1.0)
    k_i = params.mu2 + phi_i - g_i + float(smooth_ramp(
        -params.v_max * cos_s / margin * (phi_i - g_i), params.eps_f))
    accel = -k_i * (v - track / cos_s) - (phi_i - g_i) * r * w_star / cos_s

    lam_i = (v * cos_s / r - w_star) * v * cos_s / (r * r) - lam_sum
    a = (params.b - 1.0 / (r * r)) * v * v * cos_s + w_star * v / r \
        + params.A / (cos_s - math.cos(params.Theta)) ** 2
    if a <= A_DENOM_FLOOR:
        return ControlInput(accel=accel, steer=math.atan(shape.length / r))

    steer = math.atan(shape.length * cos_s / r
                      - shape.length * (params.mu1 * sin_s
                                        + (params.b * accel * sin_s + lam_i) * v
                                        - m_i) / (v_div * a))
    return ControlInput(accel=accel, steer=steer)
