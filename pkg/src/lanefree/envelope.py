"""Lateral boundary controllers and final control clamping.

Each active boundary contributes a steering limit: the boundary on the
vehicle's left caps steering from above, the one on its right from below
(positive steering turns left).  Riding a bound reproduces the boundary
controller's closed loop, which approaches the boundary asymptotically
without overshoot when the gains place real negative eigenvalues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .dynamics import ControlInput, VehicleShape
from .geometry import PolarPose, SkewedPose

V_FLOOR = 0.1

POLE_PLACEMENT = "pole-placement"
FIXED_GAINS = "fixed-gains"


@dataclass(frozen=True)
class Limits:
    f_min: float = -4.0
    f_max: float = 0.6
    delta_max: float = math.radians(50.0)


@dataclass(frozen=True)
class BoundaryGains:
    """Feedback gains; pole placement recomputes them from the current speed."""

    mode: str = POLE_PLACEMENT
    eigenvalues: tuple[float, float] = (-1.0, -2.0)
    k_straight: tuple[float, float] = (1.5, 1.9)
    k_circular: tuple[float, float] = (-52.0, 46.0)

    def __post_init__(self):
        if self.mode not in (POLE_PLACEMENT, FIXED_GAINS):
            raise ValueError(f"unknown gain mode {self.mode!r}")
        if self.mode == POLE_PLACEMENT:
            l1, l2 = self.eigenvalues
            if not (l1 < 0.0 and l2 < 0.0):
                raise ValueError("pole placement needs real negative eigenvalues")

    def straight_gains(self, v: float) -> tuple[float, float]:
        """Gains for the (lateral offset, heading) subsystem at speed v."""
        if self.mode == FIXED_GAINS:
            return self.k_straight
        l1, l2 = self.eigenvalues
        v = max(v, V_FLOOR)
        return (l1 * l2 / v, -(l1 + l2))

    def circular_gains(self, v: float, r_d: float, sense: int = 1) -> tuple[float, float]:
        """Gains for the (radius, deviation) subsystem about an arc centre."""
        if self.mode == FIXED_GAINS:
            return self.k_circular
        l1, l2 = self.eigenvalues
        v = max(v, V_FLOOR)
        return (sense * (v / (r_d * r_d) - l1 * l2 / v), -(l1 + l2))


@dataclass(frozen=True)
class SteeringBounds:
    lower: float = -math.inf
    upper: float = math.inf

    def tightened(self, lower: float = -math.inf, upper: float = math.inf) -> "SteeringBounds":
        return SteeringBounds(lower=max(self.lower, lower), upper=min(self.upper, upper))


def _u_to_delta(u: float, v: float, shape: VehicleShape) -> float:
    return math.atan(shape.length * u / max(v, V_FLOOR))


def boundary_bound_straight(y: float, theta_rel: float, y_d: float, v: float,
                            gains: BoundaryGains, shape: VehicleShape) -> float:
    """Steering that rides a straight boundary at lateral position y_d."""
    k1, k2 = gains.straight_gains(v)
    u = -k1 * (y - y_d) - k2 * theta_rel
    return _u_to_delta(u, v, shape)


def boundary_bound_circular(pose: PolarPose, r_d: float, v: float,
                            gains: BoundaryGains, shape: VehicleShape,
                            sense: int = 1) -> float:
    """Steering that rides a circular boundary of radius r_d.

    pose must be expressed about the arc's centre with the deviation s taken
    from that frame's circular angle; sense is +1 for counter-clockwise
    travel about the centre, -1 for clockwise.
    """
    if r_d <= 0.0:
        raise ValueError("r_d must be positive")
    k1, k2 = gains.circular_gains(v, r_d, sense)
    u = -(k1 * (pose.r - r_d) + k2 * pose.s) + sense * v / r_d
    return _u_to_delta(u, v, shape)


def boundary_bound_skewed(pose: SkewedPose, y_prime_d: float, v: float,
                          gains: BoundaryGains, shape: VehicleShape) -> float:
    """Steering that rides a skewed straight boundary; same gains as straight."""
    k1, k2 = gains.straight_gains(v)
    u = -k1 * (pose.y_s - y_prime_d) - k2 * pose.xi
    return _u_to_delta(u, v, shape)


def clamp_controls(raw: ControlInput, bounds: SteeringBounds,
                   f_safety_cap: float, limits: Limits) -> ControlInput:
    """Final command: steering boxed by boundary bounds, accel by the safety cap.

    When both boundary controllers squeeze past each other the steering falls
    back to the midpoint of the two bounds (the caller flags the event).
    """
    if bounds.lower > bounds.upper:
        steer = 0.5 * (bounds.lower + bounds.upper)
    else:
        steer = max(bounds.lower, min(bounds.upper, raw.steer))
    steer = max(-limits.delta_max, min(limits.delta_max, steer))
    accel = max(limits.f_min, min(raw.accel, limits.f_max, f_safety_cap))
    return ControlInput(accel=accel, steer=steer)
