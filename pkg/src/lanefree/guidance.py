"""Position-dependent desired orientations on the ring and the branches.

Two fields are blended: the shortest-path heading toward the exit point and
the constant deviation that spirals onto the outer radius exactly at the exit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (PolarPose, RoundaboutGeometry, Branch, wrap_pi, wrap_2pi,
                       visibility_threshold, tangent_offset)

ENTERING = "entering"
ROTATING = "rotating"
EXITING = "exiting"


@dataclass(frozen=True)
class GuidanceQuery:
    """One field evaluation: where the vehicle is and which exit it wants."""

    position: PolarPose
    exit_angle: float
    alpha: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")


def shortest_path_deviation(query: GuidanceQuery, geometry: RoundaboutGeometry) -> float:
    """Deviation from the circular angle that starts a shortest path to the exit.

    Visible exit: head straight at the exit point.  Invisible: dive along the
    tangent to the inner circle, or follow the inner boundary once on it.
    """
    r, phi = query.position.r, query.position.phi
    phi_e = query.exit_angle
    dphi = wrap_2pi(phi_e - phi)
    circular = phi + math.pi / 2.0

    if dphi <= visibility_threshold(r, geometry):
        ex = geometry.r_out * math.cos(phi_e) - r * math.cos(phi)
        ey = geometry.r_out * math.sin(phi_e) - r * math.sin(phi)
        if ex == 0.0 and ey == 0.0:
            # query at the exit point itself: keep the circular heading
            return 0.0
        theta_d = math.atan2(ey, ex)
    elif r <= geometry.r_in + 1e-9:
        theta_d = circular
    else:
        touch = phi + tangent_offset(r, geometry)
        tx = geometry.r_in * math.cos(touch) - r * math.cos(phi)
        ty = geometry.r_in * math.sin(touch) - r * math.sin(phi)
        theta_d = math.atan2(ty, tx)

    return wrap_pi(theta_d - circular)


def min_deviation(query: GuidanceQuery, geometry: RoundaboutGeometry) -> float:
    """Constant deviation landing on (r_out, exit_angle): atan(ln(r/R_out)/dphi).

    Negative for r < r_out, so the vehicle drifts outward toward the exit
    radius; zero on the outer boundary.
    """
    r, phi = query.position.r, query.position.phi
    dphi = wrap_2pi(query.exit_angle - phi)
    if dphi == 0.0:
        if r >= geometry.r_out - 1e-12:
            return 0.0
        # unreachable by constant deviation: defer to the shortest-path field
        return shortest_path_deviation(query, geometry)
    return math.atan((math.log(r) - math.log(geometry.r_out)) / dphi)


def blended_deviation(query: GuidanceQuery, geometry: RoundaboutGeometry) -> float:
    """Convex combination of the shortest-path and minimum-deviation fields."""
    a = query.alpha
    return a * shortest_path_deviation(query, geometry) \
        + (1.0 - a) * min_deviation(query, geometry)


def sample_alpha(rng: np.random.Generator, low: float = 0.2, high: float = 0.55) -> float:
    """Per-vehicle blend weight, drawn once at spawn from the seeded stream."""
    return float(rng.uniform(low, high))


def branch_desired_orientation(phase: str, branch: Branch,
                               geometry: RoundaboutGeometry, position,
                               blend_zone: float = 10.0) -> float:
    """Desired heading for a vehicle on a branch.

    Entering traffic tracks the inbound axis, rotating linearly into the ring
    tangent over the last blend_zone metres of the approach; exiting traffic
    tracks the outbound axis.
    """
    if phase == EXITING:
        return wrap_pi(branch.center_angle)
    if phase != ENTERING:
        raise ValueError(f"no branch orientation for phase {phase!r}")
    inbound = wrap_pi(branch.center_angle + math.pi)
    u, _ = geometry.branch_frame(branch, position.x, position.y)
    dist_to_mouth = u - geometry.r_out
    if dist_to_mouth >= blend_zone:
        return inbound
    phi = math.atan2(position.y, position.x)
    tangent = phi + math.pi / 2.0
    frac = min(1.0, max(0.0, (blend_zone - dist_to_mouth) / blend_zone))
    return wrap_pi(inbound + frac * wrap_pi(tangent - inbound))
