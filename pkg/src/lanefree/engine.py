"""Deterministic time-stepped simulation of the full movement strategy.

Per step, every controller reads one frozen snapshot of all vehicle states
and the resulting commands are integrated together, matching the
sampled-data model (constant inputs over a period).  The per-vehicle control
pipeline is evaluated with vectorised numpy over compressed neighbour pairs,
which is what keeps hundreds of concurrent vehicles inside the time budget.

Pipeline per step: spawn -> guidance -> NLFC (straight on branches,
circular on the ring) -> boundary steering bounds -> safety acceleration cap
-> clamping -> exact integration -> phase transitions -> audits -> detectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import adaptation, guidance
from .adaptation import DensityParams
from .control_circular import (CircularParams, circular_entering_params,
                               circular_exiting_params, circular_rotating_params)
from .control_straight import (StraightParams, straight_entering_params,
                               straight_exiting_params, V_FLOOR)
from .dynamics import (VehicleShape, VehicleState, collides_exact,
                       no_collision_distance, overlap_depth, step_arrays)
from .envelope import BoundaryGains, Limits
from .geometry import (Corridor, RoundaboutGeometry, build_corridor,
                       default_geometry, wrap_2pi, wrap_pi, to_polar,
                       visibility_threshold, INVISIBLE, Arc, Segment, TWO_PI)
from .safety import SafetyParams

PHASE_ENTERING = 0
PHASE_ROTATING = 1
PHASE_EXITING = 2
PHASE_DONE = 3

PHASE_NAMES = {PHASE_ENTERING: "entering", PHASE_ROTATING: "rotating",
               PHASE_EXITING: "exiting", PHASE_DONE: "done"}

ROTATING_PRIORITY = "rotating"
ENTERING_PRIORITY = "entering"

# corridor inner-boundary kinds
KIND_RING = 0    # invisible: inner arc plus exit taper
KIND_CHORD = 1
KIND_ARC = 2     # sagged replacement arc


@dataclass(frozen=True)
class Vehicle:
    """Spec-level view of one vehicle; the engine itself stores arrays."""

    id: int
    od: tuple[int, int]
    phase: str
    alpha: float
    state: VehicleState
    shape: VehicleShape
    priority_weight: float = 1.0


@dataclass(frozen=True)
class PresetVehicle:
    origin: int
    dest: int
    spawn_time: float = 0.0
    alpha: Optional[float] = None
    speed: Optional[float] = None


@dataclass(frozen=True)
class Demand:
    """Total inflow profile (veh/h) as piecewise-linear breakpoints."""

    breakpoints: tuple[tuple[float, float], ...] = ((0.0, 0.0),)

    def rate(self, t: float) -> float:
        ts = [p[0] for p in self.breakpoints]
        rs = [p[1] for p in self.breakpoints]
        return float(np.interp(t, ts, rs))


@dataclass(frozen=True)
class Detector:
    id: int
    angle: float


@dataclass(frozen=True)
class MacroSample:
    period: int
    n_on_roundabout: int
    n_exited: int
    mean_speed: float
    mean_flow: float


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    vehicle_a: int
    vehicle_b: int = -1
    value: float = 0.0


@dataclass(frozen=True)
class Scenario:
    geometry: RoundaboutGeometry = field(default_factory=default_geometry)
    shape: VehicleShape = field(default_factory=VehicleShape)
    limits: Limits = field(default_factory=Limits)
    straight_entering: StraightParams = field(default_factory=straight_entering_params)
    straight_exiting: StraightParams = field(default_factory=straight_exiting_params)
    circular_entering: CircularParams = field(default_factory=circular_entering_params)
    circular_rotating: CircularParams = field(default_factory=circular_rotating_params)
    circular_exiting: CircularParams = field(default_factory=circular_exiting_params)
    gains: BoundaryGains = field(default_factory=BoundaryGains)
    safety: SafetyParams = field(default_factory=SafetyParams)
    density: DensityParams = field(default_factory=DensityParams)
    policy: str = ROTATING_PRIORITY
    entering_weight: float = 3.0
    demand: Demand = field(default_factory=Demand)
    preset_vehicles: tuple[PresetVehicle, ...] = ()
    seed: int = 1
    dt: float = 0.1
    duration: float = 600.0
    detector_period: float = 60.0
    alpha_range: tuple[float, float] = (0.2, 0.55)
    phi_b: float = math.radians(30.0)
    min_corridor_width: float = 7.4
    neighbor_cutoff: float = 30.0
    activation_band: float = 3.0
    merge_blend_zone: float = 10.0
    density_refresh: float = 0.5
    violation_tolerance: float = 0.2
    trajectory_sample: float = 1.0
    # rotating priority holds entering traffic on the branch while the ring
    # sector ahead of the entrance is above this density (hysteresis 80%);
    # the full-width sector average reads well below stream density, so the
    # gate value is far under the nominal jam density
    merge_gate_density: float = 0.03

    def validate(self) -> list[str]:
        """Hard invariants raise; returns soft warnings."""
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        rem = self.duration % self.dt
        if self.duration < 0.0 or (rem > 1e-9 and abs(rem - self.dt) > 1e-9):
            raise ValueError("duration must be a multiple of dt")
        if self.policy not in (ROTATING_PRIORITY, ENTERING_PRIORITY):
            raise ValueError(f"unknown policy {self.policy!r}")
        warnings = []
        for name, p in (("circular_entering", self.circular_entering),
                        ("circular_rotating", self.circular_rotating),
                        ("circular_exiting", self.circular_exiting)):
            for issue in p.check_feasibility(self.geometry.r_in, self.geometry.r_out):
                if issue.startswith("b="):
                    raise ValueError(f"{name}: {issue}")
                warnings.append(f"{name}: {issue}")
        return warnings


def phase_transition(vehicle: Vehicle, geometry: RoundaboutGeometry,
                     phi_b: float = math.radians(30.0)) -> str:
    """Next phase for one vehicle, per the lifecycle rules."""
    state = vehicle.state
    r = math.hypot(state.x, state.y)
    if vehicle.phase == "entering":
        return "rotating" if r <= geometry.r_out else "entering"
    if vehicle.phase == "rotating":
        dest = geometry.branch_by_id(vehicle.od[1])
        polar = to_polar(state, geometry)
        dphi = wrap_2pi(dest.center_angle - polar.phi)
        if dphi <= min(phi_b, visibility_threshold(
                min(max(polar.r, geometry.r_in), geometry.r_out), geometry)):
            return "exiting"
        return "rotating"
    if vehicle.phase == "exiting":
        dest = geometry.branch_by_id(vehicle.od[1])
        u, _ = geometry.branch_frame(dest, state.x, state.y)
        if u >= geometry.r_out + dest.approach_length:
            return "done"
        return "exiting"
    return "done"


class World:
    """Mutable simulation state: struct-of-arrays plus queues and logs."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.warnings = scenario.validate()
        geo = scenario.geometry
        self.geometry = geo
        self.nb = len(geo.branches)
        self.rng = np.random.default_rng(scenario.seed)
        self.dt = scenario.dt
        self.step_index = 0
        self.next_id = 0

        # --- static tables -------------------------------------------------
        self.branch_angle = np.array([b.center_angle for b in geo.branches])
        self.branch_width = np.array([b.width for b in geo.branches])
        self.branch_len = np.array([b.approach_length for b in geo.branches])
        self.mouth_half = np.array([geo.mouth_half_angle(b) for b in geo.branches])
        self.axis_c = np.cos(self.branch_angle)
        self.axis_s = np.sin(self.branch_angle)

        self.corridors: dict[tuple[int, int], Corridor] = {}
        n_od = self.nb * self.nb
        self.cor_kind = np.zeros(n_od, dtype=np.int8)
        self.cor_dest_anchor = np.zeros(n_od)
        self.cor_seg_theta = np.zeros(n_od)
        self.cor_seg_yd = np.zeros(n_od)
        self.cor_seg_p0 = np.zeros((n_od, 2))
        self.cor_seg_len = np.zeros(n_od)
        self.cor_arc_c = np.zeros((n_od, 2))
        self.cor_arc_r = np.ones(n_od)
        for o in geo.branches:
            for d in geo.branches:
                cor = build_corridor((o, d), geo,
                                     min_corridor_width=scenario.min_corridor_width,
                                     phi_b=scenario.phi_b)
                self.corridors[(o.id, d.id)] = cor
                k = self._od_index(o.id, d.id)
                self.cor_dest_anchor[k] = cor.dest_anchor
                if cor.visibility_class == INVISIBLE:
                    self.cor_kind[k] = KIND_RING
                elif isinstance(cor.inner, Segment):
                    self.cor_kind[k] = KIND_CHORD
                    self._store_segment(k, cor.inner)
                else:
                    self.cor_kind[k] = KIND_ARC
                    self.cor_arc_c[k] = cor.inner.center
                    self.cor_arc_r[k] = cor.inner.radius
                    chord = Segment(
                        p0=(geo.r_out * math.cos(cor.origin_anchor),
                            geo.r_out * math.sin(cor.origin_anchor)),
                        p1=(geo.r_out * math.cos(cor.origin_anchor + cor.span),
                            geo.r_out * math.sin(cor.origin_anchor + cor.span)))
                    self._store_segment(k, chord)

        # per-destination exit tapers
        self.taper_theta = np.zeros(self.nb)
        self.taper_yd = np.zeros(self.nb)
        self.taper_p0 = np.zeros((self.nb, 2))
        self.taper_len = np.zeros(self.nb)
        for d in geo.branches:
            taper = Segment(
                p0=(geo.r_in * math.cos(d.center_angle - scenario.phi_b),
                    geo.r_in * math.sin(d.center_angle - scenario.phi_b)),
                p1=(geo.r_out * math.cos(d.center_angle),
                    geo.r_out * math.sin(d.center_angle)))
            self.taper_theta[d.id] = taper.direction
            self.taper_yd[d.id] = taper.lateral_offset()
            self.taper_p0[d.id] = taper.p0
            self.taper_len[d.id] = taper.length

        self.detectors = tuple(
            Detector(id=k, angle=wrap_2pi(self.branch_angle[k]
                                          + 0.5 * wrap_2pi(self.branch_angle[(k + 1) % self.nb]
                                                           - self.branch_angle[k])))
            for k in range(self.nb))
        self.detector_angles = np.array([d.angle for d in self.detectors])

        # OD demand weights proportional to the width product
        w = np.outer(self.branch_width, self.branch_width).ravel()
        self.od_weights = w / w.sum()

        # parameter tables indexed by control set
        self._straight_sets = (scenario.straight_entering, scenario.straight_exiting)
        self._circ_sets = (scenario.circular_entering, scenario.circular_rotating,
                           scenario.circular_exiting)
        self.st_mu1 = np.array([p.mu1 for p in self._straight_sets])
        self.st_mu2 = np.array([p.mu2 for p in self._straight_sets])
        self.st_theta = np.array([p.Theta for p in self._straight_sets])
        self.ci_mu1 = np.array([p.mu1 for p in self._circ_sets])
        self.ci_mu2 = np.array([p.mu2 for p in self._circ_sets])
        self.ci_theta = np.array([p.Theta for p in self._circ_sets])
        self.ci_gamma2 = np.array([p.gamma2 for p in self._circ_sets])

        self.rho_max = adaptation.max_density(scenario.shape, scenario.density)
        self.sector_area = 0.5 * scenario.density.sector_span \
            * (geo.r_out ** 2 - geo.r_in ** 2)

        # --- dynamic state --------------------------------------------------
        self._alloc(0)
        self.queues: list[list[dict]] = [[] for _ in range(self.nb)]
        self._preset_done = np.zeros(len(scenario.preset_vehicles), dtype=bool)
        self.events: list[Event] = []
        self._overlapping: set[tuple[int, int]] = set()
        self.macro_samples: list[MacroSample] = []
        self.detector_counts = np.zeros(self.nb)
        self.period_exited = 0
        self.total_released = 0
        self.total_exited = 0
        self.max_abs_accel = 0.0
        self.max_abs_steer = 0.0
        self.rho_sec = np.zeros(self.nb)
        self.gate_closed = np.zeros(self.nb, dtype=bool)

    # ------------------------------------------------------------------ utils

    def _od_index(self, origin: int, dest: int) -> int:
        return origin * self.nb + dest

    def _store_segment(self, k: int, seg: Segment) -> None:
        self.cor_seg_theta[k] = seg.direction
        self.cor_seg_yd[k] = seg.lateral_offset()
        self.cor_seg_p0[k] = seg.p0
        self.cor_seg_len[k] = seg.length

    def _alloc(self, n: int) -> None:
        self.ids = np.zeros(n, dtype=np.int64)
        self.x = np.zeros(n)
        self.y = np.zeros(n)
        self.th = np.zeros(n)
        self.v = np.zeros(n)
        self.phase = np.zeros(n, dtype=np.int8)
        self.origin = np.zeros(n, dtype=np.int64)
        self.dest = np.zeros(n, dtype=np.int64)
        self.alpha = np.zeros(n)
        self.merged = np.zeros(n, dtype=bool)
        self.rho = np.zeros(n)
        self.in_violation = np.zeros(n, dtype=bool)
        self.saturated = np.zeros(n, dtype=bool)
        self.squeezed = np.zeros(n, dtype=bool)
        self.accel_applied = np.zeros(n)
        self.steer_applied = np.zeros(n)

    @property
    def time(self) -> float:
        return self.step_index * self.dt

    @property
    def n(self) -> int:
        return self.ids.size

    def vehicles(self) -> list[Vehicle]:
        """Materialise the spec-level view (for tests and inspection)."""
        weights = self._weights()
        out = []
        for k in range(self.n):
            out.append(Vehicle(
                id=int(self.ids[k]),
                od=(int(self.origin[k]), int(self.dest[k])),
                phase=PHASE_NAMES[int(self.phase[k])],
                alpha=float(self.alpha[k]),
                state=VehicleState(x=float(self.x[k]), y=float(self.y[k]),
                                   theta=float(self.th[k]), v=float(self.v[k])),
                shape=self.scenario.shape,
                priority_weight=float(weights[k]),
            ))
        return out

    def _weights(self) -> np.ndarray:
        w = np.ones(self.n)
        if self.scenario.policy == ENTERING_PRIORITY:
            w[self.phase == PHASE_ENTERING] = self.scenario.entering_weight
        return w

    def _event(self, kind: str, a: int, b: int = -1, value: float = 0.0) -> None:
        self.events.append(Event(time=self.time, kind=kind,
                                 vehicle_a=a, vehicle_b=b, value=value))

    def event_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.events:
            counts[e.kind] = counts.get(e.kind, 0) + 1
        return counts

    # ------------------------------------------------------------------ spawn

    def _spawn(self) -> None:
        sc = self.scenario
        t = self.time
        rate = sc.demand.rate(t)
        lam = self.od_weights * (rate * self.dt / 3600.0)
        counts = self.rng.poisson(lam)
        for k in np.nonzero(counts)[0]:
            o, d = divmod(int(k), self.nb)
            for _ in range(int(counts[k])):
                self.queues[o].append({
                    "origin": o, "dest": d,
                    "alpha": float(self.rng.uniform(*sc.alpha_range)),
                    "speed": None,
                })
        for pk, preset in enumerate(sc.preset_vehicles):
            if not self._preset_done[pk] and preset.spawn_time <= t:
                self._preset_done[pk] = True
                alpha = preset.alpha if preset.alpha is not None \
                    else float(self.rng.uniform(*sc.alpha_range))
                self.queues[preset.origin].append({
                    "origin": preset.origin, "dest": preset.dest,
                    "alpha": alpha, "speed": preset.speed,
                })
        self._release_queues()

    def _release_queues(self) -> None:
        sc = self.scenario
        geo = self.geometry
        headway = sc.safety.d_s + sc.shape.length
        for b in range(self.nb):
            while self.queues[b]:
                u0 = geo.r_out + float(self.branch_len[b])
                ell0 = self.branch_width[b] / 4.0   # middle of the entry half
                sx = u0 * self.axis_c[b] - ell0 * self.axis_s[b]
                sy = u0 * self.axis_s[b] + ell0 * self.axis_c[b]
                lead_gap = math.inf
                lead_v = 0.0
                if self.n:
                    same = (self.phase == PHASE_ENTERING) & (self.origin == b)
                    if same.any():
                        d2 = (self.x[same] - sx) ** 2 + (self.y[same] - sy) ** 2
                        kmin = int(np.argmin(d2))
                        lead_gap = math.sqrt(float(d2[kmin]))
                        lead_v = float(self.v[same][kmin])
                        if lead_gap < headway:
                            break  # spawn deferred; demand queues on the branch
                spec = self.queues[b].pop(0)
                self._add_vehicle(spec, sx, sy, b, lead_gap, lead_v)

    def _add_vehicle(self, spec: dict, sx: float, sy: float, b: int,
                     lead_gap: float, lead_v: float) -> None:
        sc = self.scenario
        if spec["speed"] is not None:
            v0 = float(spec["speed"])
        else:
            v0 = adaptation.entering_speed_cap(
                0.0, float(self.rho_sec[b]), sc.density, sc.policy,
                sc.straight_entering.v_star, sc.shape)
            if math.isfinite(lead_gap):
                # insertion must be brakeable to the safety distance behind the leader
                room = max(0.0, lead_gap - sc.safety.d_s)
                v0 = min(v0, math.sqrt(lead_v * lead_v
                                       + 2.0 * abs(sc.limits.f_min) * room))
        self.ids = np.append(self.ids, self.next_id)
        self.x = np.append(self.x, sx)
        self.y = np.append(self.y, sy)
        self.th = np.append(self.th, wrap_pi(self.branch_angle[b] + math.pi))
        self.v = np.append(self.v, v0)
        self.phase = np.append(self.phase, PHASE_ENTERING)
        self.origin = np.append(self.origin, spec["origin"])
        self.dest = np.append(self.dest, spec["dest"])
        self.alpha = np.append(self.alpha, spec["alpha"])
        self.merged = np.append(self.merged, False)
        self.rho = np.append(self.rho, 0.0)
        self.in_violation = np.append(self.in_violation, False)
        self.saturated = np.append(self.saturated, False)
        self.squeezed = np.append(self.squeezed, False)
        self.accel_applied = np.append(self.accel_applied, 0.0)
        self.steer_applied = np.append(self.steer_applied, 0.0)
        self.next_id += 1
        self.total_released += 1

    # ------------------------------------------------------------------ step

    def step(self) -> None:
        sc = self.scenario
        geo = self.geometry
        self._spawn()
        n = self.n
        if n == 0:
            self._finish_period_if_due()
            self.step_index += 1
            return

        x, y, th, v = self.x, self.y, self.th, self.v
        r = np.hypot(x, y)
        phi = wrap_2pi(np.arctan2(y, x))
        s = wrap_pi(th - phi - math.pi / 2.0)

        on_branch = (self.phase == PHASE_ENTERING) \
            | ((self.phase == PHASE_EXITING) & (r > geo.r_out))
        on_ring = ~on_branch
        branch_of = np.where(self.phase == PHASE_ENTERING, self.origin, self.dest)
        bca = self.axis_c[branch_of]
        bsa = self.axis_s[branch_of]
        u_ax = x * bca + y * bsa
        ell = -x * bsa + y * bca
        od_idx = self.origin * self.nb + self.dest

        theta_d, s_d = self._guidance(r, phi, on_branch, branch_of, u_ax)
        self.last_theta_d, self.last_s_d = theta_d, s_d

        self._refresh_density(on_ring)
        v_track, omega_track = self._speed_targets(on_branch)

        # control sets and saturation flags
        st_set = np.where(self.phase == PHASE_EXITING, 1, 0)
        ci_set = np.where(self.phase == PHASE_EXITING, 2,
                          np.where(self.merged, 1, 0))
        th_rel = wrap_pi(th - theta_d)
        s_rel = wrap_pi(s - s_d)
        sat_now = np.where(on_branch,
                           np.abs(th_rel) >= self.st_theta[st_set],
                           np.abs(s_rel) >= self.ci_theta[ci_set])
        for k in np.nonzero(sat_now & ~self.saturated)[0]:
            self._event("theta_saturation", int(self.ids[k]),
                        value=float(np.abs(np.where(on_branch[k], th_rel[k], s_rel[k]))))
        self.saturated = sat_now

        # newly aligned rotating vehicles switch to rotating parameters
        align = (self.phase == PHASE_ROTATING) & ~self.merged \
            & (np.abs(s_rel) < max(0.0, self.ci_theta[1] - math.radians(5.0)))
        self.merged |= align

        fx = x + sc.shape.length * np.cos(th)
        fy = y + sc.shape.length * np.sin(th)
        dxr = x[:, None] - x[None, :]
        dyr = y[:, None] - y[None, :]
        d2r = dxr * dxr + dyr * dyr
        np.fill_diagonal(d2r, np.inf)
        dxf = fx[:, None] - fx[None, :]
        dyf = fy[:, None] - fy[None, :]
        d2f = dxf * dxf + dyf * dyf
        np.fill_diagonal(d2f, np.inf)

        raw_a = np.zeros(n)
        raw_d = np.zeros(n)
        self._nlfc_straight(on_branch, theta_d, th_rel, v_track, st_set,
                            fx, fy, d2f, raw_a, raw_d)
        self._nlfc_circular(on_ring, r, phi, s, s_d, s_rel, v_track, omega_track,
                            ci_set, fx, fy, d2f, raw_a, raw_d)
        self.last_raw_accel, self.last_raw_steer = raw_a.copy(), raw_d.copy()

        lower, upper = self._steering_bounds(on_branch, on_ring, r, phi, th, s,
                                             u_ax, ell, branch_of, od_idx)
        self.last_lower, self.last_upper = lower, upper
        f_cap = self._safety_caps(on_branch, r, phi, theta_d, s_d, s, d2r)
        if self._held.any():
            # a closed admission gate must actually stop the vehicle on the
            # branch; the entering tracking gain alone is far too soft
            a_br = abs(sc.limits.f_min)
            room = np.maximum(0.0, self._held_room - self.v * self.dt)
            stop_cap = (np.sqrt(2.0 * a_br * room) - self.v) / self.dt
            f_cap = np.where(self._held, np.minimum(f_cap, stop_cap), f_cap)
        self.last_f_cap = f_cap

        # clamp
        squeeze = lower > upper
        for k in np.nonzero(squeeze & ~self.squeezed)[0]:
            self._event("envelope_squeeze", int(self.ids[k]),
                        value=float(lower[k] - upper[k]))
        self.squeezed = squeeze
        dmax = sc.limits.delta_max
        steer = np.clip(raw_d, np.minimum(lower, upper), upper)
        if squeeze.any():
            mid = 0.5 * (np.where(np.isfinite(lower), lower, 0.0)
                         + np.where(np.isfinite(upper), upper, 0.0))
            steer = np.where(squeeze, mid, steer)
        steer = np.clip(steer, -dmax, dmax)   # physical limit always wins
        # the steering laws presume flowing speeds; creeping vehicles would
        # otherwise pirouette in place, so fade toward curvature-neutral steer
        creep = self.v < 1.0
        if creep.any():
            neutral = np.where(on_branch, 0.0,
                               np.arctan(sc.shape.length * np.cos(s)
                                         / np.maximum(r, 1.0)))
            fac = np.clip(self.v, 0.0, 1.0)
            steer = np.where(creep, neutral + fac * (steer - neutral), steer)
        accel = np.maximum(sc.limits.f_min,
                           np.minimum(np.minimum(raw_a, sc.limits.f_max), f_cap))
        self.accel_applied = accel
        self.steer_applied = steer
        if n:
            self.max_abs_accel = max(self.max_abs_accel, float(np.abs(accel).max()))
            self.max_abs_steer = max(self.max_abs_steer, float(np.abs(steer).max()))

        # integrate and post-process
        nx, ny, nth, nv = step_arrays(x, y, th, v, accel, steer, self.dt,
                                      sc.shape.length)
        nth = wrap_pi(nth)
        self.x, self.y, self.th, self.v = nx, ny, nth, nv

        self._detectors(r, phi)
        self._transitions()
        self._audits()
        self._finish_period_if_due()
        self.step_index += 1

    # ------------------------------------------------------------- sub-stages

    def _guidance(self, r, phi, on_branch, branch_of, u_ax):
        geo = self.geometry
        sc = self.scenario
        n = self.n
        theta_d = np.zeros(n)
        s_d = np.zeros(n)

        ent = on_branch & (self.phase == PHASE_ENTERING)
        if ent.any():
            beta = self.branch_angle[branch_of[ent]]
            inbound = wrap_pi(beta + math.pi)
            dist = u_ax[ent] - geo.r_out
            frac = np.clip((sc.merge_blend_zone - dist) / sc.merge_blend_zone, 0.0, 1.0)
            tangent = phi[ent] + math.pi / 2.0
            # pre-turn only as far as the entering orientation envelope allows;
            # the rest of the merge turn happens on the ring at the wide Theta
            lim = max(0.0, self.st_theta[0] - math.radians(1.0))
            turn = np.clip(frac * wrap_pi(tangent - inbound), -lim, lim)
            theta_d[ent] = wrap_pi(inbound + turn)

        exb = on_branch & (self.phase == PHASE_EXITING)
        if exb.any():
            theta_d[exb] = wrap_pi(self.branch_angle[branch_of[exb]])

        ring = ~on_branch
        if ring.any():
            rr = np.clip(r[ring], geo.r_in, geo.r_out)
            ph = phi[ring]
            # aim at the middle of the exit carriageway so tracking error
            # stays inside the mouth
            phi_e = self.branch_angle[self.dest[ring]] \
                - 0.5 * self.mouth_half[self.dest[ring]]
            dphi = wrap_2pi(phi_e - ph)
            vis = dphi <= (np.arccos(geo.r_in / rr) + math.acos(geo.r_in / geo.r_out))
            # shortest-path field
            ex = geo.r_out * np.cos(phi_e) - rr * np.cos(ph)
            ey = geo.r_out * np.sin(phi_e) - rr * np.sin(ph)
            chord = np.arctan2(ey, ex)
            touch = ph + np.arccos(geo.r_in / rr)
            tx = geo.r_in * np.cos(touch) - rr * np.cos(ph)
            ty = geo.r_in * np.sin(touch) - rr * np.sin(ph)
            tangent_dir = np.arctan2(ty, tx)
            circ = ph + math.pi / 2.0
            on_inner = rr <= geo.r_in + 1e-9
            sp = np.where(vis, wrap_pi(chord - circ),
                          np.where(on_inner, 0.0, wrap_pi(tangent_dir - circ)))
            # minimum-deviation field
            with np.errstate(divide="ignore", invalid="ignore"):
                md = np.arctan((np.log(rr) - math.log(geo.r_out))
                               / np.where(dphi > 0.0, dphi, 1.0))
            md = np.where(dphi > 0.0, md, sp)
            a = self.alpha[ring]
            blend = np.where(self.phase[ring] == PHASE_EXITING, sp,
                             a * sp + (1.0 - a) * md)
            # once at or past the exit angle, head out along the branch axis
            # (the wrapped field would otherwise demand a fresh full lap)
            past = (self.phase[ring] == PHASE_EXITING) & (wrap_pi(phi_e - ph) <= 0.0)
            outbound = wrap_pi(self.branch_angle[self.dest[ring]] - ph - math.pi / 2.0)
            blend = np.where(past, outbound, blend)
            s_d[ring] = blend
            theta_d[ring] = wrap_pi(blend + ph + math.pi / 2.0)
        return theta_d, s_d

    def _refresh_density(self, on_ring) -> None:
        sc = self.scenario
        geo = self.geometry
        n = self.n
        # ring-sector densities ahead of each entrance (cheap, every step)
        cx = self.x + sc.shape.length / 2.0 * np.cos(self.th)
        cy = self.y + sc.shape.length / 2.0 * np.sin(self.th)
        rc = np.hypot(cx, cy)
        pc = np.arctan2(cy, cx)
        on = (rc >= geo.r_in) & (rc <= geo.r_out)
        area = sc.shape.length * sc.shape.width
        for b in range(self.nb):
            m = on & (wrap_2pi(pc - self.branch_angle[b]) < sc.density.sector_span)
            self.rho_sec[b] = min(1.0, float(m.sum()) * area / self.sector_area)

        # ring vehicles: measurement window bent along the travel circle.
        # A straight 80 m rectangle on a 46..84 m curve leaves the traffic
        # stream after ~25 m of arc and underreads density severalfold,
        # which disables the speed-density stabilisation right when needed.
        ring_idx = np.nonzero(on_ring)[0]
        if ring_idx.size:
            L = sc.density.rect_length
            W = sc.density.rect_width
            r_e = np.hypot(self.x[ring_idx], self.y[ring_idx])
            phi_e = np.arctan2(self.y[ring_idx], self.x[ring_idx])
            span = sc.density.eta * L / np.maximum(r_e, geo.r_in)
            back = (1.0 - sc.density.eta) * L / np.maximum(r_e, geo.r_in)
            lo = np.maximum(r_e - W / 2.0, geo.r_in)
            hi = np.minimum(r_e + W / 2.0, geo.r_out)
            road_area = np.maximum(hi - lo, 1e-9) * L
            dphi = wrap_2pi(pc[None, :] - phi_e[:, None])
            ahead = (dphi <= span[:, None]) | (dphi >= TWO_PI - back[:, None])
            in_band = (rc[None, :] >= lo[:, None]) & (rc[None, :] <= hi[:, None]) & on[None, :]
            counts = (ahead & in_band).sum(axis=1)
            self_in = (rc[ring_idx] >= lo) & (rc[ring_idx] <= hi)
            counts = counts - self_in.astype(int)
            self.rho[ring_idx] = np.minimum(1.0, counts * area / road_area)

        # branch vehicles: exact clipped-rectangle measurement (road is straight)
        refresh_steps = max(1, int(round(sc.density_refresh / self.dt)))
        due = (~on_ring) & ((self.step_index + self.ids) % refresh_steps == 0)
        if not due.any():
            return
        reach = max(sc.density.rect_length, sc.density.rect_width) \
            + math.hypot(sc.shape.length, sc.shape.width) + sc.shape.length
        for k in np.nonzero(due)[0]:
            ego = VehicleState(x=float(self.x[k]), y=float(self.y[k]),
                               theta=float(self.th[k]), v=float(self.v[k]))
            d2 = (self.x - self.x[k]) ** 2 + (self.y - self.y[k]) ** 2
            cand = np.nonzero(d2 < reach * reach)[0]
            neighbors = [
                (VehicleState(x=float(self.x[j]), y=float(self.y[j]),
                              theta=float(self.th[j]), v=float(self.v[j])),
                 sc.shape)
                for j in cand if j != k
            ]
            self.rho[k] = adaptation.local_density(ego, neighbors, geo,
                                                   sc.density, sc.shape)

    def _speed_targets(self, on_branch):
        sc = self.scenario
        n = self.n
        rho = self.rho
        rmax = self.rho_max
        with np.errstate(divide="ignore"):
            fd = sc.density.lambda_s * (1.0 / np.where(rho > 0.0, rho, 1.0) - 1.0 / rmax)
            fd_w = sc.density.lambda_r * (1.0 / np.where(rho > 0.0, rho, 1.0) - 1.0 / rmax)
        v_star = sc.straight_entering.v_star
        v_t = np.where(rho > 0.0, np.clip(fd, 0.0, v_star), v_star)
        ent = self.phase == PHASE_ENTERING
        if sc.policy == ROTATING_PRIORITY and ent.any():
            cap = v_star * (1.0 - self.rho_sec[self.origin[ent]] / rmax)
            v_t[ent] = np.minimum(v_t[ent], np.maximum(cap, 0.0))
            # admission gate: hold entering traffic on the branch while the
            # ring sector ahead is saturated (priority to rotating traffic);
            # vehicles already committed to the mouth carry on
            gate = sc.merge_gate_density
            self.gate_closed = np.where(self.gate_closed,
                                        self.rho_sec >= 0.8 * gate,
                                        self.rho_sec >= gate)
            u = self.x * self.axis_c[self.origin] + self.y * self.axis_s[self.origin]
            held = ent & self.gate_closed[self.origin] \
                & (u - self.geometry.r_out > 8.0)
            v_t[held] = 0.0
            self._held = held
            self._held_room = u - self.geometry.r_out - 2.0
        else:
            self._held = np.zeros(n, dtype=bool)
            self._held_room = np.zeros(n)
        w_star = sc.circular_rotating.omega_star
        w_t = np.where(rho > 0.0, np.clip(fd_w, 0.0, w_star), w_star)
        return v_t, w_t

    # -- controllers ---------------------------------------------------------

    def _nlfc_straight(self, on_branch, theta_d, th_rel, v_track, st_set,
                       fx, fy, d2f, raw_a, raw_d) -> None:
        sc = self.scenario
        p = sc.straight_entering
        egos = np.nonzero(on_branch)[0]
        if egos.size == 0:
            return
        n = self.n
        cutoff2 = sc.neighbor_cutoff ** 2
        mask = d2f[egos] < cutoff2
        ii_l, jj = np.nonzero(mask)
        ii = egos[ii_l]

        lim = self.st_theta[st_set[egos]] - 1e-3
        t_rel = np.clip(th_rel[egos], -lim, lim)
        cos_t, sin_t = np.cos(t_rel), np.sin(t_rel)
        v = self.v[egos]

        vx_sum = np.zeros(egos.size)
        vy_sum = np.zeros(egos.size)
        if ii.size:
            cd, sd_ = np.cos(theta_d[ii]), np.sin(theta_d[ii])
            dx = fx[ii] - fx[jj]
            dy = fy[ii] - fy[jj]
            dxp = dx * cd + dy * sd_
            dyp = dy * cd - dx * sd_
            d = np.sqrt(dxp * dxp + p.p * dyp * dyp)
            d = np.maximum(d, 1e-9)
            g1 = p.gamma1_base + p.gamma1_speed * self.v[ii]
            w = self._pair_weights(ii, jj)
            vp = w * g1 * (1.0 / (1.0 + np.exp(p.gamma3 - d / p.gamma2)) - 1.0)
            vx_sum = np.bincount(ii_l, weights=vp * dxp / d, minlength=egos.size)
            vy_sum = np.bincount(ii_l, weights=vp * dyp / d, minlength=egos.size)

        margin = p.v_max * cos_t - p.v_star
        margin = np.where(np.abs(margin) < 1e-9, 1e-9, margin)
        eps = p.eps_f
        ramp_arg = -vx_sum
        ramp = np.where(ramp_arg <= -eps, 0.0,
                        np.where(ramp_arg < 0.0, (ramp_arg + eps) ** 2 / (2 * eps),
                                 (eps * eps + 2 * eps * ramp_arg) / (2 * eps)))
        k = self.st_mu2[st_set[egos]] + vx_sum / p.v_star \
            + p.v_max * cos_t / (p.v_star * margin) * ramp
        accel = -k / cos_t * (v * cos_t - v_track[egos]) - vx_sum / cos_t

        v_div = np.maximum(v, V_FLOOR)
        gain = p.v_star + p.A / (v_div * (cos_t - np.cos(self.st_theta[st_set[egos]])))
        u = -(self.st_mu1[st_set[egos]] * v * sin_t + p.p * vy_sum + sin_t * accel) / gain
        raw_a[egos] = accel
        raw_d[egos] = np.arctan(sc.shape.length * u / v_div)

    def _nlfc_circular(self, on_ring, r, phi, s, s_d, s_rel, v_track, omega_track,
                       ci_set, fx, fy, d2f, raw_a, raw_d) -> None:
        sc = self.scenario
        p = sc.circular_rotating  # shared constants across circular sets
        geo = self.geometry
        egos = np.nonzero(on_ring)[0]
        if egos.size == 0:
            return
        cutoff2 = sc.neighbor_cutoff ** 2
        mask = d2f[egos] < cutoff2
        ii_l, jj = np.nonzero(mask)
        ii = egos[ii_l]

        lim = self.ci_theta[ci_set[egos]] - 1e-3
        sh = np.clip(s_rel[egos], -lim, lim)
        cos_s, sin_s = np.cos(sh), np.sin(sh)
        v = self.v[egos]
        re = r[egos]
        w_star = p.omega_star

        lam_sum = np.zeros(egos.size)
        phi_sum = np.zeros(egos.size)
        m_sum = np.zeros(egos.size)
        if ii.size:
            rf = np.hypot(fx, fy)
            pf = np.arctan2(fy, fx)
            ai = pf[ii] + s_d[ii]
            aj = pf[jj] + s_d[ii]
            den = np.sin(aj - ai)
            parallel = np.abs(den) < 1e-12
            den_safe = np.where(parallel, 1.0, den)
            ddx = fx[jj] - fx[ii]
            ddy = fy[jj] - fy[ii]
            t = (ddx * np.sin(aj) - ddy * np.cos(aj)) / den_safe
            cx = fx[ii] + t * np.cos(ai)
            cy = fy[ii] + t * np.sin(ai)
            axc = fx[ii] - cx
            ayc = fy[ii] - cy
            bxc = fx[jj] - cx
            byc = fy[jj] - cy
            far = np.hypot(axc, ayc) > 10.0 * geo.r_out
            between = axc * bxc + ayc * byc < 0.0
            fallback = parallel | far | between
            r1 = np.hypot(axc, ayc)
            r2 = np.hypot(bxc, byc)
            dot = axc * bxc + ayc * byc
            d2t = p.p * (r1 - r2) ** 2 + 2.0 * (r1 * r2 - dot)
            d_tr = np.sqrt(np.maximum(0.0, d2t))
            d_fb = np.sqrt(p.p) * np.hypot(ddx, ddy)
            d = np.where(fallback, d_fb, d_tr)
            d = np.maximum(d, 1e-9)

            g1 = p.gamma1_base + p.gamma1_speed * self.v[ii]
            w = self._pair_weights(ii, jj)
            g2 = self.ci_gamma2[ci_set[ii]]
            vp = w * g1 * (1.0 / (1.0 + np.exp(p.gamma3 - d / g2)) - 1.0)
            ddphi = pf[ii] - pf[jj]
            lam_pair = (p.p * (rf[ii] - rf[jj]) + rf[jj] * (1.0 - np.cos(ddphi))) * vp / d
            phi_pair = (rf[ii] / w_star) * vp * rf[jj] * np.sin(ddphi) / d
            kap = np.where(d < p.lambda_visc, p.q * (p.lambda_visc - d) ** 2, 0.0)
            m_pair = kap * (np.sin(s[jj]) - np.sin(s[ii]))
            lam_sum = np.bincount(ii_l, weights=lam_pair, minlength=egos.size)
            phi_sum = np.bincount(ii_l, weights=phi_pair, minlength=egos.size)
            m_sum = np.bincount(ii_l, weights=m_pair, minlength=egos.size)

        track = (v_track[egos] if p.track_linear_speed
                 else re * omega_track[egos])
        margin = p.v_max * cos_s - re * w_star
        margin = np.where(np.abs(margin) < 1e-9, 1e-9, margin)
        eps = p.eps_f
        arg = -p.v_max * cos_s / margin * phi_sum
        ramp = np.where(arg <= -eps, 0.0,
                        np.where(arg < 0.0, (arg + eps) ** 2 / (2 * eps),
                                 (eps * eps + 2 * eps * arg) / (2 * eps)))
        k_i = self.ci_mu2[ci_set[egos]] + phi_sum + ramp
        accel = -k_i * (v - track / cos_s) - phi_sum * re * w_star / cos_s

        lam_i = (v * cos_s / re - w_star) * v * cos_s / (re * re) - lam_sum
        a = (p.b - 1.0 / (re * re)) * v * v * cos_s + w_star * v / re \
            + p.A / (cos_s - np.cos(self.ci_theta[ci_set[egos]])) ** 2
        v_div = np.maximum(v, V_FLOOR)
        inner = sc.shape.length * cos_s / re \
            - sc.shape.length * (self.ci_mu1[ci_set[egos]] * sin_s
                                 + (p.b * accel * sin_s + lam_i) * v - m_sum) / (v_div * a)
        steer = np.where(a <= 1e-6, np.arctan(sc.shape.length / re), np.arctan(inner))
        raw_a[egos] = accel
        raw_d[egos] = steer

    def _pair_weights(self, ii, jj) -> np.ndarray:
        if self.scenario.policy != ENTERING_PRIORITY:
            return np.ones(ii.size)
        w = np.ones(ii.size)
        boost = (self.phase[jj] == PHASE_ENTERING) & (self.phase[ii] != PHASE_ENTERING)
        w[boost] = self.scenario.entering_weight
        return w

    # -- boundary bounds ------------------------------------------------------

    # linear boundary laws are trusted only near their linearisation point;
    # larger excursions are clamped so recovery stays proportionate
    _BOUND_ANGLE_CLIP = math.radians(26.0)
    _BOUND_OFFSET_CLIP = 6.0
    _BOUND_LOOKAHEAD = 1.5   # s; bounds activate when crossing is this close

    def _steering_bounds(self, on_branch, on_ring, r, phi, th, s,
                         u_ax, ell, branch_of, od_idx):
        sc = self.scenario
        geo = self.geometry
        n = self.n
        band = sc.activation_band
        sigma = sc.shape.length
        v_div = np.maximum(self.v, V_FLOOR)
        lower = np.full(n, -np.inf)
        upper = np.full(n, np.inf)
        aclip = self._BOUND_ANGLE_CLIP
        oclip = self._BOUND_OFFSET_CLIP
        look = self._BOUND_LOOKAHEAD

        if sc.gains.mode == "pole-placement":
            l1, l2 = sc.gains.eigenvalues
            k1s = l1 * l2 / v_div
            k2s = -(l1 + l2)
        else:
            k1s = np.full(n, sc.gains.k_straight[0])
            k2s = sc.gains.k_straight[1]

        def circ_k1(r_d, sense):
            if sc.gains.mode == "pole-placement":
                l1_, l2_ = sc.gains.eigenvalues
                return sense * (v_div / (r_d * r_d) - l1_ * l2_ / v_div)
            return np.full(n, sc.gains.k_circular[0])

        def circ_k2():
            if sc.gains.mode == "pole-placement":
                l1_, l2_ = sc.gains.eigenvalues
                return -(l1_ + l2_)
            return sc.gains.k_circular[1]

        # branch carriageway edges (skewed bounds in the travel frame)
        if on_branch.any():
            beta = self.branch_angle[branch_of]
            frame = np.where(self.phase == PHASE_ENTERING, beta + math.pi, beta)
            yp = np.where(self.phase == PHASE_ENTERING, -ell, ell)
            xi = wrap_pi(th - frame)
            xi_c = np.clip(xi, -aclip, aclip)
            whalf = self.branch_width[branch_of] / 2.0
            lat_rate = self.v * np.sin(xi)
            # left edge at y' = 0 caps steering from above
            gap = -yp
            act = on_branch & ((gap < band) | (gap < look * np.maximum(lat_rate, 0.0)))
            d_left = np.arctan(sigma * (-k1s * np.clip(yp, -oclip, oclip)
                                        - k2s * xi_c) / v_div)
            upper = np.where(act, np.minimum(upper, d_left), upper)
            # right edge at y' = -w/2 supports from below
            gap = yp + whalf
            act = on_branch & ((gap < band) | (gap < look * np.maximum(-lat_rate, 0.0)))
            d_right = np.arctan(sigma * (-k1s * np.clip(yp + whalf, -oclip, oclip)
                                         - k2s * xi_c) / v_div)
            lower = np.where(act, np.maximum(lower, d_right), lower)

        if on_ring.any():
            k2c = circ_k2()
            s_c0 = np.clip(s, -aclip, aclip)
            out_rate = -self.v * np.sin(s)   # dr/dt
            # outer boundary (right side): opening at the destination mouth
            dphi_exit = wrap_2pi(self.cor_dest_anchor[od_idx] - phi)
            exit_mid = self.branch_angle[self.dest] - 0.5 * self.mouth_half[self.dest]
            near_mouth = (self.phase == PHASE_EXITING) \
                & (np.abs(wrap_pi(phi - exit_mid)) <= 2.0 * self.mouth_half[self.dest])
            gap = geo.r_out - r
            act = on_ring & ~near_mouth \
                & ((gap < band) | (gap < look * np.maximum(out_rate, 0.0)))
            u_out = -(circ_k1(geo.r_out, 1) * np.clip(r - geo.r_out, -oclip, oclip)
                      + k2c * s_c0) + self.v / geo.r_out
            d_out = np.arctan(sigma * u_out / v_div)
            lower = np.where(act, np.maximum(lower, d_out), lower)

            kind = self.cor_kind[od_idx]
            # invisible ODs: inner arc, then the exit taper
            inv = on_ring & (kind == KIND_RING)
            gap = r - geo.r_in
            act = inv & ((gap < band) | (gap < look * np.maximum(-out_rate, 0.0)))
            u_in = -(circ_k1(geo.r_in, 1) * np.clip(r - geo.r_in, -oclip, oclip)
                     + k2c * s_c0) + self.v / geo.r_in
            d_in = np.arctan(sigma * u_in / v_div)
            upper = np.where(act, np.minimum(upper, d_in), upper)

            tap = inv & (dphi_exit <= sc.phi_b)
            if tap.any():
                dd = self.dest
                t_th = self.taper_theta[dd]
                ypt = self.y * np.cos(t_th) - self.x * np.sin(t_th)
                xit = wrap_pi(th - t_th)
                along = (self.x - self.taper_p0[dd, 0]) * np.cos(t_th) \
                    + (self.y - self.taper_p0[dd, 1]) * np.sin(t_th)
                ydt = self.taper_yd[dd]
                gap = ydt - ypt
                rate = self.v * np.sin(xit)
                act = tap & ((gap < band) | (gap < look * np.maximum(rate, 0.0))) \
                    & (along > -5.0) & (along < self.taper_len[dd] + 5.0)
                d_tap = np.arctan(sigma * (-k1s * np.clip(ypt - ydt, -oclip, oclip)
                                           - k2s * np.clip(xit, -aclip, aclip)) / v_div)
                upper = np.where(act, np.minimum(upper, d_tap), upper)

            # chord corridors
            ch = on_ring & (kind == KIND_CHORD)
            if ch.any():
                c_th = self.cor_seg_theta[od_idx]
                ypc = self.y * np.cos(c_th) - self.x * np.sin(c_th)
                xic = wrap_pi(th - c_th)
                along = (self.x - self.cor_seg_p0[od_idx, 0]) * np.cos(c_th) \
                    + (self.y - self.cor_seg_p0[od_idx, 1]) * np.sin(c_th)
                ydc = self.cor_seg_yd[od_idx]
                gap = ydc - ypc
                rate = self.v * np.sin(xic)
                act = ch & ((gap < band) | (gap < look * np.maximum(rate, 0.0))) \
                    & (along > -5.0) & (along < self.cor_seg_len[od_idx] + 5.0)
                d_ch = np.arctan(sigma * (-k1s * np.clip(ypc - ydc, -oclip, oclip)
                                          - k2s * np.clip(xic, -aclip, aclip)) / v_div)
                upper = np.where(act, np.minimum(upper, d_ch), upper)

            # sagged-arc corridors (clockwise about an external centre)
            ar = on_ring & (kind == KIND_ARC)
            if ar.any():
                acx = self.cor_arc_c[od_idx, 0]
                acy = self.cor_arc_c[od_idx, 1]
                rel_x = self.x - acx
                rel_y = self.y - acy
                r_c = np.hypot(rel_x, rel_y)
                phi_c = np.arctan2(rel_y, rel_x)
                s_c = wrap_pi(th - (phi_c - math.pi / 2.0))
                r_a = self.cor_arc_r[od_idx]
                k1a = circ_k1(r_a, -1)
                u_arc = -(k1a * np.clip(r_c - r_a, -oclip, oclip)
                          + k2c * np.clip(s_c, -aclip, aclip)) - self.v / r_a
                # span test via the anchor chord
                c_th = self.cor_seg_theta[od_idx]
                along = (self.x - self.cor_seg_p0[od_idx, 0]) * np.cos(c_th) \
                    + (self.y - self.cor_seg_p0[od_idx, 1]) * np.sin(c_th)
                gap = r_a - r_c
                rate = self.v * np.sin(s_c)   # d(r_c)/dt for clockwise travel
                act = ar & ((gap < band) | (gap < look * np.maximum(rate, 0.0))) \
                    & (along > -2.0) & (along < self.cor_seg_len[od_idx] + 2.0)
                d_arc = np.arctan(sigma * u_arc / v_div)
                upper = np.where(act, np.minimum(upper, d_arc), upper)

        return lower, upper

    # -- safety ----------------------------------------------------------------

    def _safety_caps(self, on_branch, r, phi, theta_d, s_d, s, d2r) -> np.ndarray:
        sc = self.scenario
        sp = sc.safety
        n = self.n
        d_th = np.where(on_branch,
                        sp.d0_straight + sp.d1_straight * self.v,
                        sp.d0_circular + sp.d1_circular * self.v)
        mask = d2r < (d_th ** 2)[:, None]
        ii, jj = np.nonzero(mask)
        if ii.size == 0:
            return np.full(n, np.inf)

        # a vehicle is predictable as circular only if both its desired and
        # its actual deviation are small; mid-correction transients are the
        # crossing threats, predicted along where they are actually heading
        thr = sp.circular_class_threshold
        skewed = on_branch | (np.abs(s_d) >= thr) | (np.abs(s) >= thr)
        theta_d = np.where(~on_branch & (np.abs(s_d) < thr) & (np.abs(s) >= thr),
                           self.th, theta_d)
        x, y, th = self.x, self.y, self.th
        band = sc.shape.width + sp.w_th
        dist = np.sqrt(d2r[ii, jj])
        d_o = np.full(n, np.inf)

        # leading obstacle in the narrow corridor along the predicted path;
        # body centres keep rotated vehicles inside the printed band width
        cx = x + sc.shape.length / 2.0 * np.cos(th)
        cy = y + sc.shape.length / 2.0 * np.sin(th)
        rc = np.hypot(cx, cy)
        pc = np.arctan2(cy, cx)
        dist_c = np.hypot(cx[jj] - cx[ii], cy[jj] - cy[ii])
        circ_e = ~skewed[ii]
        if circ_e.any():
            a, b = ii[circ_e], jj[circ_e]
            ok = (wrap_2pi(pc[b] - pc[a]) < math.pi / 2.0) \
                & (np.abs(rc[b] - rc[a]) < band)
            np.minimum.at(d_o, a[ok], dist_c[circ_e][ok])
        skew_e = skewed[ii]
        if skew_e.any():
            a, b = ii[skew_e], jj[skew_e]
            ca, sa = np.cos(theta_d[a]), np.sin(theta_d[a])
            dx, dy = cx[b] - cx[a], cy[b] - cy[a]
            ok = (dx * ca + dy * sa >= 0.0) & (np.abs(dy * ca - dx * sa) < band)
            np.minimum.at(d_o, a[ok], dist_c[skew_e][ok])

        region = self.geometry.r_out + float(self.branch_len.max())

        # cross-point prediction only makes sense for moving obstacles
        from .safety import MOTION_FLOOR
        moving_j = self.v[jj] >= MOTION_FLOOR
        if sc.policy == ROTATING_PRIORITY:
            # priority: ring traffic does not yield to the predicted line of
            # an entering vehicle (which is itself obligated to yield); its
            # physical presence is still covered by the leading-obstacle check
            moving_j &= ~((self.phase[jj] == PHASE_ENTERING)
                          & (self.phase[ii] != PHASE_ENTERING))

        # skew-skew: desired-heading lines cross
        ss = skewed[ii] & skewed[jj] & moving_j
        if ss.any():
            a, b = ii[ss], jj[ss]
            ta, tb = theta_d[a], theta_d[b]
            den = np.sin(tb - ta)
            good = np.abs(den) >= 1e-12
            den = np.where(good, den, 1.0)
            t = ((x[b] - x[a]) * np.sin(tb) - (y[b] - y[a]) * np.cos(tb)) / den
            cx = x[a] + t * np.cos(ta)
            cy = y[a] + t * np.sin(ta)
            good &= np.hypot(cx, cy) <= region
            good &= (cx - x[a]) * np.cos(ta) + (cy - y[a]) * np.sin(ta) >= 0.0
            good &= (cx - x[b]) * np.cos(ta) + (cy - y[b]) * np.sin(ta) >= 0.0
            dcp = np.hypot(cx - x[a], cy - y[a])
            np.minimum.at(d_o, a[good], dcp[good])

        # circle-line crossings, both role assignments
        for ego_circ in (True, False):
            if ego_circ:
                sel = ~skewed[ii] & skewed[jj] & moving_j
            else:
                sel = skewed[ii] & ~skewed[jj] & moving_j
            if not sel.any():
                continue
            a, b = ii[sel], jj[sel]
            if ego_circ:
                rad, lp, lt = r[a], b, theta_d[b]
            else:
                rad, lp, lt = r[b], a, theta_d[a]
            dxl, dyl = np.cos(lt), np.sin(lt)
            t0 = -(x[lp] * dxl + y[lp] * dyl)
            fxl = x[lp] + t0 * dxl
            fyl = y[lp] + t0 * dyl
            h2 = rad * rad - (fxl * fxl + fyl * fyl)
            has = h2 >= 0.0
            h = np.sqrt(np.where(has, h2, 0.0))
            best = np.full(a.size, np.inf)
            for sgn in (-1.0, 1.0):
                tt = t0 + sgn * h
                cxr = x[lp] + tt * dxl
                cyr = y[lp] + tt * dyl
                ok = has & (tt >= 0.0)   # ahead of the line vehicle
                ang = np.arctan2(cyr, cxr)
                if ego_circ:
                    ok &= wrap_2pi(ang - phi[a]) < math.pi
                else:
                    ok &= wrap_2pi(ang - phi[b]) < math.pi
                dcp = np.hypot(cxr - x[a], cyr - y[a])
                best = np.where(ok, np.minimum(best, dcp), best)
            np.minimum.at(d_o, a, best)

        k1, k2 = sp.k_s
        cap = np.where(np.isfinite(d_o),
                       k1 * (d_o - sp.d_s) - k2 * self.v, np.inf)
        # Kinematic envelope: next-step speed must remain brakeable to a stop
        # at a hard physical floor.  It pre-brakes fast approaches the
        # proportional law would catch too late, and it alone governs inside
        # d_s (the law's design domain is the approach; holding sub-d_s gaps
        # stopped forever would freeze every compressed queue, while merges
        # legitimately produce such gaps).
        a_br = abs(sc.limits.f_min)
        floor = sc.shape.length + 0.8
        room = np.where(np.isfinite(d_o),
                        np.maximum(0.0, d_o - self.v * self.dt - floor), np.inf)
        v_allow = np.sqrt(2.0 * a_br * room)
        feas = np.where(np.isfinite(d_o), (v_allow - self.v) / self.dt, np.inf)
        return np.where(d_o >= sp.d_s, np.minimum(cap, feas), feas)

    # -- post-integration -------------------------------------------------------

    def _transitions(self) -> None:
        sc = self.scenario
        geo = self.geometry
        r = np.hypot(self.x, self.y)
        phi = wrap_2pi(np.arctan2(self.y, self.x))

        ent = self.phase == PHASE_ENTERING
        merged_now = ent & (r <= geo.r_out)
        self.phase[merged_now] = PHASE_ROTATING
        self.merged[merged_now] = False

        exit_mid = self.branch_angle[self.dest] - 0.5 * self.mouth_half[self.dest]

        rot = self.phase == PHASE_ROTATING
        if rot.any():
            rr = np.clip(r, geo.r_in, geo.r_out)
            dphi = wrap_2pi(exit_mid - phi)
            vis = dphi <= (np.arccos(geo.r_in / rr) + math.acos(geo.r_in / geo.r_out))
            go = rot & vis & (dphi <= sc.phi_b)
            self.phase[go] = PHASE_EXITING

        exi = self.phase == PHASE_EXITING
        if exi.any():
            over = wrap_2pi(phi - exit_mid)
            missed = exi & (r <= geo.r_out) \
                & (over > 2.0 * self.mouth_half[self.dest]) & (over < math.pi)
            for k in np.nonzero(missed)[0]:
                self._event("extra_lap", int(self.ids[k]))
            self.phase[missed] = PHASE_ROTATING
            self.merged[missed] = True

            u = self.x * self.axis_c[self.dest] + self.y * self.axis_s[self.dest]
            done = (self.phase == PHASE_EXITING) \
                & (u >= geo.r_out + self.branch_len[self.dest])
            n_done = int(done.sum())
            if n_done:
                self.total_exited += n_done
                self.period_exited += n_done
                self._compress(~done)

    def _compress(self, keep: np.ndarray) -> None:
        for name in ("ids", "x", "y", "th", "v", "phase", "origin", "dest",
                     "alpha", "merged", "rho", "in_violation", "saturated",
                     "squeezed", "accel_applied", "steer_applied"):
            setattr(self, name, getattr(self, name)[keep])

    def _audits(self) -> None:
        sc = self.scenario
        geo = self.geometry
        n = self.n
        if n == 0:
            return
        # collision audit on the post-step state
        d_nc = no_collision_distance(sc.shape)
        dx = self.x[:, None] - self.x[None, :]
        dy = self.y[:, None] - self.y[None, :]
        d2 = dx * dx + dy * dy
        iu = np.triu_indices(n, k=1)
        close = d2[iu] <= d_nc * d_nc
        overlapping_now: set[tuple[int, int]] = set()
        if close.any():
            ai = iu[0][close]
            bi = iu[1][close]
            for a, b in zip(ai, bi):
                sa = VehicleState(float(self.x[a]), float(self.y[a]),
                                  float(self.th[a]), float(self.v[a]))
                sb = VehicleState(float(self.x[b]), float(self.y[b]),
                                  float(self.th[b]), float(self.v[b]))
                depth = overlap_depth(sa, sb, sc.shape)
                if depth > 0.0:
                    pair = (int(self.ids[a]), int(self.ids[b]))
                    overlapping_now.add(pair)
                    if pair not in self._overlapping:
                        self._event("collision", pair[0], pair[1], value=depth)
                        if not collides_exact(sa, sb, sc.shape):
                            self._event("vertex_test_miss", pair[0], pair[1],
                                        value=depth)
        self._overlapping = overlapping_now

        # boundary audit
        r = np.hypot(self.x, self.y)
        phi = wrap_2pi(np.arctan2(self.y, self.x))
        tol = sc.violation_tolerance
        excess = np.zeros(n)

        on_branch = (self.phase == PHASE_ENTERING) \
            | ((self.phase == PHASE_EXITING) & (r > geo.r_out))
        if on_branch.any():
            branch_of = np.where(self.phase == PHASE_ENTERING, self.origin, self.dest)
            bca = self.axis_c[branch_of]
            bsa = self.axis_s[branch_of]
            ell = -self.x * bsa + self.y * bca
            yp = np.where(self.phase == PHASE_ENTERING, -ell, ell)
            wh = self.branch_width[branch_of] / 2.0
            exc_b = np.maximum(yp, -(yp + wh))
            excess = np.where(on_branch, np.maximum(excess, exc_b), excess)

        on_ring = ~on_branch
        if on_ring.any():
            od_idx = self.origin * self.nb + self.dest
            kind = self.cor_kind[od_idx]
            dphi_exit = wrap_2pi(self.cor_dest_anchor[od_idx] - phi)
            exit_mid = self.branch_angle[self.dest] - 0.5 * self.mouth_half[self.dest]
            near_mouth = (self.phase == PHASE_EXITING) \
                & (np.abs(wrap_pi(phi - exit_mid)) <= 2.0 * self.mouth_half[self.dest])
            exc_out = np.where(near_mouth, 0.0, r - geo.r_out)
            excess = np.where(on_ring, np.maximum(excess, exc_out), excess)

            inv = kind == KIND_RING
            tapered = inv & (dphi_exit <= sc.phi_b)
            exc_in = np.where(tapered, 0.0, geo.r_in - r)
            excess = np.where(on_ring & inv, np.maximum(excess, exc_in), excess)
            if tapered.any():
                t_th = self.taper_theta[self.dest]
                ypt = self.y * np.cos(t_th) - self.x * np.sin(t_th)
                along = (self.x - self.taper_p0[self.dest, 0]) * np.cos(t_th) \
                    + (self.y - self.taper_p0[self.dest, 1]) * np.sin(t_th)
                in_span = (along >= 0.0) & (along <= self.taper_len[self.dest])
                exc_t = np.where(in_span, ypt - self.taper_yd[self.dest], 0.0)
                excess = np.where(on_ring & tapered, np.maximum(excess, exc_t), excess)

            ch = kind == KIND_CHORD
            if (on_ring & ch).any():
                c_th = self.cor_seg_theta[od_idx]
                ypc = self.y * np.cos(c_th) - self.x * np.sin(c_th)
                along = (self.x - self.cor_seg_p0[od_idx, 0]) * np.cos(c_th) \
                    + (self.y - self.cor_seg_p0[od_idx, 1]) * np.sin(c_th)
                in_span = (along >= 0.0) & (along <= self.cor_seg_len[od_idx])
                exc_c = np.where(in_span, ypc - self.cor_seg_yd[od_idx], 0.0)
                excess = np.where(on_ring & ch, np.maximum(excess, exc_c), excess)

            ar = kind == KIND_ARC
            if (on_ring & ar).any():
                r_c = np.hypot(self.x - self.cor_arc_c[od_idx, 0],
                               self.y - self.cor_arc_c[od_idx, 1])
                c_th = self.cor_seg_theta[od_idx]
                along = (self.x - self.cor_seg_p0[od_idx, 0]) * np.cos(c_th) \
                    + (self.y - self.cor_seg_p0[od_idx, 1]) * np.sin(c_th)
                in_span = (along >= 0.0) & (along <= self.cor_seg_len[od_idx])
                exc_a = np.where(in_span, r_c - self.cor_arc_r[od_idx], 0.0)
                excess = np.where(on_ring & ar, np.maximum(excess, exc_a), excess)

        violating = excess > tol
        for k in np.nonzero(violating & ~self.in_violation)[0]:
            self._event("boundary_violation", int(self.ids[k]), value=float(excess[k]))
        self.in_violation = violating

    def _detectors(self, r_prev, phi_prev) -> None:
        r_new = np.hypot(self.x, self.y)
        phi_new = wrap_2pi(np.arctan2(self.y, self.x))
        on = (r_prev <= self.geometry.r_out) & (r_new <= self.geometry.r_out)
        if not on.any():
            return
        adv = wrap_2pi(phi_new[on] - phi_prev[on])
        # ignore numerically reversed or absurd jumps
        adv = np.where(adv < math.pi, adv, 0.0)
        off = wrap_2pi(self.detector_angles[None, :] - phi_prev[on][:, None])
        crossed = off < adv[:, None]
        self.detector_counts += crossed.sum(axis=0)

    def _finish_period_if_due(self) -> None:
        sc = self.scenario
        steps_per = max(1, int(round(sc.detector_period / sc.dt)))
        if (self.step_index + 1) % steps_per != 0:
            return
        r = np.hypot(self.x, self.y) if self.n else np.zeros(0)
        on = r <= self.geometry.r_out if self.n else np.zeros(0, dtype=bool)
        n_on = int(on.sum())
        mean_speed = float(self.v[on].mean()) if n_on else 0.0
        flows = self.detector_counts * (3600.0 / sc.detector_period)
        self.macro_samples.append(MacroSample(
            period=len(self.macro_samples),
            n_on_roundabout=n_on,
            n_exited=self.period_exited,
            mean_speed=mean_speed,
            mean_flow=float(flows.mean()),
        ))
        self.detector_counts = np.zeros(self.nb)
        self.period_exited = 0

    # ------------------------------------------------------------------ run

    def run(self, trajectory_cb: Optional[Callable[["World"], None]] = None) -> None:
        steps = int(round(self.scenario.duration / self.dt))
        sample_every = max(1, int(round(self.scenario.trajectory_sample / self.dt)))
        for k in range(steps):
            if trajectory_cb is not None and k % sample_every == 0:
                trajectory_cb(self)
            self.step()
        if trajectory_cb is not None:
            trajectory_cb(self)


def apply_policy(policy: str, vehicles: list[Vehicle],
                 entering_weight: float = 3.0) -> list[Vehicle]:
    """Spec-level priority assignment over materialised vehicles."""
    if policy not in (ROTATING_PRIORITY, ENTERING_PRIORITY):
        raise ValueError(f"unknown policy {policy!r}")
    out = []
    for veh in vehicles:
        w = entering_weight if policy == ENTERING_PRIORITY and veh.phase == "entering" \
            else 1.0
        out.append(replace(veh, priority_weight=w))
    return out


def measure_detectors(world: World, period: float) -> MacroSample:
    """Close the current detector period now and return its sample."""
    sc = world.scenario
    r = np.hypot(world.x, world.y) if world.n else np.zeros(0)
    on = r <= world.geometry.r_out if world.n else np.zeros(0, dtype=bool)
    n_on = int(on.sum())
    mean_speed = float(world.v[on].mean()) if n_on else 0.0
    flows = world.detector_counts * (3600.0 / period)
    sample = MacroSample(period=len(world.macro_samples), n_on_roundabout=n_on,
                         n_exited=world.period_exited, mean_speed=mean_speed,
                         mean_flow=float(flows.mean()))
    world.detector_counts = np.zeros(world.nb)
    world.period_exited = 0
    return sample
