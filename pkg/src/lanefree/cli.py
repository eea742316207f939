"""Scenario configuration, run orchestration, CSV outputs, and plots.

The scenario file is JSON; every key is optional and defaults to the case
study (84/46 m annulus, 12 branches, published controller constants).
Unknown keys are hard errors so typos cannot silently fall back to defaults.
Angle-valued keys accept either radians (number) or a "<degrees>deg" string.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from . import svgplot
from .adaptation import DensityParams
from .control_circular import CircularParams
from .control_straight import StraightParams
from .dynamics import VehicleShape
from .engine import (Demand, PresetVehicle, Scenario, World,
                     ENTERING_PRIORITY, ROTATING_PRIORITY, PHASE_NAMES)
from .envelope import BoundaryGains, Limits
from .geometry import Branch, RoundaboutGeometry, default_geometry
from .safety import SafetyParams


class ConfigError(ValueError):
    pass


def _angle(value, path: str) -> float:
    if isinstance(value, str):
        if value.endswith("deg"):
            try:
                return math.radians(float(value[:-3]))
            except ValueError:
                pass
        raise ConfigError(f"{path}: expected radians or '<num>deg', got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    raise ConfigError(f"{path}: expected an angle, got {value!r}")


def _take(section: dict, path: str, allowed: dict) -> dict:
    """Pop known keys with converters; any leftover key is an error."""
    out = {}
    for key, conv in allowed.items():
        if key in section:
            raw = section.pop(key)
            out[key] = conv(raw, f"{path}.{key}") if conv is _angle else conv(raw)
    if section:
        bad = sorted(section)[0]
        raise ConfigError(f"unknown config key: {path}.{bad}")
    return out


def _num(x):
    if not isinstance(x, (int, float)) or isinstance(x, bool):
        raise ConfigError(f"expected a number, got {x!r}")
    return float(x)


def _boolean(x):
    if not isinstance(x, bool):
        raise ConfigError(f"expected a boolean, got {x!r}")
    return x


def _pair(x):
    if not (isinstance(x, list) and len(x) == 2):
        raise ConfigError(f"expected a pair, got {x!r}")
    return (float(x[0]), float(x[1]))


def parse_config(text: str) -> Scenario:
    """Parse a JSON scenario document into a fully defaulted Scenario."""
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("scenario root must be an object")

    geometry = _parse_geometry(doc.pop("geometry", {}))
    shape = VehicleShape(**_take(doc.pop("vehicle", {}), "vehicle",
                                 {"length": _num, "width": _num}))

    lim_kw = _take(doc.pop("limits", {}), "limits",
                   {"f_min": _num, "f_max": _num, "delta_max": _angle,
                    "v_max": _num})
    v_max = lim_kw.pop("v_max", 25.0)
    limits = Limits(**lim_kw)

    speeds = _take(doc.pop("speeds", {}), "speeds",
                   {"v_star": _num, "omega_star": _num,
                    "track_linear_speed": _boolean})
    v_star = speeds.get("v_star", 12.0)
    omega_star = speeds.get("omega_star", 0.143)
    track_linear = speeds.get("track_linear_speed", False)

    st_common = {"v_star": v_star, "v_max": v_max}
    st_doc = doc.pop("straight", {})
    st_shared = _take(st_doc if isinstance(st_doc, dict) else {}, "straight",
                      {"A": _num, "p": _num, "gamma1_base": _num,
                       "gamma1_speed": _num, "gamma2": _num, "gamma3": _num,
                       "eps_f": _num,
                       "entering": lambda x: x, "exiting": lambda x: x})
    st_ent_over = st_shared.pop("entering", {})
    st_exi_over = st_shared.pop("exiting", {})
    phase_keys = {"mu1": _num, "mu2": _num, "Theta": _angle}

    def straight(defaults: dict, over: dict, path: str) -> StraightParams:
        kw = dict(st_common)
        kw.update(st_shared)
        kw.update(defaults)
        kw.update(_take(dict(over), path, phase_keys))
        return StraightParams(**kw)

    straight_entering = straight(
        {"mu1": 0.3, "mu2": 0.1, "Theta": math.radians(10.0)},
        st_ent_over, "straight.entering")
    straight_exiting = straight(
        {"mu1": 3.0, "mu2": 7.0, "Theta": math.radians(80.0)},
        st_exi_over, "straight.exiting")

    ci_doc = doc.pop("circular", {})
    ci_shared = _take(ci_doc if isinstance(ci_doc, dict) else {}, "circular",
                      {"A": _num, "b": _num, "q": _num, "lambda_visc": _num,
                       "p": _num, "gamma1_base": _num, "gamma1_speed": _num,
                       "gamma3": _num, "eps_f": _num,
                       "use_speed_viscous": _boolean, "mu1": _num,
                       "entering": lambda x: x, "rotating": lambda x: x,
                       "exiting": lambda x: x})
    ci_ent_over = ci_shared.pop("entering", {})
    ci_rot_over = ci_shared.pop("rotating", {})
    ci_exi_over = ci_shared.pop("exiting", {})
    ci_common = {"v_star": v_star, "omega_star": omega_star, "v_max": v_max,
                 "track_linear_speed": track_linear}
    ci_phase_keys = {"mu1": _num, "mu2": _num, "Theta": _angle, "gamma2": _num}

    def circ(defaults: dict, over: dict, path: str) -> CircularParams:
        kw = dict(defaults)
        kw.update(ci_shared)
        kw.update(_take(dict(over), path, ci_phase_keys))
        return CircularParams(**ci_common, **kw)

    circular_entering = circ({"mu2": 80.0, "gamma2": 3.5,
                              "Theta": math.radians(80.0)},
                             ci_ent_over, "circular.entering")
    circular_rotating = circ({"mu2": 40.0, "gamma2": 6.0,
                              "Theta": math.radians(50.0)},
                             ci_rot_over, "circular.rotating")
    circular_exiting = circ({"mu2": 80.0, "gamma2": 3.5,
                             "Theta": math.radians(80.0)},
                            ci_exi_over, "circular.exiting")

    bd = _take(doc.pop("boundary", {}), "boundary",
               {"mode": str, "eigenvalues": _pair, "k_straight": _pair,
                "k_circular": _pair, "activation_band": _num})
    activation_band = bd.pop("activation_band", 3.0)
    gains = BoundaryGains(**bd)

    sf = _take(doc.pop("safety", {}), "safety",
               {"d0_circular": _num, "d1_circular": _num, "d0_straight": _num,
                "d1_straight": _num, "d_s": _num, "k_s": _pair, "w_th": _num,
                "circular_class_threshold": _angle})
    safety = SafetyParams(**sf)

    de = _take(doc.pop("density", {}), "density",
               {"rect_length": _num, "rect_width": _num, "eta": _num,
                "sigma_safety": _num, "w_safety": _num, "lambda_s": _num,
                "lambda_r": _num, "sector_span": _angle,
                "refresh_period": _num})
    density_refresh = de.pop("refresh_period", 0.5)
    density = DensityParams(**de)

    co = _take(doc.pop("corridor", {}), "corridor",
               {"phi_b": _angle, "min_width": _num})
    gu = _take(doc.pop("guidance", {}), "guidance",
               {"alpha_range": _pair, "merge_blend_zone": _num})

    policy = doc.pop("policy", ROTATING_PRIORITY)
    if policy not in (ROTATING_PRIORITY, ENTERING_PRIORITY):
        raise ConfigError(f"policy must be 'rotating' or 'entering', got {policy!r}")
    entering_weight = _num(doc.pop("entering_weight", 3.0))

    demand = _parse_demand(doc.pop("demand", {}))
    presets = _parse_presets(doc.pop("vehicles", []), geometry)

    run_kw = _take(doc.pop("run", {}), "run",
                   {"dt": _num, "duration": _num, "seed": lambda x: int(x),
                    "detector_period": _num, "trajectory_sample": _num,
                    "violation_tolerance": _num, "neighbor_cutoff": _num})
    if doc:
        raise ConfigError(f"unknown config key: {sorted(doc)[0]}")

    scenario = Scenario(
        geometry=geometry, shape=shape, limits=limits,
        straight_entering=straight_entering, straight_exiting=straight_exiting,
        circular_entering=circular_entering, circular_rotating=circular_rotating,
        circular_exiting=circular_exiting,
        gains=gains, safety=safety, density=density,
        policy=policy, entering_weight=entering_weight,
        demand=demand, preset_vehicles=presets,
        activation_band=activation_band, density_refresh=density_refresh,
        **co_kwargs(co), **gu_kwargs(gu), **run_kw,
    )
    scenario.validate()
    return scenario


def co_kwargs(co: dict) -> dict:
    out = {}
    if "phi_b" in co:
        out["phi_b"] = co["phi_b"]
    if "min_width" in co:
        out["min_corridor_width"] = co["min_width"]
    return out


def gu_kwargs(gu: dict) -> dict:
    out = {}
    if "alpha_range" in gu:
        out["alpha_range"] = gu["alpha_range"]
    if "merge_blend_zone" in gu:
        out["merge_blend_zone"] = gu["merge_blend_zone"]
    return out


def _parse_geometry(section) -> RoundaboutGeometry:
    if not isinstance(section, dict):
        raise ConfigError("geometry must be an object")
    section = dict(section)
    r_in = _num(section.pop("r_in", 46.0))
    r_out = _num(section.pop("r_out", 84.0))
    raw_branches = section.pop("branches", None)
    if section:
        raise ConfigError(f"unknown config key: geometry.{sorted(section)[0]}")
    if raw_branches is None:
        if (r_in, r_out) == (46.0, 84.0):
            return default_geometry()
        branches = tuple(Branch(id=k, center_angle=k * math.pi / 6.0)
                         for k in range(12))
        return RoundaboutGeometry(r_in=r_in, r_out=r_out, branches=branches)
    branches = []
    for i, b in enumerate(raw_branches):
        kw = _take(dict(b), f"geometry.branches[{i}]",
                   {"id": lambda x: int(x), "center_angle": _angle,
                    "width": _num, "approach_length": _num,
                    "bidirectional": _boolean})
        kw.setdefault("id", i)
        branches.append(Branch(**kw))
    return RoundaboutGeometry(r_in=r_in, r_out=r_out, branches=tuple(branches))


def _parse_demand(section) -> Demand:
    kw = _take(dict(section), "demand", {"profile": lambda x: x})
    profile = kw.get("profile")
    if profile is None:
        return Demand()
    pts = []
    for p in profile:
        if not (isinstance(p, list) and len(p) == 2):
            raise ConfigError("demand.profile entries must be [time_s, veh_per_hour]")
        pts.append((float(p[0]), float(p[1])))
    return Demand(breakpoints=tuple(pts))


def _parse_presets(raw, geometry: RoundaboutGeometry) -> tuple:
    presets = []
    ids = {b.id for b in geometry.branches}
    for i, entry in enumerate(raw):
        kw = _take(dict(entry), f"vehicles[{i}]",
                   {"origin": lambda x: int(x), "dest": lambda x: int(x),
                    "time": _num, "alpha": _num, "speed": _num})
        if kw.get("origin") not in ids or kw.get("dest") not in ids:
            raise ConfigError(f"vehicles[{i}]: origin/dest must name existing branches")
        presets.append(PresetVehicle(origin=kw["origin"], dest=kw["dest"],
                                     spawn_time=kw.get("time", 0.0),
                                     alpha=kw.get("alpha"),
                                     speed=kw.get("speed")))
    return tuple(presets)


# ---------------------------------------------------------------------------
# run orchestration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    scenario_path: Optional[Path] = None
    seed: Optional[int] = None
    out_dir: Path = Path("out")
    policy: Optional[str] = None
    plots: bool = False
    duration: Optional[float] = None


def _f(x: float) -> str:
    return repr(float(x))


def run(config: RunConfig) -> int:
    """Execute a scenario and write all outputs; nonzero iff collisions occurred."""
    if config.scenario_path is not None:
        text = Path(config.scenario_path).read_text()
    else:
        text = "{}"
    scenario = parse_config(text)
    if config.seed is not None:
        scenario = replace(scenario, seed=config.seed)
    if config.policy is not None:
        scenario = replace(scenario, policy=config.policy)
    if config.duration is not None:
        scenario = replace(scenario, duration=config.duration)
    scenario.validate()

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    world = World(scenario)
    for w in world.warnings:
        print(f"warning: {w}", file=sys.stderr)

    rows: list[tuple] = []

    def record(wd: World) -> None:
        t = wd.time
        for k in range(wd.n):
            rows.append((t, int(wd.ids[k]), float(wd.x[k]), float(wd.y[k]),
                         float(wd.th[k]), float(wd.v[k]),
                         float(wd.accel_applied[k]), float(wd.steer_applied[k]),
                         PHASE_NAMES[int(wd.phase[k])]))

    t0 = time.perf_counter()
    world.run(trajectory_cb=record)
    wall = time.perf_counter() - t0

    _write_outputs(out, world, rows, wall)
    if config.plots:
        emit_plots(out, world, rows)

    collisions = world.event_counts().get("collision", 0)
    return 1 if collisions else 0


def _write_outputs(out: Path, world: World, rows: list, wall: float) -> None:
    with open(out / "trajectories.csv", "w") as f:
        f.write("t,id,x,y,theta,v,F,delta,phase\n")
        for r in rows:
            f.write(f"{_f(r[0])},{r[1]},{_f(r[2])},{_f(r[3])},{_f(r[4])},"
                    f"{_f(r[5])},{_f(r[6])},{_f(r[7])},{r[8]}\n")

    with open(out / "macro.csv", "w") as f:
        f.write("period,n_on_roundabout,n_exited,mean_speed,mean_flow\n")
        for m in world.macro_samples:
            f.write(f"{m.period},{m.n_on_roundabout},{m.n_exited},"
                    f"{_f(m.mean_speed)},{_f(m.mean_flow)}\n")

    with open(out / "fd.csv", "w") as f:
        f.write("n_on_roundabout,mean_flow,n_exited\n")
        for m in world.macro_samples:
            f.write(f"{m.n_on_roundabout},{_f(m.mean_flow)},{m.n_exited}\n")

    with open(out / "events.csv", "w") as f:
        f.write("time,kind,vehicle_a,vehicle_b,value\n")
        for e in world.events:
            f.write(f"{_f(e.time)},{e.kind},{e.vehicle_a},{e.vehicle_b},"
                    f"{_f(e.value)}\n")

    counts = world.event_counts()
    with open(out / "summary.txt", "w") as f:
        f.write(f"duration_s: {_f(world.scenario.duration)}\n")
        f.write(f"released: {world.total_released}\n")
        f.write(f"exited: {world.total_exited}\n")
        f.write(f"still_present: {world.n}\n")
        f.write(f"queued: {sum(len(q) for q in world.queues)}\n")
        f.write(f"max_abs_accel: {_f(world.max_abs_accel)}\n")
        f.write(f"max_abs_steer: {_f(world.max_abs_steer)}\n")
        for kind in ("collision", "vertex_test_miss", "boundary_violation",
                     "extra_lap", "envelope_squeeze", "theta_saturation"):
            f.write(f"events_{kind}: {counts.get(kind, 0)}\n")
        f.write(f"wall_clock_s: {wall:.3f}\n")


def emit_plots(out: Path, world: World, rows: list) -> None:
    """paths.svg, speeds.svg, fd.svg, macro.svg from recorded outputs."""
    tracks: dict[int, list] = {}
    speeds: dict[int, list] = {}
    for r in rows:
        tracks.setdefault(r[1], []).append((r[2], r[3]))
        speeds.setdefault(r[1], []).append((r[0], r[5]))
    (out / "paths.svg").write_text(svgplot.plot_paths(world.geometry, tracks))
    (out / "speeds.svg").write_text(
        svgplot.plot_series(speeds, "time [s]", "speed [m/s]"))
    fd_pts = [(m.n_on_roundabout, m.mean_flow) for m in world.macro_samples]
    (out / "fd.svg").write_text(
        svgplot.plot_scatter(fd_pts or [(0.0, 0.0)],
                             "vehicles on roundabout", "mean flow [veh/h]"))
    macro = {
        0: [(m.period, float(m.n_on_roundabout)) for m in world.macro_samples],
        1: [(m.period, m.mean_speed) for m in world.macro_samples],
        2: [(m.period, m.mean_flow / 60.0) for m in world.macro_samples],
        3: [(m.period, float(m.n_exited)) for m in world.macro_samples],
    }
    (out / "macro.svg").write_text(
        svgplot.plot_series(macro, "period", "count / speed / flow"))


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="lanefree",
        description="Deterministic lane-free roundabout microsimulation")
    parser.add_argument("--scenario", type=Path, default=None,
                        help="JSON scenario file (defaults to the case study)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=Path("out"))
    parser.add_argument("--policy", choices=[ROTATING_PRIORITY, ENTERING_PRIORITY],
                        default=None)
    parser.add_argument("--plots", action="store_true")
    parser.add_argument("--duration", type=float, default=None,
                        help="override run duration in seconds")
    args = parser.parse_args(argv)
    try:
        return run(RunConfig(scenario_path=args.scenario, seed=args.seed,
                             out_dir=args.out, policy=args.policy,
                             plots=args.plots, duration=args.duration))
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
