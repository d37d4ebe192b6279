"""Command-line interface: simulate, stability-map and identify subcommands.

All three read a single JSON configuration document; every numeric field is
validated against the owning type's invariants before any computation starts,
and outputs are plot-ready text tables plus a JSON run manifest.  Exit codes:
0 success, 1 invalid configuration, 2 runtime divergence or failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .dataio import (
    episode_to_trajectory,
    extract_episodes,
    load_table,
    lowpass_accel,
    resample,
)
from .identify import (
    IdentHyperParams,
    export_prediction_report,
    export_theta_trajectory,
    predict_and_score,
)
from .model import (
    ConstantGhost,
    FleetScenario,
    RecordedGhost,
    SinusoidGhost,
    VehicleParams,
    WhiteNoiseGhost,
)
from .simulate import (
    SimulationDiverged,
    TrajectorySet,
    export_trajectories,
    read_trajectory_table,
    simulate,
)
from .stability import GridSpec, export_stability_map, sweep

__all__ = ["main", "ConfigError", "load_config"]


class ConfigError(ValueError):
    """Invalid run configuration."""


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _require(section: dict, key: str, what: str):
    if key not in section:
        raise ConfigError(f"{what} is missing required key '{key}'")
    return section[key]


def _build_ghost(spec: dict, seed_override=None):
    kind = _require(spec, "type", "ghost")
    try:
        if kind == "constant":
            return ConstantGhost(float(_require(spec, "base_speed", "ghost")))
        if kind == "sinusoid":
            return SinusoidGhost(
                base_speed=float(_require(spec, "base_speed", "ghost")),
                amplitude=float(_require(spec, "amplitude", "ghost")),
                omega=float(_require(spec, "omega", "ghost")),
            )
        if kind == "white_noise":
            seed = spec.get("seed", 0) if seed_override is None else seed_override
            return WhiteNoiseGhost(
                base_speed=float(_require(spec, "base_speed", "ghost")),
                std=float(spec.get("std", 0.5)),
                seed=int(seed),
            )
        if kind == "recorded":
            path = _require(spec, "path", "recorded ghost")
            traj = read_trajectory_table(path)
            return RecordedGhost(traj.ghost_speed)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad ghost parameters: {exc}") from exc
    raise ConfigError(f"unknown ghost type '{kind}'")


_VEHICLE_KEYS = ("m", "k", "c", "alpha", "beta", "tau", "v_lower", "v_upper")


def _build_vehicles(section: dict):
    if "vehicles" in section:
        specs = section["vehicles"]
        if not isinstance(specs, list) or not specs:
            raise ConfigError("'vehicles' must be a non-empty list")
    else:
        count = int(_require(section, "count", "scenario"))
        if count < 1:
            raise ConfigError("vehicle count must be >= 1")
        specs = [dict(_require(section, "vehicle", "scenario"))] * count
    out = []
    for i, spec in enumerate(specs):
        unknown = set(spec) - set(_VEHICLE_KEYS)
        if unknown:
            raise ConfigError(f"vehicle {i + 1} has unknown keys {sorted(unknown)}")
        try:
            out.append(VehicleParams(**{k: float(v) for k, v in spec.items()}))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"vehicle {i + 1}: {exc}") from exc
    return out


def build_scenario(cfg: dict, seed_override=None) -> tuple:
    section = _require(cfg, "scenario", "config")
    vehicles = _build_vehicles(section)
    ghost = _build_ghost(_require(section, "ghost", "scenario"), seed_override)
    try:
        fleet = FleetScenario(
            vehicles,
            ghost,
            dt=float(section.get("dt", 0.1)),
            duration=float(section.get("duration", 100.0)),
            initial_speed=float(section.get("initial_speed", 20.0)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    pert = section.get("initial_perturbation")
    if pert is not None:
        pert = np.asarray(pert, dtype=float)
        if pert.shape != (2 * fleet.n,):
            raise ConfigError(
                "initial_perturbation must have length 2N "
                f"(= {2 * fleet.n}), got {pert.size}"
            )
    return fleet, pert


def _write_manifest(out_dir: str, command: str, cfg: dict, extra: dict) -> None:
    doc = {
        "tool": "springchain",
        "version": __version__,
        "command": command,
        "config": cfg,
    }
    doc.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _amplitude(series: np.ndarray) -> float:
    tail = series[series.size // 2 :]
    return 0.5 * (tail.max() - tail.min())


def cmd_simulate(cfg: dict, out_dir: str, seed=None) -> int:
    fleet, pert = build_scenario(cfg, seed_override=seed)
    os.makedirs(out_dir, exist_ok=True)
    try:
        traj = simulate(fleet, initial_perturbation=pert)
    except SimulationDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    export_trajectories(traj, os.path.join(out_dir, "trajectories.csv"))

    lines = ["vehicle,speed_amplitude,speed_std,mean_headway"]
    lines.append(
        f"0,{_amplitude(traj.ghost_speed):.10g},{traj.ghost_speed.std():.10g},"
    )
    for i in range(traj.n):
        lines.append(
            f"{i + 1},{_amplitude(traj.speeds[i]):.10g},"
            f"{traj.speeds[i].std():.10g},{traj.headways[i].mean():.10g}"
        )
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_manifest(out_dir, "simulate", cfg, {"seed": seed, "steps": int(traj.time.size)})
    print(f"simulated {fleet.n} vehicles for {fleet.duration} s -> {out_dir}")
    return 0


def build_sweep_inputs(cfg: dict):
    section = _require(cfg, "sweep", "config")
    try:
        count = int(section.get("count", 30))
        m = float(section.get("m", 1.0))
        beta = float(section.get("beta", 1.0))
        alpha = float(section.get("alpha", 0.2))
        delays = section.get("delays", 0.0)
        if isinstance(delays, list):
            delays = [float(x) for x in delays]
            if len(delays) != count:
                raise ConfigError("per-vehicle delays list must have length N")
        else:
            delays = float(delays)
        grid_cfg = section.get("grid", {})
        grid = GridSpec(
            lo=float(grid_cfg.get("lo", -9.9)),
            hi=float(grid_cfg.get("hi", 9.9)),
            step=float(grid_cfg.get("step", 0.1)),
        )
        if not (grid.step > 0 and grid.hi > grid.lo):
            raise ConfigError("sweep grid needs hi > lo and step > 0")
        pade_order = int(section.get("pade_order", 3))
        if pade_order < 1:
            raise ConfigError("pade_order must be >= 1")
        om = section.get("omega", {})
        omega = np.geomspace(
            float(om.get("lo", 1e-3)), float(om.get("hi", 1e2)),
            int(om.get("points", 2000)),
        )
        tol = float(section.get("gain_tol", 1e-6))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"sweep: {exc}") from exc

    vehicles = [
        VehicleParams(m=m, k=m, c=m, alpha=alpha, beta=beta, tau=0.0)
        for _ in range(count)
    ]
    template = FleetScenario(vehicles, ConstantGhost(20.0), dt=0.1, duration=1.0,
                             initial_speed=20.0)
    return template, grid, delays, pade_order, omega, tol


def cmd_stability_map(cfg: dict, out_dir: str, threads: int) -> int:
    template, grid, delays, pade_order, omega, tol = build_sweep_inputs(cfg)
    os.makedirs(out_dir, exist_ok=True)
    smap = sweep(
        template, grid, delays=delays, pade_order=pade_order,
        omega_grid=omega, tol=tol, workers=threads,
    )
    export_stability_map(smap, os.path.join(out_dir, "stability_map.csv"))
    _write_manifest(out_dir, "stability-map", cfg, {"map_meta": smap.meta})
    for name, count in sorted(smap.counts().items()):
        print(f"{name}: {count}")
    return 0


def build_identify_inputs(cfg: dict):
    section = _require(cfg, "identify", "config")
    hyper = section.get("hyper", {})
    unknown = set(hyper) - {
        "mass", "alpha", "beta", "lam", "delta", "d", "dt", "v_lower", "v_upper",
    }
    if unknown:
        raise ConfigError(f"identify.hyper has unknown keys {sorted(unknown)}")
    try:
        hp = IdentHyperParams(**{
            k: (int(v) if k == "d" else float(v)) for k, v in hyper.items()
        })
        warmup = int(section.get("warmup", 100))
        if warmup < 0:
            raise ConfigError("warmup must be non-negative")
        lowpass_hz = section.get("lowpass_hz")
        if lowpass_hz is not None:
            lowpass_hz = float(lowpass_hz)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"identify: {exc}") from exc
    if "episodes" not in section and "raw" not in section:
        raise ConfigError("identify needs 'episodes' (paths) or a 'raw' table section")
    return section, hp, warmup, lowpass_hz


def _episodes_from_config(section: dict, hp: IdentHyperParams) -> list:
    episodes = []
    for path in section.get("episodes", []):
        episodes.append(read_trajectory_table(path))
    if "raw" in section:
        raw = section["raw"]
        table = load_table(_require(raw, "path", "identify.raw"),
                           _require(raw, "column_map", "identify.raw"))
        segment = raw.get("segment", [121.92, 487.68])
        found = extract_episodes(
            table,
            _require(raw, "lane_id", "identify.raw"),
            segment=tuple(float(x) for x in segment),
            min_duration=float(raw.get("min_duration", 30.0)),
            min_chain=int(raw.get("min_chain", 3)),
        )
        target_dt = float(raw.get("resample_dt", hp.dt))
        for ep in found:
            episodes.extend(resample(ep, target_dt))
    return episodes


def _filter_speeds(traj, lowpass_hz: float):
    """Zero-phase low-pass on every speed series of an episode."""
    speeds = np.stack([lowpass_accel(s, traj.dt, lowpass_hz) for s in traj.speeds])
    ghost = lowpass_accel(traj.ghost_speed, traj.dt, lowpass_hz)
    accels = np.zeros_like(speeds)
    accels[:, 1:] = np.diff(speeds, axis=1) / traj.dt
    return TrajectorySet(
        time=traj.time, ghost_speed=ghost, speeds=speeds,
        headways=traj.headways, accels=accels, dt=traj.dt,
    )


def cmd_identify(cfg: dict, out_dir: str) -> int:
    section, hp, warmup, lowpass_hz = build_identify_inputs(cfg)
    episodes = _episodes_from_config(section, hp)
    if not episodes:
        print("error: no valid episodes in the input data", file=sys.stderr)
        return 2
    os.makedirs(out_dir, exist_ok=True)
    summary = []
    for i, ep in enumerate(episodes, start=1):
        traj = ep if hasattr(ep, "ghost_speed") else episode_to_trajectory(ep)
        if lowpass_hz is not None:
            traj = _filter_speeds(traj, lowpass_hz)
        report = predict_and_score(traj, hp, warmup=warmup)
        export_theta_trajectory(
            report, os.path.join(out_dir, f"theta_trajectory_{i}.csv"))
        export_prediction_report(
            report, os.path.join(out_dir, f"prediction_report_{i}.json"))
        summary.append((i, traj.n, report.avg_rmse, report.worst_rmse))
        print(
            f"episode {i}: {traj.n} vehicles, "
            f"avg RMSE {report.avg_rmse:.4f}, worst {report.worst_rmse:.4f} m/s^2"
        )
    _write_manifest(out_dir, "identify", cfg, {
        "episodes": [
            {"index": i, "vehicles": n, "avg_rmse": round(a, 10),
             "worst_rmse": round(w, 10)}
            for i, n, a, w in summary
        ],
    })
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="springchain",
        description="Mass-spring-damper car-following chains: simulation, "
                    "stability maps, online identification.",
    )
    parser.add_argument("command", choices=["simulate", "stability-map", "identify"])
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the stochastic ghost seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes for the sweep")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        out_dir = args.out or cfg.get("output", {}).get("directory", "out")
        threads = args.threads or int(cfg.get("output", {}).get("threads", 1))
        # validate the relevant sections before touching the filesystem
        if args.command == "simulate":
            build_scenario(cfg, seed_override=args.seed)
            return cmd_simulate(cfg, out_dir, seed=args.seed)
        if args.command == "stability-map":
            build_sweep_inputs(cfg)
            return cmd_stability_map(cfg, out_dir, threads)
        build_identify_inputs(cfg)
        return cmd_identify(cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
