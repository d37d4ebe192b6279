"""Fixed-step delayed integration of the nonlinear chain and ghost signals.

Explicit Euler is the one and only integrator here: the identification stage
discretises the dynamics the same way, so simulator output and regressor
construction stay mutually consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ConstantGhost,
    FleetScenario,
    GhostSignal,
    RecordedGhost,
    SinusoidGhost,
    WhiteNoiseGhost,
    _accel_kernel,
    equilibrium,
    from_perturbation,
)

__all__ = [
    "SimulationDiverged",
    "HistoryBuffer",
    "TrajectorySet",
    "make_ghost",
    "simulate",
    "export_trajectories",
    "read_trajectory_table",
]

# hard ceiling on |v_i - v*| before the run is declared divergent [m/s]
DIVERGENCE_LIMIT = 1.0e3


class SimulationDiverged(RuntimeError):
    """Integration blew up (expected for plant-unstable parameter sets)."""

    def __init__(self, time: float):
        super().__init__(f"simulation diverged at t = {time:.3f} s")
        self.time = time


class HistoryBuffer:
    """Ring buffer of chain snapshots for delayed lookups.

    Depth covers the largest per-vehicle delay in steps; rows older than the
    simulation start hold the initial condition.
    """

    def __init__(self, n_vehicles: int, max_lag: int,
                 h0: np.ndarray, v0: np.ndarray, ghost0: float):
        self.depth = max_lag + 1
        self._h = np.tile(np.asarray(h0, dtype=float), (self.depth, 1))
        self._v = np.tile(np.asarray(v0, dtype=float), (self.depth, 1))
        self._g = np.full(self.depth, float(ghost0))
        self._head = 0

    def push(self, h: np.ndarray, v: np.ndarray, ghost: float):
        self._head = (self._head + 1) % self.depth
        self._h[self._head] = h
        self._v[self._head] = v
        self._g[self._head] = ghost

    def rows_at(self, lags: np.ndarray) -> np.ndarray:
        """Buffer row index holding the snapshot exactly `lag` steps old."""
        lags = np.asarray(lags)
        if np.any(lags >= self.depth) or np.any(lags < 0):
            raise IndexError("lag outside buffer depth")
        return (self._head - lags) % self.depth

    def lookup(self, lag: int):
        r = int(self.rows_at(np.array([lag]))[0])
        return self._h[r].copy(), self._v[r].copy(), float(self._g[r])

    @property
    def headways(self) -> np.ndarray:
        return self._h

    @property
    def speeds(self) -> np.ndarray:
        return self._v

    @property
    def ghost(self) -> np.ndarray:
        return self._g


@dataclass(frozen=True)
class TrajectorySet:
    """Recorded run: shared time grid, ghost speed, per-vehicle series.

    accels[i, k] = (speeds[i, k] - speeds[i, k-1]) / dt with accels[i, 0] = 0.
    """

    time: np.ndarray
    ghost_speed: np.ndarray
    speeds: np.ndarray      # (N, K+1)
    headways: np.ndarray    # (N, K+1)
    accels: np.ndarray      # (N, K+1)
    dt: float

    @property
    def n(self) -> int:
        return self.speeds.shape[0]


def make_ghost(signal: GhostSignal, time_grid: np.ndarray) -> np.ndarray:
    """Sample a ghost-speed signal on the given time grid."""
    t = np.asarray(time_grid, dtype=float)
    if isinstance(signal, ConstantGhost):
        return np.full(t.size, signal.base_speed)
    if isinstance(signal, SinusoidGhost):
        return signal.base_speed + signal.amplitude * np.sin(signal.omega * t)
    if isinstance(signal, WhiteNoiseGhost):
        rng = np.random.default_rng(signal.seed)
        return signal.base_speed + rng.normal(0.0, signal.std, size=t.size)
    if isinstance(signal, RecordedGhost):
        samples = np.asarray(signal.samples, dtype=float)
        if samples.size < t.size:
            raise ValueError(
                f"recorded trace has {samples.size} samples, grid needs {t.size}"
            )
        return samples[: t.size].copy()
    raise TypeError(f"unknown ghost signal {type(signal).__name__}")


def simulate(fleet: FleetScenario, initial_perturbation=None) -> TrajectorySet:
    """Integrate the delayed nonlinear chain with explicit Euler.

    initial_perturbation -- optional interleaved offset vector
    [dh_1, dv_1, ..., dh_N, dv_N] added to the uniform-flow equilibrium.

    Each vehicle's force balance reads the chain state d_i = round(tau_i/dt)
    steps back; headway kinematics always use current speeds.  Raises
    SimulationDiverged when any speed perturbation |v_i - v*| exceeds
    DIVERGENCE_LIMIT or turns non-finite.
    """
    n = fleet.n
    dt = fleet.dt
    n_steps = int(round(fleet.duration / dt))
    if n_steps < 2:
        raise ValueError("duration must cover at least two steps")
    tgrid = np.arange(n_steps + 1) * dt

    pa = fleet.param_arrays()
    lags = np.rint(pa["tau"] / dt).astype(int)
    ghost = make_ghost(fleet.ghost, tgrid)

    eq = equilibrium(fleet)
    if initial_perturbation is not None:
        state0 = from_perturbation(np.asarray(initial_perturbation, float), eq)
        h = state0.headways.copy()
        v = state0.speeds.copy()
    else:
        h = eq.headways.copy()
        v = eq.speeds.copy()

    hist = HistoryBuffer(n, int(lags.max()), h, v, ghost[0])

    speeds = np.empty((n, n_steps + 1))
    headways = np.empty((n, n_steps + 1))
    speeds[:, 0] = v
    headways[:, 0] = h

    idx = np.arange(n)
    v_star = fleet.initial_speed
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            rows = hist.rows_at(lags)
            hb, vb, gb = hist.headways, hist.speeds, hist.ghost
            h_own = hb[rows, idx]
            v_self = vb[rows, idx]
            v_pred = np.empty(n)
            v_pred[0] = gb[rows[0]]
            if n > 1:
                v_pred[1:] = vb[rows[1:], idx[:-1]]
            if n > 1:
                h_rear = np.zeros(n)
                v_rear = np.zeros(n)
                h_rear[:-1] = hb[rows[:-1], idx[1:]]
                v_rear[:-1] = vb[rows[:-1], idx[1:]]
            else:
                h_rear = v_rear = np.zeros(1)

            v_dot = _accel_kernel(pa, h_own, v_self, v_pred, h_rear, v_rear)
            v_ahead = np.concatenate(([ghost[k]], v[:-1]))
            h_dot = v_ahead - v

            h = h + dt * h_dot
            v = v + dt * v_dot

            bad = ~np.isfinite(v) | ~np.isfinite(h) | (np.abs(v - v_star) > DIVERGENCE_LIMIT)
            if np.any(bad):
                raise SimulationDiverged(time=(k + 1) * dt)

            hist.push(h, v, ghost[k + 1])
            speeds[:, k + 1] = v
            headways[:, k + 1] = h

    accels = np.zeros_like(speeds)
    accels[:, 1:] = np.diff(speeds, axis=1) / dt
    return TrajectorySet(
        time=tgrid, ghost_speed=ghost, speeds=speeds, headways=headways,
        accels=accels, dt=dt,
    )


def export_trajectories(traj: TrajectorySet, path) -> None:
    """Write a run as a comma-separated table.

    One row per step; columns: time, v0, then (h_i, v_i, a_i) per vehicle.
    """
    cols = ["time", "v0"]
    for i in range(1, traj.n + 1):
        cols += [f"h_{i}", f"v_{i}", f"a_{i}"]
    rows = [",".join(cols)]
    for k in range(traj.time.size):
        parts = [f"{traj.time[k]:.10g}", f"{traj.ghost_speed[k]:.10g}"]
        for i in range(traj.n):
            parts += [
                f"{traj.headways[i, k]:.10g}",
                f"{traj.speeds[i, k]:.10g}",
                f"{traj.accels[i, k]:.10g}",
            ]
        rows.append(",".join(parts))
    text = "\n".join(rows) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def read_trajectory_table(path) -> TrajectorySet:
    """Read a table produced by export_trajectories (or a dataio episode export)."""
    if hasattr(path, "read"):
        lines = path.read().splitlines()
    else:
        with open(path) as fh:
            lines = fh.read().splitlines()
    if not lines:
        raise ValueError("empty trajectory table")
    header = lines[0].split(",")
    if header[:2] != ["time", "v0"] or (len(header) - 2) % 3 != 0:
        raise ValueError("not a trajectory table: unexpected header")
    n = (len(header) - 2) // 3
    data = np.array(
        [[float(x) for x in ln.split(",")] for ln in lines[1:] if ln.strip()]
    )
    if data.shape[1] != len(header):
        raise ValueError("row width does not match header")
    time = data[:, 0]
    steps = np.diff(time)
    if steps.size == 0:
        raise ValueError("trajectory table needs at least two rows")
    dt = float(np.median(steps))
    if np.any(np.abs(steps - dt) > 1e-6 * max(dt, 1.0)):
        raise ValueError("trajectory table is not uniformly sampled")
    ghost = data[:, 1]
    headways = data[:, 2::3].T
    speeds = data[:, 3::3].T
    accels = data[:, 4::3].T
    return TrajectorySet(
        time=time, ghost_speed=ghost, speeds=speeds, headways=headways,
        accels=accels, dt=dt,
    )
