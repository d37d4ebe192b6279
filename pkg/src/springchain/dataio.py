"""Trajectory-table ingestion and single-lane episode extraction.

Raw tables (e.g. camera-transcribed highway data at 10 Hz) are filtered down
to episodes: maximal time windows in which a fixed, contiguously ordered
chain of vehicles occupies one lane inside a road segment with no entries,
exits or reorderings.  Episodes feed the identifier in the same layout the
simulator exports.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as _signal

from .simulate import TrajectorySet, export_trajectories

__all__ = [
    "RawTrajectoryTable",
    "Episode",
    "load_table",
    "extract_episodes",
    "resample",
    "lowpass_accel",
    "validate_episode",
    "export_episode",
    "episode_to_trajectory",
]

log = logging.getLogger(__name__)

# 400-1600 ft in metres
DEFAULT_SEGMENT = (121.92, 487.68)

_REQUIRED_FIELDS = ("time", "vehicle_id", "position", "speed", "lane_id")
_OPTIONAL_FIELDS = ("preceding_id", "length")


@dataclass(frozen=True)
class RawTrajectoryTable:
    """Columnar trajectory records, sorted by (vehicle, time)."""

    time: np.ndarray
    vehicle_id: np.ndarray  # strings
    position: np.ndarray
    speed: np.ndarray
    lane_id: np.ndarray     # strings
    preceding_id: np.ndarray | None = None
    length: np.ndarray | None = None
    n_skipped: int = 0

    @property
    def n_records(self) -> int:
        return self.time.size


def _norm_column_spec(spec):
    """column_map values: "Name", ["Name", scale] or {"column":..,"scale":..}."""
    if isinstance(spec, str):
        return spec, 1.0
    if isinstance(spec, (list, tuple)) and len(spec) == 2:
        return str(spec[0]), float(spec[1])
    if isinstance(spec, dict):
        return str(spec["column"]), float(spec.get("scale", 1.0))
    raise ValueError(f"bad column specification: {spec!r}")


def load_table(path, column_map: dict) -> RawTrajectoryTable:
    """Read a delimited text table with a header row.

    column_map binds schema fields (time, vehicle_id, position, speed,
    lane_id, optionally preceding_id and length) to file columns, with
    optional unit-conversion factors, e.g. {"position": ["Local_Y", 0.3048]}.
    Rows with unparseable or non-finite numeric values are skipped and
    counted.
    """
    for key in _REQUIRED_FIELDS:
        if key not in column_map:
            raise ValueError(f"column_map is missing required field '{key}'")

    if hasattr(path, "read"):
        text = path.read()
    else:
        with open(path, newline="") as fh:
            text = fh.read()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        return RawTrajectoryTable(
            time=np.empty(0), vehicle_id=np.empty(0, dtype=object),
            position=np.empty(0), speed=np.empty(0),
            lane_id=np.empty(0, dtype=object),
        )

    delimiter = "\t" if "\t" in lines[0] else ","
    reader = csv.reader(lines, delimiter=delimiter)
    header = [h.strip() for h in next(reader)]
    col_idx = {}
    scale = {}
    for fld in _REQUIRED_FIELDS + _OPTIONAL_FIELDS:
        if fld not in column_map:
            continue
        name, fac = _norm_column_spec(column_map[fld])
        if name not in header:
            raise ValueError(f"mapped column '{name}' for '{fld}' not in header")
        col_idx[fld] = header.index(name)
        scale[fld] = fac

    numeric = ("time", "position", "speed", "length")
    rows = {fld: [] for fld in col_idx}
    skipped = 0
    for raw in reader:
        if not raw or all(not c.strip() for c in raw):
            continue
        try:
            parsed = {}
            for fld, ci in col_idx.items():
                cell = raw[ci].strip()
                if fld in numeric:
                    val = float(cell) * scale[fld]
                    if not math.isfinite(val):
                        raise ValueError
                    parsed[fld] = val
                else:
                    parsed[fld] = cell
        except (ValueError, IndexError):
            skipped += 1
            continue
        for fld, val in parsed.items():
            rows[fld].append(val)
    if skipped:
        log.warning("skipped %d unparseable rows", skipped)

    n = len(rows["time"])
    order = sorted(range(n), key=lambda i: (rows["vehicle_id"][i], rows["time"][i]))

    def col(fld, dtype=float):
        if fld not in rows:
            return None
        data = [rows[fld][i] for i in order]
        return np.array(data, dtype=dtype)

    # drop duplicate timestamps within a vehicle (time must strictly increase)
    vid = col("vehicle_id", object)
    t = col("time")
    keep = np.ones(n, dtype=bool)
    for i in range(1, n):
        if vid[i] == vid[i - 1] and t[i] <= t[i - 1]:
            keep[i] = False
    dup = int(n - keep.sum())
    if dup:
        skipped += dup
        log.warning("dropped %d rows with non-increasing per-vehicle time", dup)

    def keepcol(arr):
        return None if arr is None else arr[keep]

    return RawTrajectoryTable(
        time=keepcol(t),
        vehicle_id=keepcol(vid),
        position=keepcol(col("position")),
        speed=keepcol(col("speed")),
        lane_id=keepcol(col("lane_id", object)),
        preceding_id=keepcol(col("preceding_id", object)),
        length=keepcol(col("length")),
        n_skipped=skipped,
    )


@dataclass(frozen=True)
class Episode:
    """A lane-change-free window of a fixed vehicle chain (lead first).

    speeds/positions have one row per chain member; headways hold the
    front-to-front gaps (lead length subtracted when known) for the N
    followers, i.e. headways[i] is the gap ahead of chain member i+1.
    """

    chain_ids: tuple
    times: np.ndarray
    dt: float
    positions: np.ndarray  # (C, K)
    speeds: np.ndarray     # (C, K)
    headways: np.ndarray   # (C-1, K)
    lengths: np.ndarray    # (C,), nan when unknown
    segment: tuple = DEFAULT_SEGMENT

    @property
    def n_chain(self) -> int:
        return len(self.chain_ids)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def lead_speed(self) -> np.ndarray:
        return self.speeds[0]

    @property
    def follower_speeds(self) -> np.ndarray:
        return self.speeds[1:]


def _headways_from_positions(positions: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    gaps = positions[:-1] - positions[1:]
    lead_len = lengths[:-1].copy()
    lead_len[~np.isfinite(lead_len)] = 0.0
    return gaps - lead_len[:, None]


def extract_episodes(
    table: RawTrajectoryTable,
    lane_id,
    segment: tuple = DEFAULT_SEGMENT,
    min_duration: float = 30.0,
    min_chain: int = 3,
) -> list:
    """Cut a lane's records into constant-membership chain episodes.

    A window survives while the set of vehicles inside lane and segment stays
    identical frame to frame, keeps its front-to-back order, and spans at
    least min_duration with at least min_chain members.  Membership changes
    (lane changes, segment entries/exits) and sampling gaps split windows.
    Windows with non-positive headways are dropped and logged.
    """
    lane = str(lane_id)
    mask = table.lane_id == lane
    if segment is not None:
        mask &= (table.position >= segment[0]) & (table.position <= segment[1])
    if not np.any(mask):
        return []

    t = table.time[mask]
    vid = table.vehicle_id[mask]
    pos = table.position[mask]
    spd = table.speed[mask]

    veh_len = {}
    if table.length is not None:
        for v, ln in zip(table.vehicle_id, table.length):
            veh_len.setdefault(v, ln)

    frame_times = np.unique(t)
    if frame_times.size < 2:
        return []
    dt_native = float(np.median(np.diff(frame_times)))

    # per-frame membership tuples ordered lead (largest position) first
    frames = []
    for ft in frame_times:
        sel = t == ft
        order = np.argsort(-pos[sel])
        ids = tuple(vid[sel][order])
        frames.append((float(ft), ids, pos[sel][order], spd[sel][order]))

    episodes = []

    def flush(run):
        if len(run) < 2:
            return
        ids = run[0][1]
        if len(ids) < min_chain:
            return
        times = np.array([f[0] for f in run])
        if times[-1] - times[0] < min_duration:
            return
        positions = np.stack([f[2] for f in run], axis=1)
        speeds = np.stack([f[3] for f in run], axis=1)
        lengths = np.array([veh_len.get(v, np.nan) for v in ids], dtype=float)
        headways = _headways_from_positions(positions, lengths)
        if np.any(headways <= 0):
            log.warning(
                "dropping window at t=%.1f: non-positive headway in chain %s",
                times[0], ids,
            )
            return
        episodes.append(
            Episode(
                chain_ids=ids, times=times, dt=dt_native, positions=positions,
                speeds=speeds, headways=headways, lengths=lengths,
                segment=tuple(segment) if segment is not None else None,
            )
        )

    run = [frames[0]]
    for prev, cur in zip(frames, frames[1:]):
        gap = cur[0] - prev[0]
        # identical membership and a native-rate step; sampling gaps and any
        # entry/exit/reordering start a new window
        same = cur[1] == prev[1] and abs(gap - dt_native) <= 1e-3 * dt_native
        if same:
            run.append(cur)
        else:
            flush(run)
            run = [cur]
    flush(run)
    return episodes


def resample(episode: Episode, dt: float) -> list:
    """Linear interpolation onto a uniform dt grid.

    Sampling gaps wider than 2 dt split the episode; the parts are resampled
    independently.  Positions and speeds interpolate; headways are recomputed
    from the interpolated positions.
    """
    if not (dt > 0):
        raise ValueError("dt must be positive")
    times = episode.times
    # a gap is a hole relative to the coarser of target and source sampling
    gap_limit = 2.0 * max(dt, episode.dt) * (1.0 + 1e-9)
    cut = np.where(np.diff(times) > gap_limit)[0]
    bounds = np.concatenate([[0], cut + 1, [times.size]])
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b - a < 2:
            continue
        t_seg = times[a:b]
        n_pts = int(math.floor((t_seg[-1] - t_seg[0]) / dt + 1e-9)) + 1
        if n_pts < 2:
            continue
        grid = t_seg[0] + dt * np.arange(n_pts)
        positions = np.stack(
            [np.interp(grid, t_seg, episode.positions[i, a:b])
             for i in range(episode.n_chain)]
        )
        speeds = np.stack(
            [np.interp(grid, t_seg, episode.speeds[i, a:b])
             for i in range(episode.n_chain)]
        )
        headways = _headways_from_positions(positions, episode.lengths)
        out.append(
            Episode(
                chain_ids=episode.chain_ids, times=grid, dt=dt,
                positions=positions, speeds=speeds, headways=headways,
                lengths=episode.lengths, segment=episode.segment,
            )
        )
    return out


def validate_episode(episode: Episode, table: RawTrajectoryTable | None = None,
                     lane_id=None, rtol: float = 1e-3) -> None:
    """Independent re-check of the episode invariants; raises on violation.

    Checks uniform sampling, constant front-to-back ordering, positive
    headways and segment bounds.  Given the source table and lane, also
    re-verifies that the chain matches the lane-and-segment membership at
    every sampled time.
    """
    steps = np.diff(episode.times)
    if steps.size == 0:
        raise ValueError("episode has fewer than two samples")
    if np.any(np.abs(steps - episode.dt) > rtol * episode.dt):
        raise ValueError("episode is not uniformly sampled")
    if np.any(np.diff(episode.positions, axis=0) >= 0):
        raise ValueError("chain ordering violated (positions not decreasing)")
    if np.any(episode.headways <= 0):
        raise ValueError("non-positive headway")
    if episode.segment is not None:
        lo, hi = episode.segment
        if episode.positions.min() < lo - 1e-9 or episode.positions.max() > hi + 1e-9:
            raise ValueError("positions leave the segment bounds")
    if table is not None and lane_id is not None:
        lane = str(lane_id)
        sel = table.lane_id == lane
        if episode.segment is not None:
            lo, hi = episode.segment
            sel &= (table.position >= lo) & (table.position <= hi)
        for ft in episode.times:
            members = set(table.vehicle_id[sel & (np.abs(table.time - ft) < 1e-9)])
            if members != set(episode.chain_ids):
                raise ValueError(f"membership changed at t={ft}")


def lowpass_accel(series, dt: float, cutoff_hz: float, order: int = 2) -> np.ndarray:
    """Zero-phase low-pass filtering of a sampled series.

    A Butterworth filter of the given order is applied forward and backward,
    squaring the magnitude response and cancelling the phase; the DC
    component passes unchanged.  The cutoff must sit below Nyquist.
    """
    series = np.asarray(series, dtype=float)
    nyquist = 0.5 / dt
    if not (0 < cutoff_hz < nyquist):
        raise ValueError(f"cutoff {cutoff_hz} Hz must be inside (0, {nyquist}) Hz")
    b, a = _signal.butter(order, cutoff_hz, btype="low", fs=1.0 / dt)
    return _signal.filtfilt(b, a, series)


def episode_to_trajectory(episode: Episode) -> TrajectorySet:
    """View an episode in the simulator's trajectory layout.

    The lead vehicle plays the ghost; follower accelerations are backward
    speed differences with a zero first entry.
    """
    speeds = episode.follower_speeds
    accels = np.zeros_like(speeds)
    accels[:, 1:] = np.diff(speeds, axis=1) / episode.dt
    return TrajectorySet(
        time=episode.times - episode.times[0],
        ghost_speed=episode.lead_speed.copy(),
        speeds=speeds.copy(),
        headways=episode.headways.copy(),
        accels=accels,
        dt=episode.dt,
    )


def export_episode(episode: Episode, path) -> None:
    """Write an episode in the trajectory-table layout (identifier-ready)."""
    export_trajectories(episode_to_trajectory(episode), path)
