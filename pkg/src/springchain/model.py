"""Core types and dynamics of the mass-spring-damper car-following chain.

A chain of N vehicles follows a (possibly virtual) lead "ghost" vehicle in a
single lane.  Each vehicle is a rigid mass coupled to its neighbours by a
spring (gap error) and a damper (relative speed), acting after a per-driver
reaction delay.  The rear coupling is scaled down by an asymmetry factor so a
tailgating follower pushes its leader, but less than the other way round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "VehicleParams",
    "GhostSignal",
    "ConstantGhost",
    "SinusoidGhost",
    "WhiteNoiseGhost",
    "RecordedGhost",
    "FleetScenario",
    "ChainState",
    "spacing_policy",
    "eom_rhs",
    "equilibrium",
    "to_perturbation",
    "from_perturbation",
]


@dataclass(frozen=True)
class VehicleParams:
    """Per-vehicle driving-behaviour tuple.

    m      -- mass [kg]
    k      -- spring stiffness [N/m], pull toward the desired gap
    c      -- damping coefficient [N*s/m], pull toward the leader's speed
    alpha  -- rear-coupling scaling factor in [0, 1]; 0 removes the influence
              of the follower on this vehicle
    beta   -- desired time headway [s], slope of the linear spacing branch
    tau    -- reaction delay [s]
    v_lower, v_upper -- speed thresholds of the linear spacing region [m/s]

    k and c may be any finite reals: stability sweeps deliberately probe
    negative values.
    """

    m: float
    k: float
    c: float
    alpha: float = 0.0
    beta: float = 1.0
    tau: float = 0.0
    v_lower: float = 2.0
    v_upper: float = 40.0

    def __post_init__(self):
        if not (self.m > 0):
            raise ValueError(f"mass must be positive, got {self.m}")
        if not (self.beta > 0):
            raise ValueError(f"time headway must be positive, got {self.beta}")
        if not (self.tau >= 0):
            raise ValueError(f"delay must be non-negative, got {self.tau}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"rear-coupling factor must be in [0, 1], got {self.alpha}")
        if not (0.0 <= self.v_lower < self.v_upper):
            raise ValueError(
                f"need 0 <= v_lower < v_upper, got [{self.v_lower}, {self.v_upper}]"
            )
        for name in ("m", "k", "c", "alpha", "beta", "tau"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def x_min(self) -> float:
        """Saturated spacing below the lower speed threshold [m]."""
        return self.beta * self.v_lower

    @property
    def x_max(self) -> float:
        """Saturated spacing above the upper speed threshold [m]."""
        return self.beta * self.v_upper


class GhostSignal:
    """Marker base class for the lead-vehicle speed disturbance."""


@dataclass(frozen=True)
class ConstantGhost(GhostSignal):
    base_speed: float


@dataclass(frozen=True)
class SinusoidGhost(GhostSignal):
    base_speed: float
    amplitude: float
    omega: float  # [rad/s]

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")


@dataclass(frozen=True)
class WhiteNoiseGhost(GhostSignal):
    base_speed: float
    std: float
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("noise std must be non-negative")


@dataclass(frozen=True)
class RecordedGhost(GhostSignal):
    """Verbatim speed samples, one per integration step."""

    samples: tuple

    def __init__(self, samples):
        object.__setattr__(self, "samples", tuple(float(s) for s in samples))


@dataclass(frozen=True)
class ChainState:
    """Headways h[i] (gap to the vehicle ahead) and speeds v[i], i = 1..N."""

    headways: np.ndarray
    speeds: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "headways", np.asarray(self.headways, dtype=float))
        object.__setattr__(self, "speeds", np.asarray(self.speeds, dtype=float))
        if self.headways.shape != self.speeds.shape or self.headways.ndim != 1:
            raise ValueError("headways and speeds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(self.headways)) and np.all(np.isfinite(self.speeds))):
            raise ValueError("state entries must be finite")

    @property
    def n(self) -> int:
        return self.headways.size


@dataclass(frozen=True)
class FleetScenario:
    """An ordered vehicle chain plus the ghost input and integration settings.

    vehicles[0] is directly behind the ghost vehicle; vehicles[-1] is the tail.
    """

    vehicles: tuple
    ghost: GhostSignal
    dt: float = 0.1
    duration: float = 100.0
    initial_speed: float = 20.0

    def __init__(self, vehicles, ghost, dt=0.1, duration=100.0, initial_speed=20.0):
        object.__setattr__(self, "vehicles", tuple(vehicles))
        object.__setattr__(self, "ghost", ghost)
        object.__setattr__(self, "dt", float(dt))
        object.__setattr__(self, "duration", float(duration))
        object.__setattr__(self, "initial_speed", float(initial_speed))
        if len(self.vehicles) < 1:
            raise ValueError("need at least one vehicle")
        if not all(isinstance(v, VehicleParams) for v in self.vehicles):
            raise TypeError("vehicles must be VehicleParams instances")
        if not (self.dt > 0):
            raise ValueError("dt must be positive")
        if not (self.duration >= self.dt):
            raise ValueError("duration must cover at least one step")
        for i, v in enumerate(self.vehicles):
            if not (v.v_lower <= self.initial_speed <= v.v_upper):
                raise ValueError(
                    f"initial speed {self.initial_speed} outside the linear spacing "
                    f"region [{v.v_lower}, {v.v_upper}] of vehicle {i + 1}"
                )

    @property
    def n(self) -> int:
        return len(self.vehicles)

    def param_arrays(self) -> dict:
        """Stacked per-vehicle parameters for vectorised kernels."""
        vs = self.vehicles
        return {
            name: np.array([getattr(v, name) for v in vs], dtype=float)
            for name in ("m", "k", "c", "alpha", "beta", "tau", "v_lower", "v_upper")
        }


def spacing_policy(p: VehicleParams, v):
    """Desired gap behind the leader as a function of own speed.

    Piecewise linear: saturated at beta*v_lower below the lower threshold,
    beta*v in the linear region, beta*v_upper above.  Continuous in v.
    Accepts a scalar or an ndarray of speeds.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("speed must be finite")
    out = np.clip(v, p.v_lower, p.v_upper) * p.beta
    return float(out) if out.ndim == 0 else out


def _spacing_arrays(beta, v_lower, v_upper, v):
    """spacing_policy with per-vehicle parameter arrays (simulation hot path)."""
    return np.clip(v, v_lower, v_upper) * beta


def _accel_kernel(pa, h_own, v_self, v_pred, h_rear, v_rear):
    """Spring-damper force balance per unit mass.

    All state arguments are delayed quantities, each vehicle evaluated at its
    own lag.  h_rear/v_rear carry the state of the follower behind vehicle i
    (entries for the last vehicle are ignored, its rear coupling is zero).
    """
    k, c, m = pa["k"], pa["c"], pa["m"]
    alpha, beta = pa["alpha"], pa["beta"]
    x_own = _spacing_arrays(beta, pa["v_lower"], pa["v_upper"], v_self)
    force = k * (h_own - x_own) + c * (v_pred - v_self)
    if k.size > 1:
        x_rear = _spacing_arrays(
            beta[1:], pa["v_lower"][1:], pa["v_upper"][1:], v_rear[:-1]
        )
        force[:-1] -= alpha[:-1] * (
            k[1:] * (h_rear[:-1] - x_rear) + c[1:] * (v_self[:-1] - v_rear[:-1])
        )
    return force / m


def eom_rhs(fleet: FleetScenario, now: ChainState, delayed, ghost_speed_now: float,
            ghost_speed_delayed: float):
    """Right-hand side of the delayed equations of motion.

    delayed            -- sequence of N ChainState snapshots, entry i taken at
                          t - tau_i (vehicle i's own reaction delay)
    ghost_speed_now    -- ghost speed at the current time (headway kinematics)
    ghost_speed_delayed-- ghost speed at t - tau_1 (vehicle 1's force balance)

    Returns (h_dot, v_dot).  Headway kinematics use current-time speeds; every
    force-balance term of vehicle i is read from its own delayed snapshot.
    """
    n = fleet.n
    pa = fleet.param_arrays()
    if len(delayed) != n:
        raise ValueError("need one delayed snapshot per vehicle")

    h_own = np.array([delayed[i].headways[i] for i in range(n)])
    v_self = np.array([delayed[i].speeds[i] for i in range(n)])
    v_pred = np.array(
        [ghost_speed_delayed if i == 0 else delayed[i].speeds[i - 1] for i in range(n)]
    )
    h_rear = np.array(
        [delayed[i].headways[i + 1] if i < n - 1 else 0.0 for i in range(n)]
    )
    v_rear = np.array(
        [delayed[i].speeds[i + 1] if i < n - 1 else 0.0 for i in range(n)]
    )

    v_dot = _accel_kernel(pa, h_own, v_self, v_pred, h_rear, v_rear)
    v_ahead = np.concatenate(([ghost_speed_now], now.speeds[:-1]))
    h_dot = v_ahead - now.speeds
    return h_dot, v_dot


def equilibrium(fleet: FleetScenario, v0_star: float | None = None) -> ChainState:
    """Uniform-flow equilibrium: every speed equals v0*, gaps at beta_i * v0*.

    Rejects speeds outside any vehicle's linear spacing region; the linear
    gap formula does not hold on the saturated branches.
    """
    v0 = fleet.initial_speed if v0_star is None else float(v0_star)
    for i, veh in enumerate(fleet.vehicles):
        if not (veh.v_lower <= v0 <= veh.v_upper):
            raise ValueError(
                f"equilibrium speed {v0} outside linear region "
                f"[{veh.v_lower}, {veh.v_upper}] of vehicle {i + 1}"
            )
    beta = np.array([v.beta for v in fleet.vehicles])
    n = fleet.n
    return ChainState(headways=beta * v0, speeds=np.full(n, v0), time=0.0)


def to_perturbation(state: ChainState, eq: ChainState) -> np.ndarray:
    """Interleaved deviation vector [h~_1, v~_1, ..., h~_N, v~_N]."""
    if state.n != eq.n:
        raise ValueError("state and equilibrium sizes differ")
    x = np.empty(2 * state.n)
    x[0::2] = state.headways - eq.headways
    x[1::2] = state.speeds - eq.speeds
    return x


def from_perturbation(x: np.ndarray, eq: ChainState, time: float = 0.0) -> ChainState:
    """Exact inverse of to_perturbation."""
    x = np.asarray(x, dtype=float)
    if x.shape != (2 * eq.n,):
        raise ValueError(f"expected perturbation vector of length {2 * eq.n}")
    return ChainState(
        headways=eq.headways + x[0::2], speeds=eq.speeds + x[1::2], time=time
    )
