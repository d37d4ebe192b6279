"""Online identification of per-vehicle stiffness/damping from trajectories.

The discretised force balances are linear in theta = [k_1, c_1, ..., k_N, c_N]
once mass, time headway and the rear-coupling factor are fixed and shared
across vehicles: z(k) = Phi(k) theta, with z the measured accelerations
(times mass) and Phi built from delayed gaps and relative speeds.

The recursive estimator updates theta one Phi-row at a time through an
inverse-QR square-root recursion with exponential forgetting.  A directly
solved exponentially-weighted least-squares problem serves as the ground
truth the recursion is tested against.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import _spacing_arrays

__all__ = [
    "IdentHyperParams",
    "EstimatorState",
    "RegressorSample",
    "build_regressor",
    "srls_iqr_step",
    "srls_iqr_epoch",
    "batch_wls_oracle",
    "predict_and_score",
    "PredictionReport",
    "export_theta_trajectory",
    "export_prediction_report",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IdentHyperParams:
    """Estimator hyper-parameters (defaults follow the validated setup:
    unit mass, alpha 0.1, 2.5 s headway, forgetting 0.95, init scale 100,
    5 delay steps at 10 Hz)."""

    mass: float = 1.0
    alpha: float = 0.1
    beta: float = 2.5
    lam: float = 0.95
    delta: float = 100.0
    d: int = 5
    dt: float = 0.1
    v_lower: float = 2.0
    v_upper: float = 40.0

    def __post_init__(self):
        if not (0.0 < self.lam <= 1.0):
            raise ValueError("forgetting factor must be in (0, 1]")
        if not (self.delta > 0):
            raise ValueError("init parameter delta must be positive")
        if self.d < 0:
            raise ValueError("delay steps must be non-negative")
        if not (self.mass > 0 and self.dt > 0):
            raise ValueError("mass and dt must be positive")


@dataclass(frozen=True)
class EstimatorState:
    """Parameter vector and lower-triangular inverse factor of the
    square-root recursion (s_factor = R^{-T}, initialised to delta * I)."""

    theta: np.ndarray
    s_factor: np.ndarray
    step_count: int = 0

    @classmethod
    def fresh(cls, dim: int, delta: float = 100.0) -> "EstimatorState":
        return cls(theta=np.zeros(dim), s_factor=delta * np.eye(dim), step_count=0)

    @property
    def dim(self) -> int:
        return self.theta.size

    def check(self):
        """Structural invariants: lower-triangular factor, positive diagonal,
        finite entries."""
        s = self.s_factor
        if not np.all(np.isfinite(self.theta)) or not np.all(np.isfinite(s)):
            raise AssertionError("non-finite estimator state")
        if np.any(np.triu(s, 1) != 0.0):
            raise AssertionError("inverse factor lost lower-triangular form")
        if np.any(np.diag(s) <= 0.0):
            raise AssertionError("inverse factor diagonal not positive")


@dataclass(frozen=True)
class RegressorSample:
    """One time step of the linear-in-parameters form: z = phi @ theta.

    Row i of phi touches only the columns of vehicle i's own (k, c) and,
    except for the last vehicle, its follower's (k, c) scaled by -alpha.
    """

    phi: np.ndarray  # (N, 2N)
    z: np.ndarray    # (N,)
    step: int


def regression_series(episode):
    """(dt, lead speed, follower speeds (N,K), headways (N,K)) from either a
    simulator TrajectorySet or a dataio Episode."""
    if hasattr(episode, "ghost_speed"):
        return episode.dt, episode.ghost_speed, episode.speeds, episode.headways
    if hasattr(episode, "chain_ids"):
        return episode.dt, episode.speeds[0], episode.speeds[1:], episode.headways
    raise TypeError(f"cannot extract regression series from {type(episode).__name__}")


def build_regressor(episode, hp: IdentHyperParams):
    """Regressor stream for an episode sampled uniformly at hp.dt.

    For vehicle i at step k the own columns hold the delayed gap error and
    relative speed; the follower columns (i < N) hold the same quantities one
    vehicle back, scaled by -alpha.  The output is mass times the one-step
    speed difference over dt.  Steps with non-finite entries are skipped and
    logged.

    On simulator output, the speed difference across [k-1, k] was driven by
    the state d_sim steps before k-1, so hp.d = d_sim + 1 makes z = phi theta
    hold exactly.
    """
    dt, v_lead, v_f, headways = regression_series(episode)
    if abs(dt - hp.dt) > 1e-9 * max(hp.dt, 1.0):
        raise ValueError(f"episode dt {dt} does not match hyper-parameter dt {hp.dt}")
    n, total = v_f.shape
    d = hp.d
    samples = []
    skipped = 0
    idx = np.arange(n)
    for k in range(max(d, 1), total):
        vk = v_f[:, k]
        vk1 = v_f[:, k - 1]
        h_del = headways[:, k - d]
        v_del = v_f[:, k - d]
        v_pred_del = np.concatenate(([v_lead[k - d]], v_f[:-1, k - d]))
        vals = (vk, vk1, h_del, v_del, v_pred_del)
        if not all(np.all(np.isfinite(a)) for a in vals):
            skipped += 1
            continue
        gap_err = h_del - _spacing_arrays(hp.beta, hp.v_lower, hp.v_upper, v_del)
        rel_speed = v_pred_del - v_del
        phi = np.zeros((n, 2 * n))
        phi[idx, 2 * idx] = gap_err
        phi[idx, 2 * idx + 1] = rel_speed
        if n > 1:
            phi[idx[:-1], 2 * idx[:-1] + 2] = -hp.alpha * gap_err[1:]
            phi[idx[:-1], 2 * idx[:-1] + 3] = -hp.alpha * rel_speed[1:]
        z = hp.mass * (vk - vk1) / dt
        samples.append(RegressorSample(phi=phi, z=z, step=k))
    if skipped:
        log.warning("skipped %d regressor steps with missing samples", skipped)
    return samples


def srls_iqr_step(state: EstimatorState, x, y: float, lam: float = 0.95) -> EstimatorState:
    """One square-root recursive least-squares update from a single row.

    Rotates the scaled inverse factor against the normalised input through a
    cascade of Givens rotations; the accumulated top row divided by the final
    norm is the gain applied to the a-priori error.  Zero input leaves theta
    unchanged and only rescales the factor by lam^{-1/2}.
    """
    x = np.asarray(x, dtype=float)
    y = float(y)
    if x.shape != state.theta.shape:
        raise ValueError("input row has wrong length")
    if not (np.all(np.isfinite(x)) and math.isfinite(y)):
        raise ValueError("non-finite estimator input rejected")

    dim = state.dim
    ril = 1.0 / math.sqrt(lam)
    # covariance wind-up can legitimately overflow the factor; callers detect
    # the non-finite state, so numpy's warnings are just noise here
    with np.errstate(over="ignore", invalid="ignore"):
        s = state.s_factor.copy()
        a = ril * (s @ x)
        u = np.zeros(dim)
        b = 1.0
        for i in range(dim):
            b_next = math.hypot(b, a[i])
            sin_i = a[i] / b_next
            cos_i = b / b_next
            row_old = s[i, : i + 1].copy()
            s[i, : i + 1] = ril * cos_i * row_old - sin_i * u[: i + 1]
            u[: i + 1] = cos_i * u[: i + 1] + ril * sin_i * row_old
            b = b_next
        err = y - x @ state.theta
        theta = state.theta + (err / b) * u
    return EstimatorState(theta=theta, s_factor=s, step_count=state.step_count + 1)


def srls_iqr_epoch(state: EstimatorState, sample: RegressorSample,
                   lam: float = 0.95) -> EstimatorState:
    """Sequential update over the N rows of one regressor sample, in order."""
    for i in range(sample.phi.shape[0]):
        state = srls_iqr_step(state, sample.phi[i], sample.z[i], lam=lam)
    return state


def batch_wls_oracle(samples, lam: float = 0.95, delta: float = 100.0,
                     dim: int | None = None) -> np.ndarray:
    """Directly solved exponentially-weighted regularised least squares.

    Accepts RegressorSample sequences (rows flattened in processing order) or
    (x, y) row pairs.  Row t of T gets weight lam^{T-t}; the recursion's
    initialisation contributes a lam^T / delta^2 ridge term, so this is the
    exact problem the recursive estimator solves and serves as its ground
    truth.  With no samples the prior wins and theta is zero (dim required).
    Rank-deficient systems return the minimum-norm solution with a condition
    warning logged.
    """
    rows = []
    for s in samples:
        if isinstance(s, RegressorSample):
            for i in range(s.phi.shape[0]):
                rows.append((s.phi[i], s.z[i]))
        else:
            rows.append((np.asarray(s[0], dtype=float), float(s[1])))
    if not rows:
        if dim is None:
            raise ValueError("no samples and no dimension given")
        return np.zeros(dim)
    dim = rows[0][0].size
    t_total = len(rows)
    xs = np.stack([r[0] for r in rows])
    ys = np.array([r[1] for r in rows])
    # weights sqrt(lam^(T-t)), t = 1..T
    w = lam ** (0.5 * (t_total - 1 - np.arange(t_total)))
    a = np.vstack([w[:, None] * xs, (lam ** (0.5 * t_total) / delta) * np.eye(dim)])
    b = np.concatenate([w * ys, np.zeros(dim)])
    theta, _, rank, sv = np.linalg.lstsq(a, b, rcond=None)
    if rank < dim:
        log.warning("weighted least squares rank deficient (rank %d < %d)", rank, dim)
    return theta


@dataclass(frozen=True)
class PredictionReport:
    """One-step-ahead acceleration prediction scores for an episode."""

    per_vehicle_rmse: np.ndarray
    avg_rmse: float
    worst_rmse: float
    n_samples: int
    n_scored: int
    warmup: int
    steps: np.ndarray          # regressor step index per sample
    theta_history: np.ndarray  # (n_samples, 2N), theta after each epoch
    predicted: np.ndarray      # (N, n_samples) accelerations [m/s^2]
    actual: np.ndarray         # (N, n_samples)


def predict_and_score(episode, hp: IdentHyperParams,
                      warmup: int = 100) -> PredictionReport:
    """Run the online estimator over an episode and score its predictions.

    At each step the acceleration is predicted from the previous estimate
    (an honest one-step-ahead score), then the estimator absorbs the step.
    RMSEs are computed per vehicle over the samples after the warm-up.
    """
    samples = build_regressor(episode, hp)
    if not samples:
        raise ValueError("episode too short for the delay horizon")
    n = samples[0].phi.shape[0]
    state = EstimatorState.fresh(2 * n, hp.delta)

    preds = np.empty((n, len(samples)))
    actual = np.empty((n, len(samples)))
    thetas = np.empty((len(samples), 2 * n))
    steps = np.empty(len(samples), dtype=int)
    for j, sample in enumerate(samples):
        preds[:, j] = sample.phi @ state.theta / hp.mass
        actual[:, j] = sample.z / hp.mass
        state = srls_iqr_epoch(state, sample, lam=hp.lam)
        if not (np.all(np.isfinite(state.theta))
                and np.all(np.isfinite(state.s_factor))):
            # forgetting inflates the inverse factor without bound in
            # unexcited directions; a capped factor would no longer solve
            # the weighted least-squares problem, so fail loudly instead
            raise RuntimeError(
                f"estimator diverged at step {sample.step}: covariance "
                "wind-up under insufficient excitation (raise lam toward 1, "
                "shorten the episode, or identify fewer vehicles)"
            )
        thetas[j] = state.theta
        steps[j] = sample.step

    scored = slice(min(warmup, len(samples) - 1), None)
    resid = preds[:, scored] - actual[:, scored]
    rmse = np.sqrt(np.mean(resid**2, axis=1))
    return PredictionReport(
        per_vehicle_rmse=rmse,
        avg_rmse=float(rmse.mean()),
        worst_rmse=float(rmse.max()),
        n_samples=len(samples),
        n_scored=resid.shape[1],
        warmup=warmup,
        steps=steps,
        theta_history=thetas,
        predicted=preds,
        actual=actual,
    )


def export_theta_trajectory(report: PredictionReport, path) -> None:
    """Parameter estimates over time: step, k_1, c_1, ..., k_N, c_N."""
    n = report.theta_history.shape[1] // 2
    cols = ["step"]
    for i in range(1, n + 1):
        cols += [f"k_{i}", f"c_{i}"]
    lines = [",".join(cols)]
    for j in range(report.theta_history.shape[0]):
        vals = [str(int(report.steps[j]))]
        vals += [f"{v:.10g}" for v in report.theta_history[j]]
        lines.append(",".join(vals))
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def export_prediction_report(report: PredictionReport, path) -> None:
    """Structured-text (JSON) prediction summary."""
    import json

    doc = {
        "per_vehicle_rmse": [round(float(v), 10) for v in report.per_vehicle_rmse],
        "avg_rmse": round(report.avg_rmse, 10),
        "worst_rmse": round(report.worst_rmse, 10),
        "n_samples": report.n_samples,
        "n_scored": report.n_scored,
        "warmup": report.warmup,
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)
