"""Linearised chain dynamics: frequency response, plant and string stability.

The perturbation dynamics about the uniform-flow equilibrium form a linear
time-delay system

    x'(t) = A0 x(t) + sum_i A_i x(t - tau_i) + b0 u(t) + b1 u(t - tau_1)

with state x = [h~_1, v~_1, ..., h~_N, v~_N], input u the ghost-speed
perturbation and outputs the vehicle speed perturbations.  Headway kinematics
are delay-free (rows of A0 and b0); each force balance row sits in its own
delayed matrix A_i (and b1 for vehicle 1's damper on the ghost).

String stability uses the exact transcendental delays e^{-jw tau} in the
frequency response; plant stability replaces each delay channel with a Pade
rational approximant so that the verdict reduces to the eigenvalues of a
finite delay-free matrix.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .model import FleetScenario

__all__ = [
    "LinearizedSystem",
    "CellClass",
    "GridSpec",
    "StabilityMap",
    "linearize",
    "freq_response",
    "plant_stable",
    "plant_margin",
    "string_stable",
    "StringStabilityResult",
    "sweep",
    "export_stability_map",
]

# eigenvalues with real part above this are treated as unstable
STABILITY_MARGIN = -1e-9
# sup gains within this distance of 1 get the boundary flag in sweep maps
BOUNDARY_BAND = 1e-4
DEFAULT_GAIN_TOL = 1e-6


def default_omega_grid() -> np.ndarray:
    """Log grid for gain maxima, 1e-3 .. 1e2 rad/s."""
    return np.geomspace(1e-3, 1e2, 2000)


# ---------------------------------------------------------------------------
# linearisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearizedSystem:
    """Time-delay state-space of the perturbation dynamics.

    a0        -- (2N, 2N) delay-free part (headway kinematics)
    a_delayed -- list of N (2N, 2N) matrices; a_delayed[i] holds vehicle i's
                 force-balance row, active at lag delays[i]
    b_now     -- (2N,) ghost input into the first headway derivative (no lag)
    b_delayed -- (2N,) ghost input into vehicle 1's damper, at lag delays[0]
    c         -- (N, 2N) selector of the speed perturbation states
    delays    -- (N,) reaction delays [s]
    chain     -- True when built by linearize(); enables the banded fast path
    """

    a0: np.ndarray
    a_delayed: tuple
    b_now: np.ndarray
    b_delayed: np.ndarray
    c: np.ndarray
    delays: np.ndarray
    chain: bool = False

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def delayed_rows(self) -> np.ndarray:
        """(N, 2N) matrix whose row i is the delayed force-balance row of
        vehicle i (the only nonzero row of a_delayed[i])."""
        return np.stack([self.a_delayed[i][2 * i + 1] for i in range(self.n)])


def linearize(fleet: FleetScenario) -> LinearizedSystem:
    """Perturbation dynamics about the uniform-flow equilibrium.

    Valid while the equilibrium speed lies in every vehicle's linear spacing
    region, where the spacing policy has constant slope beta_i.
    """
    pa = fleet.param_arrays()
    return _assemble_chain(pa["m"], pa["k"], pa["c"], pa["alpha"], pa["beta"],
                           pa["tau"])


def _assemble_chain(m, k, c, alpha, beta, taus) -> LinearizedSystem:
    n = m.size
    dim = 2 * n
    a0 = np.zeros((dim, dim))
    b_now = np.zeros(dim)
    b_delayed = np.zeros(dim)
    a_delayed = []

    for j in range(n):
        hr, vr = 2 * j, 2 * j + 1
        # headway kinematics: h~'_j = v~_{j-1} - v~_j (current time)
        if j == 0:
            b_now[hr] = 1.0
        else:
            a0[hr, 2 * j - 1] = 1.0
        a0[hr, vr] = -1.0

        # force balance, everything at lag tau_j
        ad = np.zeros((dim, dim))
        row = ad[vr]
        row[hr] += k[j] / m[j]
        row[vr] += -(k[j] * beta[j] + c[j]) / m[j]
        if j == 0:
            b_delayed[vr] = c[j] / m[j]
        else:
            row[2 * j - 1] += c[j] / m[j]
        if j < n - 1:
            row[2 * j + 2] += -alpha[j] * k[j + 1] / m[j]
            row[2 * j + 3] += alpha[j] * (k[j + 1] * beta[j + 1] + c[j + 1]) / m[j]
            row[vr] += -alpha[j] * c[j + 1] / m[j]
        a_delayed.append(ad)

    cmat = np.zeros((n, dim))
    cmat[np.arange(n), 2 * np.arange(n) + 1] = 1.0
    return LinearizedSystem(
        a0=a0,
        a_delayed=tuple(a_delayed),
        b_now=b_now,
        b_delayed=b_delayed,
        c=cmat,
        delays=np.asarray(taus, dtype=float).copy(),
        chain=True,
    )


# ---------------------------------------------------------------------------
# frequency response
# ---------------------------------------------------------------------------


def freq_response(sys: LinearizedSystem, omega) -> np.ndarray:
    """Complex speed gains G_i(jw) = V~_i / V~_0 at the given frequencies.

    Delays enter exactly through e^{-jw tau_i}; no rational approximation.
    Returns shape (N,) for scalar omega, else (len(omega), N).  A singular
    matrix (jw is a characteristic root) raises LinAlgError.
    """
    scalar = np.isscalar(omega)
    om = np.atleast_1d(np.asarray(omega, dtype=float))
    if np.any(om < 0):
        raise ValueError("omega must be non-negative")
    n = sys.n
    dim = 2 * n
    jw = 1j * om
    mats = np.zeros((om.size, dim, dim), dtype=complex)
    mats -= sys.a0
    mats += jw[:, None, None] * np.eye(dim)
    for i in range(n):
        ph = np.exp(-jw * sys.delays[i])
        mats -= ph[:, None, None] * sys.a_delayed[i]
    rhs = sys.b_now[None, :] + np.exp(-jw * sys.delays[0])[:, None] * sys.b_delayed
    x = np.linalg.solve(mats, rhs[..., None])[..., 0]
    gains = x @ sys.c.T
    return gains[0] if scalar else gains


class _ThomasBreakdown(Exception):
    pass


def _chain_gains(sys: LinearizedSystem, om: np.ndarray) -> np.ndarray:
    """Fast gains for chain-structured systems via block-tridiagonal solve.

    The matrix jwI - A0 - sum_i e^{-jw tau_i} A_i is block tridiagonal in the
    per-vehicle (h, v) grouping; a Thomas sweep solves all frequencies at
    once, carrying the 2x2 blocks as flat component arrays.  Falls back via
    _ThomasBreakdown when an eliminated block turns singular.
    """
    n = sys.n
    g_rows = sys.delayed_rows()
    jw = 1j * om
    w = np.exp(-jw[None, :] * sys.delays[:, None])  # (N, K)

    # eliminated diagonal blocks (d00, d01, d10, d11) and rhs per vehicle
    d00s, d01s, d10s, d11s = [], [], [], []
    r0s, r1s = [], []
    ones = np.ones_like(jw)
    d00, d01 = jw, ones
    d10 = -w[0] * g_rows[0][0]
    d11 = jw - w[0] * g_rows[0][1]
    r0 = np.full_like(jw, sys.b_now[0])
    r1 = sys.b_now[1] + w[0] * sys.b_delayed[1]
    d00s.append(d00); d01s.append(d01); d10s.append(d10); d11s.append(d11)
    r0s.append(r0); r1s.append(r1)
    for j in range(1, n):
        g = g_rows[j]
        gp = g_rows[j - 1]
        det = d00 * d11 - d01 * d10
        if np.any(np.abs(det) < 1e-300):
            raise _ThomasBreakdown
        # L_j rows are (0, -1) and (0, -w_j g[2j-1]); with
        # inv(dtil) = [[d11, -d01], [-d10, d00]] / det only the second
        # column of inv enters li = L_j @ inv(dtil_prev)
        l11 = -w[j] * g[2 * j - 1]
        i10 = -d10 / det
        i11 = d00 / det
        li00 = -i10
        li01 = -i11
        li10 = l11 * i10
        li11 = l11 * i11
        # U_{j-1} bottom row
        u10 = -w[j - 1] * gp[2 * j]
        u11 = -w[j - 1] * gp[2 * j + 1]
        r0p, r1p = r0, r1
        r0 = -(li00 * r0p + li01 * r1p)
        r1 = -(li10 * r0p + li11 * r1p)
        d00 = jw - li01 * u10
        d01 = ones - li01 * u11
        d10 = -w[j] * g[2 * j] - li11 * u10
        d11 = jw - w[j] * g[2 * j + 1] - li11 * u11
        d00s.append(d00); d01s.append(d01); d10s.append(d10); d11s.append(d11)
        r0s.append(r0); r1s.append(r1)

    gains = np.empty((om.size, n), dtype=complex)
    det = d00 * d11 - d01 * d10
    if np.any(np.abs(det) < 1e-300):
        raise _ThomasBreakdown
    x0 = (d11 * r0 - d01 * r1) / det
    x1 = (-d10 * r0 + d00 * r1) / det
    gains[:, n - 1] = x1
    for j in range(n - 2, -1, -1):
        g = g_rows[j]
        u10 = -w[j] * g[2 * j + 2]
        u11 = -w[j] * g[2 * j + 3]
        r0 = r0s[j]
        r1 = r1s[j] - (u10 * x0 + u11 * x1)
        det = d00s[j] * d11s[j] - d01s[j] * d10s[j]
        if np.any(np.abs(det) < 1e-300):
            raise _ThomasBreakdown
        x0 = (d11s[j] * r0 - d01s[j] * r1) / det
        x1 = (-d10s[j] * r0 + d00s[j] * r1) / det
        gains[:, j] = x1
    return gains


def _chain_gains_scalar(sys: LinearizedSystem, omega: float) -> np.ndarray:
    """Single-frequency Thomas solve on plain complex scalars.

    Same elimination as _chain_gains but without array overhead; used by the
    golden-section refinement where one frequency is evaluated at a time.
    """
    n = sys.n
    g_rows = sys.delayed_rows()
    jw = 1j * omega
    w = np.exp(-jw * sys.delays)

    # forward elimination over (2x2) blocks kept as scalar quadruples
    d00 = jw
    d01 = 1.0 + 0.0j
    d10 = -w[0] * g_rows[0][0]
    d11 = jw - w[0] * g_rows[0][1]
    r0 = complex(sys.b_now[0])
    r1 = complex(sys.b_now[1]) + w[0] * sys.b_delayed[1]
    dtil = [(d00, d01, d10, d11)]
    rtil = [(r0, r1)]
    for j in range(1, n):
        g = g_rows[j]
        gp = g_rows[j - 1]
        a00, a01, a10, a11 = dtil[j - 1]
        det = a00 * a11 - a01 * a10
        if det == 0:
            raise _ThomasBreakdown
        i00, i01, i10, i11 = a11 / det, -a01 / det, -a10 / det, a00 / det
        # L_j has entries (0,1) = -1 and (1,1) = -w_j g[2j-1]
        l01 = -1.0
        l11 = -w[j] * g[2 * j - 1]
        # U_{j-1} bottom row couples vehicle j-1's force to block j
        u10 = -w[j - 1] * gp[2 * j]
        u11 = -w[j - 1] * gp[2 * j + 1]
        # li = L_j @ inv(dtil); only rows of L are (0: [0,l01]) (1: [0,l11])
        li00, li01 = l01 * i10, l01 * i11
        li10, li11 = l11 * i10, l11 * i11
        # dtil_j = D_j - li @ U_{j-1}; U has only its bottom row nonzero
        d00 = jw - li01 * u10
        d01 = 1.0 - li01 * u11
        d10 = -w[j] * g[2 * j] - li11 * u10
        d11 = jw - w[j] * g[2 * j + 1] - li11 * u11
        rp0, rp1 = rtil[j - 1]
        rtil.append((-(li00 * rp0 + li01 * rp1), -(li10 * rp0 + li11 * rp1)))
        dtil.append((d00, d01, d10, d11))

    gains = np.empty(n, dtype=complex)
    a00, a01, a10, a11 = dtil[n - 1]
    det = a00 * a11 - a01 * a10
    if det == 0:
        raise _ThomasBreakdown
    rp0, rp1 = rtil[n - 1]
    x0 = (a11 * rp0 - a01 * rp1) / det
    x1 = (-a10 * rp0 + a00 * rp1) / det
    gains[n - 1] = x1
    for j in range(n - 2, -1, -1):
        g = g_rows[j]
        u10 = -w[j] * g[2 * j + 2]
        u11 = -w[j] * g[2 * j + 3]
        rp0, rp1 = rtil[j]
        rp1 = rp1 - (u10 * x0 + u11 * x1)
        a00, a01, a10, a11 = dtil[j]
        det = a00 * a11 - a01 * a10
        if det == 0:
            raise _ThomasBreakdown
        x0 = (a11 * rp0 - a01 * rp1) / det
        x1 = (-a10 * rp0 + a00 * rp1) / det
        gains[j] = x1
    return gains


def _gains_abs(sys: LinearizedSystem, om: np.ndarray) -> np.ndarray:
    """|G_i(jw)| over a frequency array, (K, N)."""
    om = np.atleast_1d(om)
    if sys.chain and sys.n > 1:
        try:
            if om.size <= 4:
                return np.abs(
                    np.stack([_chain_gains_scalar(sys, float(w)) for w in om])
                )
            return np.abs(_chain_gains(sys, om))
        except _ThomasBreakdown:
            pass
    return np.abs(freq_response(sys, om))


# ---------------------------------------------------------------------------
# plant stability (Pade route)
# ---------------------------------------------------------------------------


def pade_coefficients(tau: float, order: int):
    """Numerator/denominator of the Pade approximant of e^{-s tau}.

    Coefficients in descending powers of s, den normalised to trailing 1.
    """
    if order < 1:
        raise ValueError("pade order must be >= 1")
    n = order
    num = [0.0] * (n + 1)
    den = [0.0] * (n + 1)
    num[-1] = den[-1] = 1.0
    coef = 1.0
    for k in range(1, n + 1):
        coef = tau * coef * (n - k + 1) / (2 * n - k + 1) / k
        num[n - k] = coef * (-1) ** k
        den[n - k] = coef
    num = np.array(num) / den[0]
    den = np.array(den) / den[0]
    return num, den


def _pade_state_space(tau: float, order: int):
    """Controllable-canonical realisation of the Pade delay filter."""
    num, den = pade_coefficients(tau, order)
    d = num[0] / den[0]
    rem = num - d * den  # strictly proper remainder, descending, degree < order
    c = rem[1:][::-1]
    a = np.zeros((order, order))
    if order > 1:
        a[:-1, 1:] = np.eye(order - 1)
    a[-1, :] = -den[1:][::-1]
    b = np.zeros(order)
    b[-1] = 1.0
    return a, b, c, d


def build_augmented(sys: LinearizedSystem, pade_order: int = 3) -> np.ndarray:
    """Delay-free matrix whose spectrum approximates the delayed dynamics.

    Each delayed force-balance row feeds through a Pade filter of the given
    order; zero-delay channels fold straight into the delay-free part.  With
    all delays zero this returns A0 + sum_i A_i unchanged.
    """
    n = sys.n
    dim = 2 * n
    rows = [2 * i + 1 for i in range(n)]
    g_rows = sys.delayed_rows()

    ax = sys.a0.copy()
    channels = []
    for i in range(n):
        if sys.delays[i] == 0.0:
            ax[rows[i]] += g_rows[i]
        else:
            channels.append(i)
    p = pade_order
    total = dim + p * len(channels)
    a_e = np.zeros((total, total))
    a_e[:dim, :dim] = ax
    for slot, i in enumerate(channels):
        af, bf, cf, df = _pade_state_space(sys.delays[i], p)
        s = dim + slot * p
        a_e[rows[i], :dim] += df * g_rows[i]
        a_e[rows[i], s : s + p] = cf
        a_e[s : s + p, :dim] = np.outer(bf, g_rows[i])
        a_e[s : s + p, s : s + p] = af
    return a_e


def plant_margin(sys: LinearizedSystem, pade_order: int = 3) -> float:
    """Largest real part over the Pade-augmented spectrum."""
    a_e = build_augmented(sys, pade_order)
    return float(np.linalg.eigvals(a_e).real.max())


def plant_stable(sys: LinearizedSystem, pade_order: int = 3) -> bool:
    """True when every eigenvalue of the augmented matrix sits strictly in
    the open left half-plane (real part below -1e-9)."""
    return plant_margin(sys, pade_order) < STABILITY_MARGIN


# ---------------------------------------------------------------------------
# string stability
# ---------------------------------------------------------------------------


class StringStabilityResult(NamedTuple):
    stable: bool
    sup_gains: np.ndarray   # per-vehicle sup_w |G_i(jw)|
    sup_omegas: np.ndarray  # frequency attaining each vehicle's sup


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_max(f, a: float, b: float, iters: int = 24):
    """Golden-section maximisation of a scalar function on [a, b]."""
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVPHI * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVPHI * (b - a)
            f1 = f(x1)
    return (x1, f1) if f1 >= f2 else (x2, f2)


def string_stable(
    sys: LinearizedSystem,
    omega_grid: np.ndarray | None = None,
    tol: float = DEFAULT_GAIN_TOL,
    refine: bool = True,
    early_exit: bool = False,
) -> StringStabilityResult:
    """Check sup_w |G_i(jw)| <= 1 + tol for every vehicle.

    Plant stability must already be established; the criterion is undefined
    otherwise.  Grid maxima are sharpened by a local zoom plus golden-section
    refinement around each distinct per-vehicle maximiser, and every refined
    evaluation also updates the other vehicles' sup estimates.  With
    early_exit=True the search stops as soon as any gain certifiably exceeds
    the threshold (sup gains are then lower bounds).  A pole on the imaginary
    axis classifies as unstable with infinite gain.
    """
    om = default_omega_grid() if omega_grid is None else np.asarray(omega_grid, float)
    n = sys.n
    threshold = 1.0 + tol

    def batch(freqs):
        try:
            return _gains_abs(sys, freqs)
        except np.linalg.LinAlgError:
            return np.full((np.atleast_1d(freqs).size, n), np.inf)

    if early_exit:
        coarse = om[:: max(1, om.size // 128)]
        g = batch(coarse)
        if not np.all(np.isfinite(g)):
            return StringStabilityResult(False, np.full(n, np.inf), np.zeros(n))
        if g.max() > threshold:
            sup = g.max(axis=0)
            return StringStabilityResult(False, sup, coarse[np.argmax(g, axis=0)])

    g = batch(om)
    if not np.all(np.isfinite(g)):
        return StringStabilityResult(False, np.full(n, np.inf), np.zeros(n))
    sup = g.max(axis=0)
    arg = np.argmax(g, axis=0)
    sup_omega = om[arg]
    if early_exit and sup.max() > threshold:
        return StringStabilityResult(False, sup, sup_omega)

    if refine:
        log_om = np.log(om)
        # merge overlapping per-vehicle maximiser brackets (uniform chains
        # cluster their peaks) so each group pays one refinement round
        uniq = sorted(set(arg.tolist()))
        groups = []
        for j in uniq:
            if groups and j - groups[-1][1] <= 4:
                groups[-1][1] = j
            else:
                groups.append([j, j])
        for j_lo, j_hi in groups:
            lo = log_om[max(j_lo - 2, 0)]
            hi = log_om[min(j_hi + 2, om.size - 1)]
            if hi <= lo:
                continue
            # zoom pass over the bracket, then golden section on the best spot
            zoom = np.exp(np.linspace(lo, hi, 48))
            gz = batch(zoom)
            np.maximum(sup, gz.max(axis=0), out=sup)
            better = gz.max(axis=0) > g[arg, np.arange(n)]
            sup_omega = np.where(better, zoom[np.argmax(gz, axis=0)], sup_omega)
            jz = int(np.argmax(gz.max(axis=1)))
            zlo = math.log(zoom[max(jz - 1, 0)])
            zhi = math.log(zoom[min(jz + 1, zoom.size - 1)])
            if zhi > zlo:

                def overall(x):
                    row = batch(np.array([math.exp(x)]))[0]
                    np.maximum(sup, row, out=sup)
                    return row.max()

                _golden_max(overall, zlo, zhi)
            if early_exit and sup.max() > threshold:
                return StringStabilityResult(False, sup, sup_omega)

    return StringStabilityResult(bool(np.all(sup <= threshold)), sup, sup_omega)


# ---------------------------------------------------------------------------
# parameter-grid sweep
# ---------------------------------------------------------------------------


class CellClass(IntEnum):
    UNKNOWN = -1
    PLANT_UNSTABLE = 0
    PLANT_STABLE_STRING_UNSTABLE = 1
    STRING_STABLE = 2


@dataclass(frozen=True)
class GridSpec:
    """Shared axis specification for the (k/m, c/m) sweep grid."""

    lo: float
    hi: float
    step: float

    def values(self) -> np.ndarray:
        count = int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return np.round(self.lo + self.step * np.arange(count), 12)


@dataclass
class StabilityMap:
    """Classified (k~, c~) grid with per-cell gain diagnostics.

    classes[ik, ic] holds the CellClass for k_values[ik], c_values[ic];
    worst_vehicle is 1-based (-1 where no gain was computed), sup_gain the
    largest per-vehicle sup gain, plant_margin_grid the max real part of the
    augmented spectrum, boundary flags cells whose sup gain falls within
    BOUNDARY_BAND of 1.
    """

    k_values: np.ndarray
    c_values: np.ndarray
    classes: np.ndarray
    worst_vehicle: np.ndarray
    sup_gain: np.ndarray
    plant_margin_grid: np.ndarray
    boundary: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        stringy = self.classes == int(CellClass.STRING_STABLE)
        if not np.all(self.plant_margin_grid[stringy] < STABILITY_MARGIN):
            raise AssertionError("string-stable cell without plant stability")

    def counts(self) -> dict:
        return {
            cls.name: int(np.sum(self.classes == int(cls))) for cls in CellClass
        }


def _classify_cell(n, m, beta, alpha, taus, k_t, c_t, pade_order, omega, tol):
    """Classify one uniform-parameter cell; returns a flat record tuple."""
    sys = _chain_system(n, m, beta, alpha, taus, k_t, c_t)
    try:
        margin = plant_margin(sys, pade_order)
    except np.linalg.LinAlgError:
        return (int(CellClass.UNKNOWN), -1, np.nan, np.nan, False)
    if not (margin < STABILITY_MARGIN):
        return (int(CellClass.PLANT_UNSTABLE), -1, np.nan, margin, False)
    res = string_stable(sys, omega, tol=tol, early_exit=True)
    worst = int(np.argmax(res.sup_gains)) + 1
    supg = float(res.sup_gains.max())
    cls = CellClass.STRING_STABLE if res.stable else CellClass.PLANT_STABLE_STRING_UNSTABLE
    boundary = abs(supg - 1.0) <= BOUNDARY_BAND
    return (int(cls), worst, supg, margin, boundary)


def _chain_system(n, m, beta, alpha, taus, k_t, c_t) -> LinearizedSystem:
    """LinearizedSystem for a uniform-(k~, c~) chain without building a fleet."""
    return _assemble_chain(m, k_t * m, c_t * m, alpha, beta, taus)


def _sweep_chunk(args):
    (n, m, beta, alpha, taus, cells, pade_order, omega, tol) = args
    out = []
    for idx, k_t, c_t in cells:
        out.append((idx,) + _classify_cell(
            n, m, beta, alpha, taus, k_t, c_t, pade_order, omega, tol))
    return out


def sweep(
    template: FleetScenario,
    grid: GridSpec,
    delays=None,
    pade_order: int = 3,
    omega_grid: np.ndarray | None = None,
    tol: float = DEFAULT_GAIN_TOL,
    workers: int = 1,
) -> StabilityMap:
    """Classify every (k~, c~) grid cell for a uniform-parameter chain.

    The template fixes N, masses, headways and rear-coupling factors; the
    swept stiffness/damping are applied uniformly as k_i = k~ m_i,
    c_i = c~ m_i.  delays overrides the template's per-vehicle reaction
    delays (scalar or length-N).  Cells are mutually independent; with
    workers > 1 they are classified in a process pool and merged by index,
    so results are deterministic regardless of worker count.
    """
    n = template.n
    pa = template.param_arrays()
    if delays is None:
        taus = pa["tau"]
    else:
        taus = np.broadcast_to(np.asarray(delays, dtype=float), (n,)).copy()
    if np.any(taus < 0):
        raise ValueError("delays must be non-negative")

    omega = default_omega_grid() if omega_grid is None else np.asarray(omega_grid)
    k_vals = grid.values()
    c_vals = grid.values()
    nk, nc = k_vals.size, c_vals.size

    cells = [
        (ik * nc + ic, float(k_vals[ik]), float(c_vals[ic]))
        for ik in range(nk)
        for ic in range(nc)
    ]

    records = [None] * len(cells)
    common = (n, pa["m"], pa["beta"], pa["alpha"], taus)
    if workers <= 1:
        for idx, k_t, c_t in cells:
            records[idx] = _classify_cell(
                n, pa["m"], pa["beta"], pa["alpha"], taus, k_t, c_t,
                pade_order, omega, tol)
    else:
        chunk_size = max(1, len(cells) // (workers * 8))
        chunks = [
            common + (cells[i : i + chunk_size], pade_order, omega, tol)
            for i in range(0, len(cells), chunk_size)
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for batch in pool.map(_sweep_chunk, chunks):
                for rec in batch:
                    records[rec[0]] = rec[1:]

    classes = np.empty((nk, nc), dtype=np.int8)
    worst = np.empty((nk, nc), dtype=np.int16)
    supg = np.empty((nk, nc))
    marg = np.empty((nk, nc))
    bound = np.zeros((nk, nc), dtype=bool)
    for flat, rec in enumerate(records):
        ik, ic = divmod(flat, nc)
        classes[ik, ic], worst[ik, ic], supg[ik, ic], marg[ik, ic], bound[ik, ic] = rec

    meta = {
        "n_vehicles": n,
        "alpha": pa["alpha"].tolist(),
        "beta": pa["beta"].tolist(),
        "m": pa["m"].tolist(),
        "delays": taus.tolist(),
        "pade_order": pade_order,
        "omega_grid": {
            "lo": float(omega[0]), "hi": float(omega[-1]), "points": int(omega.size),
        },
        "grid": {"lo": grid.lo, "hi": grid.hi, "step": grid.step},
        "gain_tol": tol,
    }
    return StabilityMap(
        k_values=k_vals, c_values=c_vals, classes=classes, worst_vehicle=worst,
        sup_gain=supg, plant_margin_grid=marg, boundary=bound, meta=meta,
    )


def export_stability_map(smap: StabilityMap, path) -> None:
    """Write the classified grid as a comma-separated table."""
    lines = ["k_tilde,c_tilde,class,worst_vehicle,sup_gain"]
    for ik, kv in enumerate(smap.k_values):
        for ic, cv in enumerate(smap.c_values):
            cls = CellClass(int(smap.classes[ik, ic])).name
            sup = smap.sup_gain[ik, ic]
            sup_s = "" if np.isnan(sup) else f"{sup:.8g}"
            wv = int(smap.worst_vehicle[ik, ic])
            wv_s = "" if wv < 0 else str(wv)
            lines.append(f"{kv:.10g},{cv:.10g},{cls},{wv_s},{sup_s}")
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)
