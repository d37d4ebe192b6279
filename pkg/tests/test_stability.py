import numpy as np
import pytest

from springchain import (
    CellClass,
    ConstantGhost,
    FleetScenario,
    GridSpec,
    LinearizedSystem,
    SimulationDiverged,
    VehicleParams,
    freq_response,
    linearize,
    plant_margin,
    plant_stable,
    simulate,
    string_stable,
    sweep,
)
from springchain.stability import (
    StabilityMap,
    _chain_gains,
    build_augmented,
    export_stability_map,
    pade_coefficients,
)


def chain_fleet(ks, cs, alpha=0.2, beta=1.0, taus=None, m=1.0):
    n = len(ks)
    taus = [0.0] * n if taus is None else taus
    vehicles = [
        VehicleParams(m=m, k=ks[i], c=cs[i], alpha=alpha, beta=beta, tau=taus[i])
        for i in range(n)
    ]
    return FleetScenario(vehicles, ConstantGhost(20.0), dt=0.1, duration=1.0)


def uniform_fleet(n, kt, ct, alpha=0.2, beta=1.0, tau=0.0):
    return chain_fleet([kt] * n, [ct] * n, alpha=alpha, beta=beta, taus=[tau] * n)


def analytic_single_gain(m, k, c, beta, omega, tau=0.0):
    s = 1j * omega
    ph = np.exp(-s * tau)
    return (ph * (c * s + k)) / (m * s**2 + ph * ((c + k * beta) * s + k))


class TestLinearize:
    def test_single_vehicle_matrices(self):
        sys = linearize(chain_fleet([1.5], [0.8], beta=2.0, taus=[0.4], m=2.0))
        assert np.allclose(sys.a0, [[0, -1], [0, 0]])
        # force row: [k/m, -(k beta + c)/m]
        assert np.allclose(sys.a_delayed[0], [[0, 0], [0.75, -(1.5 * 2 + 0.8) / 2]])
        assert np.allclose(sys.b_now, [1, 0])
        assert np.allclose(sys.b_delayed, [0, 0.4])
        assert np.allclose(sys.delays, [0.4])

    def test_no_rear_coupling_is_lower_block_bidiagonal(self):
        sys = linearize(uniform_fleet(4, 1.2, 0.7, alpha=0.0))
        full = sys.a0 + sum(sys.a_delayed)
        for j in range(4):
            # no influence of any state with index beyond vehicle j's block
            assert np.all(full[2 * j : 2 * j + 2, 2 * j + 2 :] == 0.0)

    def test_rear_coupling_entries(self):
        k2, c2, alpha = 1.7, 0.9, 0.33
        sys = linearize(chain_fleet([1.0, k2], [0.5, c2], alpha=alpha, beta=2.0))
        row = sys.a_delayed[0][1]
        assert row[2] == pytest.approx(-alpha * k2)
        assert row[3] == pytest.approx(alpha * (k2 * 2.0 + c2))

    def test_zero_delay_closed_loop_roots(self):
        # k~=1, c~=1, beta=1, N=1: roots of s^2 + 2s + 1 -> -1, -1
        sys = linearize(uniform_fleet(1, 1.0, 1.0))
        full = sys.a0 + sum(sys.a_delayed)
        roots = np.sort(np.linalg.eigvals(full).real)
        assert np.allclose(roots, [-1.0, -1.0], atol=1e-12)


class TestFreqResponse:
    def test_single_vehicle_exact_value(self):
        sys = linearize(uniform_fleet(1, 1.0, 1.0))
        g = freq_response(sys, 1.0)
        # (1 + j)/(2j): magnitude sqrt(2)/2
        assert abs(g[0]) == pytest.approx(np.sqrt(2) / 2, abs=1e-14)
        assert g[0] == pytest.approx((1 + 1j) / (2j), abs=1e-14)

    def test_delayed_single_vehicle_analytic(self):
        m, k, c, beta, tau = 1.3, 0.9, 1.4, 1.7, 0.35
        fleet = chain_fleet([k], [c], beta=beta, taus=[tau], m=m)
        sys = linearize(fleet)
        for omega in (0.3, 1.0, 2.7):
            g = freq_response(sys, omega)[0]
            assert g == pytest.approx(
                analytic_single_gain(m, k, c, beta, omega, tau), abs=1e-12
            )

    def test_dc_gain_is_one(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            n = int(rng.integers(1, 8))
            kt = rng.uniform(0.5, 4.0)
            ct = rng.uniform(0.5, 3.0)
            tau = float(rng.choice([0.0, 0.1, 0.3]))
            sys = linearize(uniform_fleet(n, kt, ct, tau=tau))
            if not plant_stable(sys):
                continue
            g = freq_response(sys, 1e-6)
            assert np.allclose(np.abs(g), 1.0, atol=1e-5)

    def test_cascade_equivalence_without_rear_coupling(self):
        # alpha = 0: G_i equals the product of i single-vehicle responses
        params = [(1.0, 0.8, 1.1, 1.5, 0.2), (1.4, 1.3, 0.6, 1.0, 0.0),
                  (0.7, 0.5, 0.9, 2.0, 0.3)]
        vehicles = [
            VehicleParams(m=m, k=k, c=c, alpha=0.0, beta=b, tau=t)
            for m, k, c, b, t in params
        ]
        fleet = FleetScenario(vehicles, ConstantGhost(20.0), dt=0.1, duration=1.0)
        sys = linearize(fleet)
        for omega in (0.1, 0.9, 3.3):
            g_chain = np.abs(freq_response(sys, omega))
            singles = [
                abs(analytic_single_gain(m, k, c, b, omega, t))
                for m, k, c, b, t in params
            ]
            expect = np.cumprod(singles)
            assert np.allclose(g_chain, expect, rtol=1e-8)

    def test_thomas_path_matches_dense(self):
        rng = np.random.default_rng(5)
        om = np.geomspace(1e-3, 1e2, 75)
        for _ in range(6):
            n = int(rng.integers(1, 7))
            vehicles = [
                VehicleParams(
                    m=rng.uniform(0.5, 2), k=rng.uniform(-3, 5),
                    c=rng.uniform(-2, 5), alpha=rng.uniform(0, 1),
                    beta=rng.uniform(0.5, 3), tau=float(rng.choice([0, 0.1, 0.35])),
                )
                for _ in range(n)
            ]
            fleet = FleetScenario(vehicles, ConstantGhost(20.0), dt=0.1, duration=1.0)
            sys = linearize(fleet)
            dense = freq_response(sys, om)
            fast = _chain_gains(sys, om)
            assert np.allclose(dense, fast, atol=1e-10)

    def test_rejects_negative_omega(self):
        sys = linearize(uniform_fleet(1, 1.0, 1.0))
        with pytest.raises(ValueError):
            freq_response(sys, -1.0)


class TestPade:
    def test_coefficients_against_exponential(self):
        tau = 0.3
        num, den = pade_coefficients(tau, 3)
        for omega in (0.2, 1.0, 3.0):
            s = 1j * omega
            approx = np.polyval(num, s) / np.polyval(den, s)
            assert approx == pytest.approx(np.exp(-s * tau), abs=2e-3)

    def test_first_order_coefficients(self):
        num, den = pade_coefficients(2.0, 1)
        assert np.allclose(num, [-1.0, 1.0])
        assert np.allclose(den, [1.0, 1.0])

    def test_augmented_reduces_without_delays(self):
        sys = linearize(uniform_fleet(3, 1.0, 1.0))
        a_e = build_augmented(sys, 3)
        assert a_e.shape == (6, 6)
        assert np.allclose(a_e, sys.a0 + sum(sys.a_delayed))

    def test_augmented_size_with_delays(self):
        sys = linearize(uniform_fleet(3, 1.0, 1.0, tau=0.2))
        assert build_augmented(sys, 3).shape == (15, 15)


class TestPlantStable:
    def test_no_delay_single_vehicle(self):
        assert plant_stable(linearize(uniform_fleet(1, 1.0, 1.0)))

    def test_negative_stiffness_unstable(self):
        # positive root of s^2 + (c + k beta) s + k for k < 0
        assert not plant_stable(linearize(uniform_fleet(1, -0.5, 1.0)))

    def test_margin_matches_quadratic_roots(self):
        sys = linearize(uniform_fleet(1, 1.0, 1.0))
        assert plant_margin(sys) == pytest.approx(-1.0, abs=1e-9)

    def test_agrees_with_time_domain_on_sampled_cells(self):
        # perturbation decay/growth of the delayed nonlinear simulation
        for kt, ct, expect in [(1.0, 1.0, True), (5.0, -1.0, False), (0.5, 3.0, False)]:
            fleet = uniform_fleet(5, kt, ct, tau=0.3)
            assert plant_stable(linearize(fleet)) is expect

            sim_fleet = FleetScenario(
                fleet.vehicles, ConstantGhost(20.0), dt=0.025, duration=120.0
            )
            pert = np.zeros(10)
            pert[1] = 1e-3
            try:
                traj = simulate(sim_fleet, initial_perturbation=pert)
                dev = np.abs(traj.speeds - 20.0).max(axis=0)
                third = dev.size // 3
                decays = bool(dev[-third:].max() < 0.5 * dev[:third].max())
            except SimulationDiverged:
                decays = False
            assert decays is expect


class TestStringStable:
    def test_single_vehicle_closed_form(self):
        # string stable iff 2 c~ + k~ >= 2 (k~ > 0) for m = beta = 1
        stable = string_stable(linearize(uniform_fleet(1, 1.0, 1.0)))
        assert stable.stable
        assert stable.sup_gains[0] <= 1 + 1e-6
        unstable = string_stable(linearize(uniform_fleet(1, 0.5, 0.25)))
        assert not unstable.stable
        assert unstable.sup_gains[0] > 1.0

    def test_mid_chain_amplification_visible(self):
        # head-to-tail attenuating chain that fails through vehicle 2:
        # a soft underdamped vehicle amid firm ones
        fleet = chain_fleet([2.5, 0.6, 3.0, 3.0], [1.8, 0.08, 2.2, 2.2])
        sys = linearize(fleet)
        assert plant_stable(sys)
        res = string_stable(sys)
        assert not res.stable
        assert res.sup_gains[-1] <= 1 + 1e-6   # tail attenuates
        assert res.sup_gains[1] > 1.05         # in-between vehicle amplifies
        assert int(np.argmax(res.sup_gains)) == 1

    def test_dc_anchor_within_tolerance(self):
        # gains approach 1 at low frequency; threshold is 1 + tol
        res = string_stable(linearize(uniform_fleet(3, 2.0, 2.0)))
        assert res.stable
        assert np.all(res.sup_gains <= 1 + 1e-6)
        assert np.all(res.sup_gains > 0.999)

    def test_pole_on_axis_counts_as_unstable(self):
        # hand-built system singular exactly at omega = 1
        a0 = np.array([[0.0, -1.0], [0.0, 0.0]])
        ad = np.array([[0.0, 0.0], [1.0, 0.0]])
        sys = LinearizedSystem(
            a0=a0, a_delayed=(ad,), b_now=np.array([1.0, 0.0]),
            b_delayed=np.array([0.0, 0.0]), c=np.array([[0.0, 1.0]]),
            delays=np.array([0.0]), chain=False,
        )
        res = string_stable(sys, omega_grid=np.array([0.5, 1.0, 2.0]), refine=False)
        assert not res.stable
        assert np.isinf(res.sup_gains).any()

    def test_early_exit_matches_full_verdict(self):
        for kt, ct in [(1.0, 1.0), (0.5, 0.25), (3.0, 0.1)]:
            sys = linearize(uniform_fleet(6, kt, ct))
            full = string_stable(sys)
            fast = string_stable(sys, early_exit=True)
            assert full.stable == fast.stable

    def test_grid_density_does_not_change_classification(self):
        for kt in np.arange(0.4, 3.2, 0.4):
            for ct in np.arange(-0.4, 1.6, 0.4):
                sys = linearize(uniform_fleet(2, float(kt), float(ct)))
                if not plant_stable(sys):
                    continue
                res_a = string_stable(sys, np.geomspace(1e-3, 1e2, 1000))
                res_b = string_stable(sys, np.geomspace(1e-3, 1e2, 2000))
                assert res_a.stable == res_b.stable


class TestSweep:
    def test_grid_spec_values(self):
        vals = GridSpec(-9.9, 9.9, 0.1).values()
        assert vals.size == 199
        assert vals[0] == pytest.approx(-9.9)
        assert vals[-1] == pytest.approx(9.9)

    def test_single_vehicle_boundary_matches_closed_form(self):
        template = uniform_fleet(1, 1.0, 1.0, alpha=0.0)
        grid = GridSpec(-2.0, 4.0, 0.5)
        smap = sweep(template, grid)
        for ik, kt in enumerate(smap.k_values):
            for ic, ct in enumerate(smap.c_values):
                if abs(2 * ct + kt - 2.0) <= 0.55 or abs(kt) < 0.25:
                    continue  # boundary-adjacent cells may fall either way
                expect = kt > 0 and 2 * ct + kt >= 2.0
                got = smap.classes[ik, ic] == int(CellClass.STRING_STABLE)
                assert got == expect, (kt, ct)

    def test_parallel_equals_serial(self):
        template = uniform_fleet(2, 1.0, 1.0)
        grid = GridSpec(-1.0, 2.0, 0.75)
        serial = sweep(template, grid, workers=1)
        parallel = sweep(template, grid, workers=2)
        assert np.array_equal(serial.classes, parallel.classes)
        assert np.allclose(serial.sup_gain, parallel.sup_gain, equal_nan=True)

    def test_nesting_assertion(self):
        with pytest.raises(AssertionError):
            StabilityMap(
                k_values=np.array([1.0]), c_values=np.array([1.0]),
                classes=np.array([[int(CellClass.STRING_STABLE)]], dtype=np.int8),
                worst_vehicle=np.array([[1]], dtype=np.int16),
                sup_gain=np.array([[1.0]]),
                plant_margin_grid=np.array([[0.5]]),  # not plant stable
                boundary=np.array([[False]]),
            )

    def test_counts_and_export(self, tmp_path):
        template = uniform_fleet(1, 1.0, 1.0, alpha=0.0)
        smap = sweep(template, GridSpec(-1.0, 2.0, 1.0))
        counts = smap.counts()
        assert sum(counts.values()) == smap.classes.size
        out = tmp_path / "map.csv"
        export_stability_map(smap, out)
        lines = out.read_text().splitlines()
        assert lines[0] == "k_tilde,c_tilde,class,worst_vehicle,sup_gain"
        assert len(lines) == 1 + smap.classes.size
        assert any("STRING_STABLE" in ln for ln in lines[1:])

    def test_delays_override(self):
        template = uniform_fleet(2, 1.0, 1.0)
        smap = sweep(template, GridSpec(0.5, 1.5, 0.5), delays=0.25)
        assert smap.meta["delays"] == [0.25, 0.25]
        with pytest.raises(ValueError):
            sweep(template, GridSpec(0.5, 1.5, 0.5), delays=-0.1)
