import numpy as np
import pytest

from springchain import (
    ChainState,
    ConstantGhost,
    FleetScenario,
    VehicleParams,
    eom_rhs,
    equilibrium,
    from_perturbation,
    spacing_policy,
    to_perturbation,
)


def make_fleet(vehicles, v0=20.0):
    return FleetScenario(vehicles, ConstantGhost(v0), dt=0.1, duration=10.0,
                         initial_speed=v0)


class TestVehicleParams:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            VehicleParams(m=0, k=1, c=1)
        with pytest.raises(ValueError):
            VehicleParams(m=1, k=1, c=1, beta=0)
        with pytest.raises(ValueError):
            VehicleParams(m=1, k=1, c=1, tau=-0.1)
        with pytest.raises(ValueError):
            VehicleParams(m=1, k=1, c=1, alpha=1.5)
        with pytest.raises(ValueError):
            VehicleParams(m=1, k=1, c=1, v_lower=5, v_upper=5)
        with pytest.raises(ValueError):
            VehicleParams(m=1, k=float("nan"), c=1)

    def test_negative_stiffness_allowed(self):
        # sweeps probe negative spring/damper values
        v = VehicleParams(m=1, k=-3.0, c=-0.5)
        assert v.k == -3.0

    def test_saturation_levels(self):
        v = VehicleParams(m=1, k=1, c=1, beta=2.5, v_lower=2, v_upper=40)
        assert v.x_min == pytest.approx(5.0)
        assert v.x_max == pytest.approx(100.0)

    def test_alpha_closed_interval(self):
        VehicleParams(m=1, k=1, c=1, alpha=0.0)
        VehicleParams(m=1, k=1, c=1, alpha=1.0)


class TestSpacingPolicy:
    def test_lower_saturation(self):
        p = VehicleParams(m=1, k=1, c=1, beta=2.5, v_lower=2)
        assert spacing_policy(p, 1.0) == pytest.approx(5.0)

    def test_linear_region(self):
        p = VehicleParams(m=1, k=1, c=1, beta=2.5)
        assert spacing_policy(p, 10.0) == pytest.approx(25.0)

    def test_upper_saturation(self):
        p = VehicleParams(m=1, k=1, c=1, beta=1.0, v_upper=40)
        assert spacing_policy(p, 50.0) == pytest.approx(40.0)

    def test_continuity_at_thresholds(self):
        p = VehicleParams(m=1, k=1, c=1, beta=2.5, v_lower=2, v_upper=40)
        for v0, ref in ((p.v_lower, p.x_min), (p.v_upper, p.x_max)):
            for eps in (1e-3, 1e-6, 1e-9):
                tol = 2 * p.beta * eps
                assert spacing_policy(p, v0 - eps) == pytest.approx(ref, abs=tol)
                assert spacing_policy(p, v0 + eps) == pytest.approx(ref, abs=tol)

    def test_rejects_non_finite(self):
        p = VehicleParams(m=1, k=1, c=1)
        with pytest.raises(ValueError):
            spacing_policy(p, float("nan"))
        with pytest.raises(ValueError):
            spacing_policy(p, float("inf"))

    def test_array_input(self):
        p = VehicleParams(m=1, k=1, c=1, beta=2.0, v_lower=2, v_upper=40)
        out = spacing_policy(p, np.array([1.0, 10.0, 50.0]))
        assert np.allclose(out, [4.0, 20.0, 80.0])


class TestEquilibrium:
    def test_uniform_headways(self):
        fleet = make_fleet([VehicleParams(m=1, k=1, c=1, beta=1.0)] * 3)
        eq = equilibrium(fleet, 20.0)
        assert np.allclose(eq.speeds, 20.0)
        assert np.allclose(eq.headways, 20.0)

    def test_zero_speed_with_zero_lower_threshold(self):
        veh = VehicleParams(m=1, k=1, c=1, beta=1.0, v_lower=0.0)
        fleet = FleetScenario([veh], ConstantGhost(0.0), dt=0.1, duration=1.0,
                              initial_speed=0.0)
        eq = equilibrium(fleet, 0.0)
        assert np.allclose(eq.headways, 0.0)

    def test_heterogeneous_headway(self):
        vehicles = [
            VehicleParams(m=1, k=1, c=1, beta=1.0),
            VehicleParams(m=1, k=1, c=1, beta=2.5),
        ]
        eq = equilibrium(make_fleet(vehicles, 10.0), 10.0)
        assert np.allclose(eq.headways, [10.0, 25.0])

    def test_rejects_saturated_speed(self):
        fleet = make_fleet([VehicleParams(m=1, k=1, c=1, v_lower=2, v_upper=40)])
        with pytest.raises(ValueError):
            equilibrium(fleet, 1.0)
        with pytest.raises(ValueError):
            equilibrium(fleet, 45.0)


class TestEomRhs:
    def test_equilibrium_is_fixed_point(self):
        vehicles = [
            VehicleParams(m=1.2, k=0.8, c=1.1, alpha=0.3, beta=1.5, tau=0.4),
            VehicleParams(m=0.9, k=1.4, c=0.6, alpha=0.1, beta=2.0, tau=0.2),
            VehicleParams(m=1.0, k=1.0, c=1.0, alpha=0.2, beta=1.0, tau=0.0),
        ]
        fleet = make_fleet(vehicles)
        eq = equilibrium(fleet, 20.0)
        h_dot, v_dot = eom_rhs(fleet, eq, [eq] * 3, 20.0, 20.0)
        assert np.all(h_dot == 0.0)
        assert np.all(v_dot == 0.0)

    def test_single_vehicle_direct_substitution(self):
        # m=1, k=1, c=1, beta=1: gap 11 against desired 10 -> 1 m/s^2
        veh = VehicleParams(m=1, k=1, c=1, beta=1.0)
        fleet = make_fleet([veh], v0=10.0)
        state = ChainState(headways=[11.0], speeds=[10.0])
        h_dot, v_dot = eom_rhs(fleet, state, [state], 10.0, 10.0)
        assert v_dot[0] == pytest.approx(1.0)
        assert h_dot[0] == pytest.approx(0.0)

    def test_two_vehicle_hand_expansion(self):
        # independent expansion of the force balance for N=2, with distinct
        # current/delayed states so time-argument mix-ups would show
        v1 = VehicleParams(m=1.3, k=0.7, c=1.9, alpha=0.25, beta=1.2, tau=0.5)
        v2 = VehicleParams(m=0.8, k=1.6, c=0.4, alpha=0.9, beta=2.2, tau=0.3)
        fleet = make_fleet([v1, v2])
        now = ChainState(headways=[25.0, 33.0], speeds=[19.0, 21.5])
        del1 = ChainState(headways=[27.0, 31.0], speeds=[20.5, 18.0])
        del2 = ChainState(headways=[24.0, 35.0], speeds=[21.0, 19.5])
        g_now, g_del = 22.0, 20.25

        def pol(veh, v):
            return veh.beta * min(max(v, veh.v_lower), veh.v_upper)

        exp_vdot1 = (
            v1.k * (del1.headways[0] - pol(v1, del1.speeds[0]))
            + v1.c * (g_del - del1.speeds[0])
            - v1.alpha * v2.k * (del1.headways[1] - pol(v2, del1.speeds[1]))
            - v1.alpha * v2.c * (del1.speeds[0] - del1.speeds[1])
        ) / v1.m
        exp_vdot2 = (
            v2.k * (del2.headways[1] - pol(v2, del2.speeds[1]))
            + v2.c * (del2.speeds[0] - del2.speeds[1])
        ) / v2.m

        h_dot, v_dot = eom_rhs(fleet, now, [del1, del2], g_now, g_del)
        assert v_dot[0] == pytest.approx(exp_vdot1, rel=1e-12)
        assert v_dot[1] == pytest.approx(exp_vdot2, rel=1e-12)
        assert h_dot[0] == pytest.approx(g_now - now.speeds[0])
        assert h_dot[1] == pytest.approx(now.speeds[0] - now.speeds[1])

    def test_rear_coupling_removal(self):
        # alpha = 0 makes each acceleration independent of trailing states
        vehicles = [VehicleParams(m=1, k=1.5, c=0.8, alpha=0.0, beta=1.0)] * 3
        fleet = make_fleet(vehicles)
        eq = equilibrium(fleet, 20.0)
        base = ChainState(headways=eq.headways + [1.0, -2.0, 0.5],
                          speeds=eq.speeds + [0.3, -0.1, 0.7])
        _, v_dot_ref = eom_rhs(fleet, base, [base] * 3, 20.0, 20.0)
        bumped = ChainState(headways=base.headways + [0, 0, 5.0],
                            speeds=base.speeds + [0, 0, -3.0])
        _, v_dot_bump = eom_rhs(fleet, bumped, [bumped] * 3, 20.0, 20.0)
        assert v_dot_bump[0] == pytest.approx(v_dot_ref[0], rel=1e-14)
        assert v_dot_bump[1] == pytest.approx(v_dot_ref[1], rel=1e-14)
        assert v_dot_bump[2] != pytest.approx(v_dot_ref[2])


class TestPerturbation:
    def setup_method(self):
        vehicles = [
            VehicleParams(m=1, k=1, c=1, beta=1.0),
            VehicleParams(m=1, k=1, c=1, beta=2.5),
        ]
        self.fleet = make_fleet(vehicles)
        self.eq = equilibrium(self.fleet, 20.0)

    def test_zero_at_equilibrium(self):
        assert np.all(to_perturbation(self.eq, self.eq) == 0.0)

    def test_round_trip_exact(self):
        state = ChainState(headways=[21.37, 49.0], speeds=[18.2, 20.001], time=3.0)
        x = to_perturbation(state, self.eq)
        back = from_perturbation(x, self.eq, time=3.0)
        assert np.array_equal(back.headways, state.headways)
        assert np.array_equal(back.speeds, state.speeds)

    def test_componentwise_subtraction(self):
        state = ChainState(headways=self.eq.headways + [1.0, 0.0],
                           speeds=self.eq.speeds + [-1.0, 0.0])
        x = to_perturbation(state, self.eq)
        assert np.allclose(x, [1.0, -1.0, 0.0, 0.0])

    def test_interleaved_ordering(self):
        state = ChainState(headways=self.eq.headways + [1.0, 2.0],
                           speeds=self.eq.speeds + [3.0, 4.0])
        assert np.allclose(to_perturbation(state, self.eq), [1.0, 3.0, 2.0, 4.0])
