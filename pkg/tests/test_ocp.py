import json

import numpy as np
import pytest

from guardmpc import models, ocp, rollout, solver


@pytest.fixture(scope="module")
def stir():
    m = models.stir_tank()
    term = solver.synth_terminal(m, n_check=2000, seed=0)
    return m, ocp.spec_for_model(m, term)


@pytest.fixture(scope="module")
def quad():
    m = models.quadcopter()
    term = solver.synth_terminal(m, n_check=2000, seed=0)
    return m, ocp.spec_for_model(m, term)


@pytest.fixture(scope="module")
def chain():
    m = models.chain_mass(3)
    term = solver.synth_terminal(m, n_check=2000, seed=0)
    return m, ocp.spec_for_model(m, term)


class TestCosts:
    def test_stage_cost_zero_at_target(self, stir):
        m, spec = stir
        assert ocp.stage_cost(spec, m, m.x_e, m.u_e) == 0.0

    def test_stage_cost_published_weights(self, stir):
        m, spec = stir
        # Q = I2, R = 1e-5: a pure first-coordinate offset of 0.1 costs 0.01
        x = m.x_e + np.array([0.1, 0.0])
        assert ocp.stage_cost(spec, m, x, m.u_e) == pytest.approx(0.01)

    def test_terminal_cost_positive_off_target(self, stir):
        m, spec = stir
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = m.x_e + rng.normal(scale=0.05, size=2)
            assert ocp.terminal_cost(spec, m, x) > 0.0

    def test_total_cost_zero_at_exact_equilibrium(self, quad):
        m, spec = quad
        useq = np.tile(m.u_e, (m.N, 1))
        assert ocp.total_cost(spec, m, np.zeros(10), useq) == 0.0

    def test_total_cost_pure(self, stir):
        m, spec = stir
        x0 = models.sample_initial_state(m, seed=4, index=0)
        useq = np.tile(m.u_e, (m.N, 1))
        assert ocp.total_cost(spec, m, x0, useq) == ocp.total_cost(spec, m, x0, useq)

    def test_total_cost_dominates_terminal(self, stir):
        m, spec = stir
        rng = np.random.default_rng(1)
        for _ in range(10):
            x0 = models.sample_initial_state(m, seed=5, index=rng.integers(100))
            useq = rng.uniform(m.u_lo, m.u_hi, size=(m.N, 1))
            traj = rollout.rollout(m, x0, useq)
            total = ocp.trajectory_cost(spec, m, traj, useq)
            assert total >= ocp.terminal_cost(spec, m, traj[-1]) - 1e-12


class TestCheckFeasible:
    def test_origin_feasible(self, quad):
        m, spec = quad
        rep = ocp.check_feasible(spec, m, np.zeros(10), np.tile(m.u_e, (m.N, 1)))
        assert rep.feasible and rep.first_violation is None

    def test_state_violation_at_stage_zero(self, stir):
        m, spec = stir
        x0 = m.x_e + np.array([0.25, 0.0])
        rep = ocp.check_feasible(spec, m, x0, np.tile(m.u_e, (m.N, 1)))
        assert not rep.feasible
        assert rep.first_violation.kind == "state"
        assert rep.first_violation.stage == 0

    def test_solver_output_recheck(self, stir):
        # solver/checker consistency: a converged solve re-passes the check
        m, spec = stir
        found = 0
        for i in range(20):
            x0 = models.sample_initial_state(m, seed=6, index=i)
            res = solver.solve_ocp(m, spec, x0)
            if res.feasible:
                found += 1
                assert ocp.check_feasible(spec, m, x0, res.useq).feasible
        assert found >= 5

    def test_input_violation_localized(self, quad):
        m, spec = quad
        useq = np.tile(m.u_e, (m.N, 1))
        useq[3, 0] = m.u_hi[0] + 0.05
        rep = ocp.check_feasible(spec, m, np.zeros(10), useq)
        assert rep.first_violation.kind == "input"
        assert rep.first_violation.stage == 3

    def test_inputs_checked_before_states(self, stir):
        m, spec = stir
        # state violated from stage 0, input from stage 0 as well: input first
        x0 = m.x_e + np.array([0.25, 0.0])
        useq = np.tile(m.u_e, (m.N, 1))
        useq[0, 0] = m.u_hi[0] + 1.0
        rep = ocp.check_feasible(spec, m, x0, useq)
        assert rep.first_violation.kind == "input"

    def test_terminal_membership_both_directions(self, stir):
        m, spec = stir
        term = spec.terminal
        L = np.linalg.cholesky(term.P_f)
        rng = np.random.default_rng(2)
        for _ in range(50):
            z = rng.normal(size=2)
            z /= np.linalg.norm(z)
            r = rng.uniform(0.5, 1.5)
            x = r * term.alpha * np.linalg.solve(L.T, z)
            val = float(x @ term.P_f @ x)
            norm_val = np.linalg.norm(L.T @ x)
            assert (norm_val <= term.alpha) == (val <= term.alpha**2 + 1e-15)


class TestTightened:
    def test_requires_tightening(self, stir):
        m, spec = stir
        with pytest.raises(ValueError, match="no tightening"):
            ocp.check_feasible_tightened(spec, m, m.x_e, np.tile(m.u_e, (m.N, 1)))

    def test_zero_lipschitz_degenerates_to_nominal(self, stir):
        import dataclasses
        m, spec = stir
        t = ocp.LipschitzTightening(L_f=0.0, eps=0.0, eps_tilde=0.0)
        spec_t = dataclasses.replace(spec, tightening=t)
        rng = np.random.default_rng(3)
        for i in range(100):
            x0 = models.sample_initial_state(m, seed=7, index=i)
            useq = rng.uniform(m.u_lo, m.u_hi, size=(m.N, 1))
            a = ocp.check_feasible(spec, m, x0, useq)
            b = ocp.check_feasible_tightened(spec_t, m, x0, useq)
            assert a.feasible == b.feasible

    def test_zero_tube_degenerates_to_alpha_bar(self, chain):
        import dataclasses
        m, spec = chain
        alpha_bar = 0.5 * spec.terminal.alpha
        t = ocp.TubeTightening(rho=1.0, wbar=0.0,
                               c=np.zeros(spec.state_set.n_rows),
                               alpha_bar=alpha_bar)
        spec_t = dataclasses.replace(spec, tightening=t)
        spec_small = dataclasses.replace(
            spec,
            terminal=ocp.TerminalIngredients(
                P_f=spec.terminal.P_f, K_f=spec.terminal.K_f, alpha=alpha_bar
            ),
        )
        rng = np.random.default_rng(4)
        for i in range(50):
            x0 = models.sample_initial_state(m, seed=8, index=i)
            useq = rng.uniform(m.u_lo, m.u_hi, size=(m.N, 3))
            a = ocp.check_feasible_tightened(spec_t, m, x0, useq)
            b = ocp.check_feasible(spec_small, m, x0, useq)
            assert a.feasible == b.feasible

    def test_box_input_pontryagin_difference(self, chain):
        # |u| <= 1 rows with eps = 0.1 tighten to |u| <= 0.9 exactly
        import dataclasses
        m, spec = chain
        t = ocp.LipschitzTightening(L_f=0.0, eps=0.1, eps_tilde=0.0)
        spec_t = dataclasses.replace(spec, tightening=t)
        useq = np.tile(m.u_e, (m.N, 1))
        useq[0] = np.array([0.95, 0.0, 0.0])
        rep = ocp.check_feasible_tightened(spec_t, m, m.x_e, useq)
        assert not rep.feasible and rep.first_violation.kind == "input"
        useq[0] = np.array([0.9 - 1e-9, 0.0, 0.0])
        rep = ocp.check_feasible_tightened(spec_t, m, m.x_e, useq)
        assert rep.feasible or rep.first_violation.kind != "input"

    def test_monotone_tightening(self, stir):
        import dataclasses
        m, spec = stir
        t = solver.lipschitz_tightening_for(m, spec.terminal, eps=1e-4, seed=0)
        spec_t = dataclasses.replace(spec, tightening=t)
        rng = np.random.default_rng(5)
        hits = 0
        for i in range(200):
            x0 = models.sample_initial_state(m, seed=9, index=i)
            useq = rng.uniform(m.u_lo, m.u_hi, size=(m.N, 1))
            if ocp.check_feasible_tightened(spec_t, m, x0, useq).feasible:
                hits += 1
                assert ocp.check_feasible(spec, m, x0, useq).feasible

    def test_lipschitz_factors(self):
        assert ocp.lipschitz_factors(1.0, 4)[3] == 3.0
        assert ocp.lipschitz_factors(2.0, 4)[3] == 7.0
        c = ocp.lipschitz_factors(0.0, 4)
        assert c[0] == 0.0 and np.all(c[1:] == 1.0)
        assert np.all(np.diff(ocp.lipschitz_factors(1.3, 10)) >= 0)

    def test_tube_levels_monotone_from_zero(self):
        t = ocp.TubeTightening(rho=2.0, wbar=0.3, c=np.ones(1), alpha_bar=1.0)
        s = ocp.tube_levels(t, 10, 0.1)
        assert s[0] == 0.0
        assert np.all(s >= 0.0) and np.all(np.diff(s) >= 0.0)
        # exact exponential-hold discretization of s' = -rho s + wbar
        expected = (1 - np.exp(-2.0 * 0.1)) * 0.3 / 2.0
        assert s[1] == pytest.approx(expected, rel=1e-12)


class TestValidation:
    def test_polytope_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="finite"):
            ocp.Polytope(np.array([[np.inf, 0.0]]))

    def test_terminal_requires_spd(self):
        with pytest.raises(ValueError, match="positive definite"):
            ocp.TerminalIngredients(P_f=-np.eye(2), K_f=np.zeros((1, 2)), alpha=1.0)
        with pytest.raises(ValueError, match="radius"):
            ocp.TerminalIngredients(P_f=np.eye(2), K_f=np.zeros((1, 2)), alpha=0.0)

    def test_spec_weight_validation(self, stir):
        m, spec = stir
        with pytest.raises(ValueError, match="smallest eigenvalue"):
            ocp.OcpSpec(N=5, Q=np.diag([1.0, 0.0]), R=np.eye(1),
                        terminal=spec.terminal, state_set=spec.state_set,
                        input_set=spec.input_set)
        with pytest.raises(ValueError, match="positive definite"):
            ocp.OcpSpec(N=5, Q=np.eye(2), R=np.zeros((1, 1)),
                        terminal=spec.terminal, state_set=spec.state_set,
                        input_set=spec.input_set)

    def test_report_consistency_enforced(self):
        with pytest.raises(ValueError, match="feasible flag"):
            ocp.FeasibilityReport(True, ocp.Violation("state", 0, 0, 0.1))


class TestSerialization:
    def test_round_trip(self, stir):
        import dataclasses
        m, spec = stir
        t = ocp.LipschitzTightening(L_f=1.2, eps=1e-4, eps_tilde=3e-5)
        spec_t = dataclasses.replace(spec, tightening=t)
        for s in (spec, spec_t):
            text = ocp.spec_to_json(s)
            back = ocp.spec_from_json(text)
            assert ocp.spec_to_json(back) == text
            assert ocp.spec_digest(back) == ocp.spec_digest(s)

    def test_tube_round_trip(self, chain):
        import dataclasses
        m, spec = chain
        t = ocp.TubeTightening(rho=0.7, wbar=0.02, c=np.ones(2), alpha_bar=0.4,
                               K_delta=spec.terminal.K_f)
        spec_t = dataclasses.replace(spec, tightening=t)
        back = ocp.spec_from_json(ocp.spec_to_json(spec_t))
        assert isinstance(back.tightening, ocp.TubeTightening)
        assert np.allclose(back.tightening.K_delta, spec.terminal.K_f)

    def test_json_is_plain_nested_lists(self, stir):
        m, spec = stir
        doc = json.loads(ocp.spec_to_json(spec))
        assert isinstance(doc["Q"], list) and isinstance(doc["Q"][0], list)
