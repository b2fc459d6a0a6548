import dataclasses
import itertools

import numpy as np
import pytest

from guardmpc import models, ocp, rollout, solver


@pytest.fixture(scope="module")
def stir():
    m = models.stir_tank()
    term = solver.synth_terminal(m, n_check=2000, seed=0)
    return m, ocp.spec_for_model(m, term)


def double_integrator(T_s=0.5):
    """Linear fixture: x'' = u discretized exactly by RK4 (polynomial flow)."""

    def f(x, u):
        out = np.empty_like(x)
        out[..., 0] = x[..., 1]
        out[..., 1] = u[..., 0]
        return out

    def jac(x, u):
        return np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]])

    return models.SystemModel(
        name="double_integrator", n_x=2, n_u=1, f=f, jac=jac,
        x_e=np.zeros(2), u_e=np.zeros(1), T_s=T_s, N=8,
        sample_lo=-np.ones(2), sample_hi=np.ones(2),
        u_lo=-np.ones(1), u_hi=np.ones(1),
        state_rows=np.vstack([np.eye(2) / 5.0, -np.eye(2) / 5.0]), substeps=1,
    )


def scalar_linear_model():
    """Continuous model whose exact one-step map is x+ = 0.5 x + u."""
    T = 1.0
    a = np.log(0.5) / T
    b = a / (np.exp(a * T) - 1.0)

    def f(x, u):
        return a * x + b * u

    def jac(x, u):
        return np.array([[a]]), np.array([[b]])

    return models.SystemModel(
        name="scalar_linear", n_x=1, n_u=1, f=f, jac=jac,
        x_e=np.zeros(1), u_e=np.zeros(1), T_s=T, N=4,
        sample_lo=-np.ones(1), sample_hi=np.ones(1),
        u_lo=-np.ones(1), u_hi=np.ones(1),
        state_rows=np.array([[0.5], [-0.5]]), substeps=64,
    )


def naive_dare_iteration(A, B, Q, R, iters=10000):
    """Riccati fixed-point oracle: iterate the recurrence to convergence."""
    P = Q.copy()
    for _ in range(iters):
        BtPB = R + B.T @ P @ B
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(BtPB, B.T @ P @ A)
        if np.max(np.abs(P_next - P)) < 1e-14:
            P = P_next
            break
        P = P_next
    return P


class TestSensitivities:
    def test_step_jacobians_match_finite_differences(self, stir):
        m, spec = stir
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = models.sample_initial_state(m, seed=1, index=rng.integers(50))
            u = rng.uniform(m.u_lo, m.u_hi)
            _, A, B = solver.step_jacobians(m, x, u)
            h = 1e-6
            A_fd = np.empty_like(A)
            for i in range(m.n_x):
                dx = np.zeros(m.n_x)
                dx[i] = h
                A_fd[:, i] = (rollout.step(m, x + dx, u) - rollout.step(m, x - dx, u)) / (2 * h)
            B_fd = ((rollout.step(m, x, u + h) - rollout.step(m, x, u - h)) / (2 * h)).reshape(-1, 1)
            assert np.max(np.abs(A - A_fd)) <= 1e-5 * max(1.0, np.abs(A_fd).max())
            assert np.max(np.abs(B - B_fd)) <= 1e-5 * max(1.0, np.abs(B_fd).max())

    def test_rollout_sensitivities_match_finite_differences(self, stir):
        m, spec = stir
        x0 = models.sample_initial_state(m, seed=2, index=3)
        rng = np.random.default_rng(1)
        useq = rng.uniform(m.u_lo, m.u_hi, size=(m.N, 1))
        z = useq.ravel()
        traj, useq2, S_x, S_u = solver._forward_pass(m, spec, x0, z, None)
        h = 1e-6
        for j in (0, 3, 9):
            dz = np.zeros_like(z)
            dz[j] = h
            tp, _ = solver._useq_from_z(m, spec, x0, z + dz, None)
            tm, _ = solver._useq_from_z(m, spec, x0, z - dz, None)
            fd = (tp - tm) / (2 * h)
            got = S_x[:, :, j]
            scale = max(1.0, np.abs(fd).max())
            assert np.max(np.abs(got - fd)) <= 1e-5 * scale


class TestSolve:
    def test_equilibrium_is_optimal(self, stir):
        m, spec = stir
        res = solver.solve_ocp(m, spec, m.x_e)
        assert res.feasible
        assert res.cost <= 1e-8

    def test_never_worse_than_feasible_initializer(self, stir):
        m, spec = stir
        x0 = m.x_e + np.array([0.05, 0.0])
        init = solver.terminal_controller_rollout(m, spec, x0)
        init_cost = ocp.total_cost(spec, m, x0, init)
        assert ocp.check_feasible(spec, m, x0, init).feasible
        res = solver.solve_ocp(m, spec, x0)
        assert res.feasible
        assert res.cost <= init_cost + 1e-12

    def test_converged_result_repasses_checker(self, stir):
        m, spec = stir
        n = 0
        for i in range(15):
            x0 = models.sample_initial_state(m, seed=3, index=i)
            res = solver.solve_ocp(m, spec, x0)
            if res.status == "converged":
                n += 1
                assert ocp.check_feasible(spec, m, x0, res.useq).feasible
        assert n >= 5

    def test_deterministic(self, stir):
        m, spec = stir
        x0 = models.sample_initial_state(m, seed=4, index=2)
        a = solver.solve_ocp(m, spec, x0)
        b = solver.solve_ocp(m, spec, x0)
        assert np.array_equal(a.useq, b.useq) and a.cost == b.cost

    def test_infeasible_initial_state(self, stir):
        m, spec = stir
        res = solver.solve_ocp(m, spec, m.x_e + np.array([0.25, 0.0]))
        assert res.status == "infeasible"

    def test_beats_grid_enumeration_at_short_horizon(self, stir):
        # brute-force oracle: 5 input levels per stage, feasibility filtered
        m, spec = stir
        spec2 = dataclasses.replace(spec, N=2)
        levels = np.linspace(m.u_lo[0], m.u_hi[0], 5)
        found = 0
        for i in range(40):
            x0 = models.sample_initial_state(m, seed=5, index=i)
            best = np.inf
            for combo in itertools.product(levels, repeat=2):
                useq = np.array(combo).reshape(2, 1)
                if ocp.check_feasible(spec2, m, x0, useq).feasible:
                    best = min(best, ocp.total_cost(spec2, m, x0, useq))
            if not np.isfinite(best):
                continue
            found += 1
            res = solver.solve_ocp(m, spec2, x0)
            assert res.feasible
            assert res.cost <= best + 1e-3
            if found >= 5:
                break
        assert found >= 5


class TestSynthTerminal:
    def test_matches_naive_riccati_iteration_oracle(self):
        # with synthesis weights equal to the stage weights, the terminal
        # cost is margin_factor times the Riccati fixed point
        m = double_integrator()
        Q, R = np.eye(2), np.eye(1)
        term = solver.synth_terminal(m, Q, R, n_check=500, margin_factor=2.0,
                                     synthesis_weights=(Q, R), seed=0)
        _, A, B = solver.step_jacobians(m, m.x_e, m.u_e)
        P_oracle = naive_dare_iteration(A, B, Q, R)
        assert np.max(np.abs(term.P_f - 2.0 * P_oracle)) <= 1e-10 * np.abs(P_oracle).max()

    def test_decrease_equality_at_origin(self, stir):
        m, spec = stir
        term = spec.terminal
        x_next = rollout.step(m, m.x_e, m.u_e)
        v_next = float((x_next - m.x_e) @ term.P_f @ (x_next - m.x_e))
        assert v_next <= 1e-20  # 0 <= 0 with equality at the fixed point

    def test_smaller_input_box_never_larger_radius(self):
        m = models.stir_tank()
        term = solver.synth_terminal(m, n_check=1000, seed=0)
        mid = m.u_e[0]
        m_small = dataclasses.replace(
            m,
            u_lo=np.array([mid - 0.5 * (mid - m.u_lo[0])]),
            u_hi=np.array([mid + 0.5 * (m.u_hi[0] - mid)]),
        )
        term_small = solver.synth_terminal(m_small, n_check=1000, seed=0)
        assert term_small.alpha <= term.alpha + 1e-12

    def test_certificates_pass_for_all_benchmarks(self):
        for make in (models.stir_tank, models.quadcopter, lambda: models.chain_mass(3)):
            m = make()
            term = solver.synth_terminal(m, n_check=1500, seed=0)
            rep = solver.certify_terminal(m, term, n_samples=1500, seed=11)
            assert rep["ok"], (m.name, rep)

    def test_interior_certificate(self, stir):
        m, spec = stir
        rep = solver.certify_terminal(m, spec, n_samples=2000, seed=12, boundary=False)
        assert rep["ok"], rep


class TestLipschitzEstimate:
    def test_linear_model_exact(self):
        m = scalar_linear_model()
        x1 = rollout.step(m, np.array([1.0]), np.array([0.0]))
        assert abs(x1[0] - 0.5) < 1e-9  # fourth-order error at 64 substeps
        est = solver.estimate_lipschitz(m, 200, eps=0.0, seed=0)
        assert est.L_f == pytest.approx(0.5, abs=1e-8)

    def test_zero_eps_zero_displacement(self, stir):
        m, spec = stir
        est = solver.estimate_lipschitz(m, 100, eps=0.0, seed=0)
        assert est.eps_tilde == 0.0

    def test_stir_displacement_close_to_grid_oracle(self, stir):
        # dense-grid oracle over the box and input range
        m, spec = stir
        eps = 1e-4
        xs1 = np.linspace(m.x_e[0] - 0.2, m.x_e[0] + 0.2, 100)
        xs2 = np.linspace(m.x_e[1] - 0.2, m.x_e[1] + 0.2, 100)
        us = np.linspace(m.u_lo[0], m.u_hi[0], 50)
        X1, X2, U = np.meshgrid(xs1, xs2, us, indexing="ij")
        pts = np.stack([X1.ravel(), X2.ravel()], axis=-1)
        uu = U.ravel()[:, None]
        base = rollout.step(m, pts, uu)
        worst = 0.0
        for sgn in (1.0, -1.0):
            disp = rollout.step(m, pts, uu + sgn * eps)
            worst = max(worst, float(np.max(np.abs(disp - base))))
        est = solver.estimate_lipschitz(m, 4000, eps=eps, seed=0)
        assert est.eps_tilde >= 0.8 * worst
        assert est.eps_tilde <= worst * 1.001

    def test_diagnostics_carry_top_values(self, stir):
        m, spec = stir
        est = solver.estimate_lipschitz(m, 500, eps=1e-4, seed=0)
        assert est.top_L_f[0] == est.L_f
        assert est.top_L_f[0] >= est.top_L_f[1] >= est.top_L_f[2]


class TestLemmaProbe:
    def test_zero_eps_trivially_passes(self, stir):
        m, spec = stir
        t = ocp.LipschitzTightening(L_f=0.0, eps=0.0, eps_tilde=0.0)
        spec_t = dataclasses.replace(spec, tightening=t)
        x0 = m.x_e + np.array([0.03, 0.0])
        rep = solver.lemma1_probe(m, spec_t, x0, eps=0.0, n_trials=20, seed=0)
        assert rep.passed

    def test_short_horizon_lipschitz_design_passes(self):
        # at a horizon where the growth factors are still meaningful, the
        # tightened design keeps every perturbation nominally feasible
        m = models.stir_tank(N=4)
        term = solver.synth_terminal(m, n_check=1000, seed=0)
        tight = solver.lipschitz_tightening_for(m, term, eps=1e-4, seed=0)
        spec = ocp.spec_for_model(m, term, tightening=tight)
        checked = 0
        for i in range(60):
            x0 = models.sample_initial_state(m, seed=6, index=i)
            try:
                rep = solver.lemma1_probe(m, spec, x0, eps=1e-4, n_trials=50, seed=i)
            except ValueError:
                continue
            checked += 1
            assert rep.passed, rep.failures[:2]
            if checked >= 10:
                break
        assert checked >= 10

    def test_untightened_design_fails_near_boundary(self, stir):
        # without tightening, some near-boundary state has a perturbation
        # that exits the nominal constraints, demonstrating the hypothesis
        # of the approximation guarantee is needed
        m, spec = stir
        t = ocp.LipschitzTightening(L_f=0.0, eps=0.0, eps_tilde=0.0)
        spec_t = dataclasses.replace(spec, tightening=t)
        eps = 5e-3  # exaggerated error bound to expose the boundary quickly
        failed = False
        for i in range(40):
            x0 = models.sample_initial_state(m, seed=7, index=i)
            try:
                rep = solver.lemma1_probe(m, spec_t, x0, eps=eps, n_trials=100, seed=i)
            except ValueError:
                continue
            if not rep.passed:
                failed = True
                break
        assert failed


class TestActiveSetQp:
    def test_box_projection(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = 4
            c = rng.normal(size=n) * 2.0
            H = np.eye(n)
            g = -c
            C = np.vstack([np.eye(n), -np.eye(n)])
            d = np.ones(2 * n)
            x, lam = solver._qp_active_set(H, g, C, d, np.zeros(n), [])
            assert np.allclose(x, np.clip(c, -1.0, 1.0), atol=1e-9)

    def test_equality_like_active_constraint(self):
        # minimize ||x - (2, 0)||^2 s.t. x0 <= 1: solution (1, 0), lam > 0
        H = np.eye(2)
        g = -np.array([2.0, 0.0])
        C = np.array([[1.0, 0.0]])
        d = np.array([1.0])
        x, lam = solver._qp_active_set(H, g, C, d, np.zeros(2), [])
        assert np.allclose(x, [1.0, 0.0], atol=1e-9)
        assert lam[0] > 0.0
