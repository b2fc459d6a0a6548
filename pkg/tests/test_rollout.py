import numpy as np
import pytest

from guardmpc import models, rollout


def cubic_blowup_model():
    """Tiny synthetic model whose state explodes in finite time."""

    def f(x, u):
        with np.errstate(over="ignore"):
            return x**3 + u

    return models.SystemModel(
        name="blowup", n_x=1, n_u=1,
        f=f, jac=models._finite_difference_jac(f, 1, 1),
        x_e=np.zeros(1), u_e=np.zeros(1), T_s=1.0, N=3,
        sample_lo=-np.ones(1), sample_hi=np.ones(1),
        u_lo=-np.ones(1), u_hi=np.ones(1),
        state_rows=np.array([[1.0]]), substeps=1,
    )


class TestStep:
    def test_stir_equilibrium_fixed_point(self):
        m = models.stir_tank()
        x = rollout.step(m, m.x_e, m.u_e, 10)
        assert np.max(np.abs(x - m.x_e)) <= 1e-3

    def test_quadcopter_equilibrium_fixed_point(self):
        m = models.quadcopter()
        x = rollout.step(m, np.zeros(10), m.u_e, 10)
        assert np.max(np.abs(x)) <= 1e-10

    def test_degenerate_sampling_time_rejected_at_construction(self):
        with pytest.raises(ValueError, match="sampling time"):
            models.stir_tank(T_s=0.0)

    def test_bad_substeps_rejected(self):
        m = models.stir_tank()
        with pytest.raises(ValueError, match="substeps"):
            rollout.step(m, m.x_e, m.u_e, 0)

    def test_divergence_names_substep(self):
        m = cubic_blowup_model()
        with pytest.raises(rollout.DivergenceError) as err:
            x = np.array([3.0])
            for _ in range(10):
                x = rollout.step(m, x, np.zeros(1), 4)
        assert err.value.substep is not None


class TestRollout:
    def test_horizon_zero_rejected_at_construction(self):
        with pytest.raises(ValueError, match="horizon"):
            models.stir_tank(N=0)

    def test_first_state_is_initial(self):
        m = models.stir_tank()
        x0 = models.sample_initial_state(m, seed=1, index=0)
        useq = np.tile(m.u_e, (m.N, 1))
        traj = rollout.rollout(m, x0, useq)
        assert np.array_equal(traj[0], x0)
        assert traj.shape == (m.N + 1, m.n_x)

    def test_rollout_equals_step_composition_bitwise(self):
        m = models.stir_tank()
        rng = np.random.default_rng(3)
        x0 = models.sample_initial_state(m, seed=2, index=1)
        useq = rng.uniform(m.u_lo, m.u_hi, size=(m.N, 1))
        traj = rollout.rollout(m, x0, useq)
        x = x0
        for k in range(m.N):
            x = rollout.step(m, x, useq[k])
        assert np.array_equal(traj[-1], x)

    def test_divergence_carries_stage(self):
        m = cubic_blowup_model()
        useq = np.zeros((3, 1))
        with pytest.raises(rollout.DivergenceError) as err:
            rollout.rollout(m, np.array([3.0]), useq)
        assert err.value.stage is not None

    def test_batched_rollout_matches_loop(self):
        m = models.quadcopter()
        rng = np.random.default_rng(4)
        x0s = np.stack([models.sample_initial_state(m, 3, i) * 0.1 for i in range(4)])
        useqs = rng.uniform(m.u_lo, m.u_hi, size=(4, m.N, 3))
        batch = rollout.rollout(m, x0s, useqs)
        for b in range(4):
            single = rollout.rollout(m, x0s[b], useqs[b])
            assert np.allclose(batch[b], single, atol=0, rtol=0)

    def test_time_invariance(self):
        # rolling a concatenated sequence equals restarting from the midpoint
        m = models.stir_tank()
        rng = np.random.default_rng(5)
        x0 = models.sample_initial_state(m, seed=6, index=0)
        useq = rng.uniform(m.u_lo, m.u_hi, size=(m.N, 1))
        full = rollout.rollout(m, x0, useq)
        half = m.N // 2
        second = rollout.rollout(m, full[half], useq[half:])
        assert np.array_equal(second[-1], full[-1])


class TestIntegratorOrder:
    def test_quadcopter_fourth_order_convergence(self):
        m = models.quadcopter()
        x0 = np.array([-0.4, 0.3, 0.2, 0.4, -0.2, 0.3, 0.25, 0.8, -0.2, -0.5])
        u = np.array([0.3, -0.25, 12.0])
        ref = rollout.step(m, x0, u, 256)
        err = {n: np.max(np.abs(rollout.step(m, x0, u, n) - ref)) for n in (2, 4, 8)}
        assert err[2] / err[4] >= 12.0
        assert err[4] / err[8] >= 12.0
