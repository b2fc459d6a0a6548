"""Three benchmark systems and the fixed-step prediction map.

Walks through the model zoo: equilibria, constraint geometry, sampling, and
the RK4 discretization everything downstream shares.
"""

import numpy as np

from guardmpc import models, rollout

for make in (models.stir_tank, models.quadcopter, lambda: models.chain_mass(3)):
    m = make()
    resid = np.max(np.abs(m.dynamics(m.x_e, m.u_e)))
    print(f"{m.name}: n_x={m.n_x} n_u={m.n_u} T_s={m.T_s} N={m.N} "
          f"|f(x_e,u_e)|_inf = {resid:.2e}")

# the equilibrium is a fixed point of the discrete map
m = models.stir_tank()
x1 = rollout.step(m, m.x_e, m.u_e)
print(f"\nstir tank one-step drift at the target: {np.max(np.abs(x1 - m.x_e)):.2e}")

# holding the input at its equilibrium value does NOT hold the state: the
# stir tank's target is an unstable stationary point
x = m.x_e + np.array([0.01, 0.0])
traj = rollout.rollout(m, x, np.tile(m.u_e, (m.N, 1)))
drift = np.linalg.norm(traj - m.x_e, axis=1)
print("open-loop drift from a 0.01 offset:",
      " ".join(f"{d:.3f}" for d in drift[::2]))

# deterministic sampling from the state box
print("\nthree stir tank samples (seed 7):")
for i in range(3):
    print("  ", np.round(models.sample_initial_state(m, seed=7, index=i), 4))

# the quadcopter integrator converges at fourth order
m = models.quadcopter()
x0 = np.array([-0.4, 0.3, 0.2, 0.4, -0.2, 0.3, 0.25, 0.8, -0.2, -0.5])
u = np.array([0.3, -0.25, 12.0])
ref = rollout.step(m, x0, u, 256)
print("\nquadcopter endpoint error vs a 256-substep reference:")
for n in (2, 4, 8, 16):
    err = np.max(np.abs(rollout.step(m, x0, u, n) - ref))
    print(f"  substeps {n:3d}: {err:.3e}")
