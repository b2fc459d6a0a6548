"""Crash-versus-recovery at the quadcopter's wall constraint.

From a feasible start drifting toward the wall at x_1 = 0.145 m, a policy
commanding full tilt toward the wall is applied two ways: naively (its first
input every step) and through the guarded evaluation.  The naive loop
crosses the wall; the guarded loop rejects the dangerous proposals, falls
back to its safe candidate, and stays inside.  Per-step CSV exports of both
runs are written next to this script for plotting.
"""

import os
import subprocess
import sys

import numpy as np

from guardmpc import dataio, guard, models, ocp, policy, solver

m = models.quadcopter()
term = solver.synth_terminal(m, n_check=4000, seed=0)
spec = ocp.spec_for_model(m, term)
wall_seeker = policy.make_fixture_policy(m, "adversarial")


def near_wall(seed, index):
    lo = np.array([-0.10, -0.2, -0.2, 0.2, -0.2, -0.2, 0.0, -0.5, -0.1, -0.5])
    hi = np.array([0.12, 0.2, 0.2, 0.7, 0.2, 0.2, np.pi / 18, 0.5, 0.1, 0.5])
    rng = models._rng_for_draw(seed, index)
    return rng.uniform(lo, hi)


xs, us, _ = dataio.sample_feasible_states(m, spec, 3, seed=31, sampler=near_wall,
                                          screen=False)
out_dir = os.path.dirname(os.path.abspath(__file__))
for i in range(3):
    naive = guard.simulate_closed_loop(m, spec, wall_seeker, xs[i], 25, mode="naive")
    safe = guard.simulate_closed_loop(m, spec, wall_seeker, xs[i], 25, mode="safe",
                                      init_sequence=us[i])
    x1_naive = [r.x[0] for r in naive.records]
    x1_safe = [r.x[0] for r in safe.records]
    kept = sum(1 for r in safe.records if not r.decision.accepted)
    print(f"start {i}: x1(0) = {xs[i][0]:+.3f}, v1(0) = {xs[i][3]:+.2f}")
    print(f"  naive : safe={naive.safe}  max x1 = {max(x1_naive):+.3f}"
          f"  (wall at +0.145)")
    print(f"  guard : safe={safe.safe}  max x1 = {max(x1_safe):+.3f}"
          f"  candidate applied on {kept}/25 steps")
    if i == 0:
        for tag, log in (("naive", naive), ("safe", safe)):
            path = os.path.join(out_dir, f"wall_run_{tag}.jsonl")
            dataio.write_run_log(log, path)
            csv = os.path.join(out_dir, f"wall_run_{tag}.csv")
            subprocess.run([sys.executable, "-m", "guardmpc", "plotdata",
                            "--log", path, "--out", csv], check=True)
