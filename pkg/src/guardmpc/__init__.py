"""Safety-augmented approximate MPC.

A fast approximator proposes full input sequences; an online check accepts a
proposal only when its forward simulation satisfies every constraint and
improves on a stored safe candidate, which is itself rebuilt each step by
shifting the applied sequence and appending the terminal controller.  The
package bundles three nonlinear benchmarks, a desk-scale SQP solver for
dataset generation and baselines, Riccati-based terminal ingredient
synthesis with sampled certification, Lipschitz and tube constraint
tightening, closed-loop simulation with structured run logs, and a CLI.
"""

from . import dataio, guard, models, ocp, policy, rollout, solver
from .guard import control_step, init, simulate_closed_loop
from .models import chain_mass, make_model, quadcopter, stir_tank
from .ocp import (
    LipschitzTightening,
    OcpSpec,
    TerminalIngredients,
    TubeTightening,
    check_feasible,
    check_feasible_tightened,
    spec_for_model,
    total_cost,
)
from .policy import MlpPolicy, infer, load_policy, save_policy
from .solver import SolveOptions, estimate_lipschitz, lemma1_probe, solve_ocp, synth_terminal

__version__ = "0.1.0"
