"""Online safety augmentation: validate, compare, apply, shift.

Any object with a ``propose(x) -> (N, n_u) array`` method can act as the
approximator.  Each control step evaluates the proposal, checks it against
the full input/state/terminal feasibility of the finite-horizon problem by
one forward simulation, and applies it only when it is feasible and strictly
cheaper than the stored safe candidate; otherwise the candidate's first
input is applied.  The new candidate is always the applied sequence shifted
one stage with the terminal controller appended, which keeps a feasible
sequence available at the next state by construction.  Consequences, both
asserted in the test suite: the closed loop never violates constraints, and
the sequence cost decreases by at least the stage cost every step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ocp as _ocp
from . import rollout as _rollout

__all__ = [
    "InitInfeasibleError",
    "CandidateInfeasibleError",
    "Decision",
    "GuardState",
    "StepRecord",
    "RunLog",
    "init",
    "control_step",
    "simulate_closed_loop",
    "MODES",
]

MODES = ("safe", "naive", "solver")


class InitInfeasibleError(RuntimeError):
    """No initialization strategy produced a feasible starting candidate."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CandidateInfeasibleError(RuntimeError):
    """The stored candidate failed re-validation at the measured state.

    Raised only in debug mode; it means the plant was not driven by the
    guard's own outputs (or was perturbed), which voids the invariant.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class Decision:
    """Outcome of one guarded control step."""

    accepted: bool                       # proposal applied instead of candidate
    reason: Optional[str]                # None | "infeasible" | "cost"
    report: Optional[_ocp.FeasibilityReport]
    reject_kinds: tuple[str, ...]        # all grounds for keeping the candidate
    v_nn: float                          # cost of the proposal (inf if diverged)
    v_cand: float                        # cost of the stored candidate
    v_applied: float                     # cost of the applied sequence
    clamped_terminal: bool               # appended terminal input hit the box
    timings_ns: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "accepted": self.accepted,
            "reason": self.reason,
            "reject_kinds": list(self.reject_kinds),
            "v_nn": self.v_nn,
            "v_cand": self.v_cand,
            "v_applied": self.v_applied,
            "clamped_terminal": self.clamped_terminal,
        }


@dataclass
class GuardState:
    model: object
    spec: _ocp.OcpSpec
    candidate: np.ndarray
    step_index: int = 0
    debug: bool = False
    history: Optional[list] = None
    # trajectory of the candidate from the state the guard expects next; kept
    # so the nominal loop needs only the proposal's forward simulation per
    # step, and checked bitwise against the measured state before use
    cand_traj: Optional[np.ndarray] = None


def _candidate_shift(model, spec, chosen, traj):
    """Applied sequence shifted by one stage, terminal controller appended.

    Also returns the shifted candidate's own trajectory, which starts at the
    successor state traj[1] and needs only one extra step to complete.
    """
    x_term = traj[-1]
    u_term = model.u_e + spec.terminal.K_f @ (x_term - model.x_e)
    clipped = np.clip(u_term, model.u_lo, model.u_hi)
    clamped = bool(np.any(clipped != u_term))
    candidate = np.vstack([chosen[1:], clipped])
    tail = _rollout.step(model, x_term, clipped)
    cand_traj = np.vstack([traj[1:], tail])
    return candidate, cand_traj, clamped


def init(model, spec, x0, strategy: str = "solver", policy=None,
         solver_options=None) -> GuardState:
    """Build a GuardState whose candidate is verified feasible at x0.

    Strategies: "steady_state" rolls out the clipped terminal controller
    (exact at the equilibrium, valid anywhere inside the terminal set);
    "solver" takes the optimizer's sequence; "policy" validates the
    approximator's own proposal.  A state is returned only if the candidate
    passes the feasibility check; the guard never starts unsafe.
    """
    from . import solver as _solver

    x0 = np.asarray(x0, dtype=float)
    if strategy == "steady_state":
        candidate = _solver.terminal_controller_rollout(model, spec, x0)
    elif strategy == "solver":
        res = _solver.solve_ocp(model, spec, x0, solver_options)
        if not res.feasible:
            raise InitInfeasibleError(
                f"solver found no feasible sequence at x0 (status {res.status})"
            )
        candidate = res.useq
    elif strategy == "policy":
        if policy is None:
            raise ValueError("strategy 'policy' needs a policy")
        candidate = np.asarray(policy.propose(x0), dtype=float)
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")
    return init_from_sequence(model, spec, x0, candidate, label=strategy)


def init_from_sequence(model, spec, x0, candidate, label="sequence") -> GuardState:
    """GuardState from an explicit starting sequence, validated before use."""
    candidate = np.asarray(candidate, dtype=float)
    traj = _rollout.rollout(model, x0, candidate)
    report = _ocp.check_feasible(spec, model, x0, candidate, traj=traj)
    if not report.feasible:
        raise InitInfeasibleError(
            f"initial candidate infeasible ({label}): {report.first_violation}",
            report=report,
        )
    return GuardState(model=model, spec=spec, candidate=candidate, cand_traj=traj)


def control_step(state: GuardState, x, policy):
    """One pass of the online evaluation; returns (applied input, Decision).

    The proposal wins only if it is feasible and has strictly lower cost;
    ties keep the candidate so replays are deterministic and the cost
    decrease chain never depends on the approximator.
    """
    model, spec = state.model, state.spec
    x = np.asarray(x, dtype=float)
    t_start = time.perf_counter_ns()

    if state.debug:
        rep = _ocp.check_feasible(spec, model, x, state.candidate)
        if not rep.feasible:
            raise CandidateInfeasibleError(
                "stored candidate failed re-validation; the plant state does "
                "not match the guard's own closed loop",
                report=rep,
            )

    proposal = np.asarray(policy.propose(x), dtype=float)
    t_infer = time.perf_counter_ns()

    if state.cand_traj is not None and np.array_equal(state.cand_traj[0], x):
        cand_traj = state.cand_traj
    else:
        cand_traj = _rollout.rollout(model, x, state.candidate)
    v_cand = float(_ocp.trajectory_cost(spec, model, cand_traj, state.candidate))
    try:
        prop_traj = _rollout.rollout(model, x, proposal)
        report = _ocp.check_feasible(spec, model, x, proposal, traj=prop_traj)
        v_nn = float(_ocp.trajectory_cost(spec, model, prop_traj, proposal))
    except _rollout.DivergenceError:
        report = _ocp.FeasibilityReport(
            False,
            _ocp.Violation("state", 0, None, float("inf")),
            ("state",),
        )
        prop_traj = None
        v_nn = float("inf")
    t_check = time.perf_counter_ns()

    accepted = report.feasible and v_nn < v_cand
    reject_kinds: tuple[str, ...] = ()
    reason = None
    if not accepted:
        kinds = set(report.kinds)
        if report.feasible or v_nn >= v_cand:
            kinds.add("cost")
        reject_kinds = tuple(sorted(kinds))
        reason = "cost" if report.feasible else "infeasible"

    if accepted:
        chosen, chosen_traj, v_applied = proposal, prop_traj, v_nn
    else:
        chosen, chosen_traj, v_applied = state.candidate, cand_traj, v_cand
    applied = chosen[0].copy()
    state.candidate, state.cand_traj, clamped = _candidate_shift(
        model, spec, chosen, chosen_traj
    )
    state.step_index += 1
    t_end = time.perf_counter_ns()

    decision = Decision(
        accepted=accepted,
        reason=reason,
        report=None if report.feasible else report,
        reject_kinds=reject_kinds,
        v_nn=v_nn,
        v_cand=v_cand,
        v_applied=v_applied,
        clamped_terminal=clamped,
        timings_ns={
            "infer": t_infer - t_start,
            "rollout_check": t_check - t_infer,
            "total": t_end - t_start,
        },
    )
    if state.history is not None:
        state.history.append(decision)
    return applied, decision


@dataclass
class StepRecord:
    t: int
    x: np.ndarray
    u: np.ndarray
    mode: str
    violations: tuple[str, ...]
    cumulative_cost: float
    decision: Optional[Decision] = None
    v_applied: Optional[float] = None
    timings_ns: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = {
            "t": self.t,
            "x": self.x.tolist(),
            "u": self.u.tolist(),
            "mode": self.mode,
            "violations": list(self.violations),
            "cumulative_cost": self.cumulative_cost,
            "decision": None if self.decision is None else self.decision.to_json(),
            "v_applied": self.v_applied,
            "timings_ns": self.timings_ns,
        }
        return doc


@dataclass
class RunLog:
    mode: str
    benchmark: str
    x0: np.ndarray
    records: list[StepRecord] = field(default_factory=list)
    diverged: bool = False
    diverged_at: Optional[int] = None
    init_strategy: Optional[str] = None

    @property
    def safe(self) -> bool:
        return not self.diverged and all(not r.violations for r in self.records)

    def summary(self) -> dict:
        n = len(self.records)
        guarded = [r for r in self.records if r.decision is not None]
        kept = [r for r in guarded if not r.decision.accepted]
        reasons = {"state": 0, "terminal": 0, "input": 0, "cost": 0}
        for r in kept:
            for k in r.decision.reject_kinds:
                reasons[k] += 1
        return {
            "record": "summary",
            "mode": self.mode,
            "benchmark": self.benchmark,
            "steps": n,
            "safe": self.safe,
            "diverged": self.diverged,
            "diverged_at": self.diverged_at,
            "violation_steps": sum(1 for r in self.records if r.violations),
            "candidate_applied": len(kept),
            "candidate_applied_pct": 100.0 * len(kept) / n if n else 0.0,
            "reject_reason_counts": reasons,
            "cumulative_cost": self.records[-1].cumulative_cost if n else 0.0,
            "init_strategy": self.init_strategy,
        }


def _closed_loop_violations(spec, model, x, u) -> tuple[str, ...]:
    out = []
    tol = spec.tol_feas
    if np.any(spec.state_set.values(x - model.x_e) > 1.0 + tol):
        out.append("state")
    if np.any(spec.input_set.values(u - model.u_e) > 1.0 + tol):
        out.append("input")
    return tuple(out)


def simulate_closed_loop(model, spec, policy, x0, steps: int, mode: str = "safe",
                         init_strategy: str = "solver", solver_options=None,
                         init_sequence=None, debug: bool = False) -> RunLog:
    """Propagate the plant for `steps` sampling periods under one controller.

    Modes: "safe" runs the guarded evaluation; "naive" applies the
    approximator's first input unconditionally; "solver" re-optimizes from
    scratch each step and applies the optimizer's first input.  The plant is
    the same discrete map the predictions use.  A divergence ends the run
    early and is recorded, not raised.  `init_sequence` short-circuits the
    init strategy with a known starting candidate (still validated).
    """
    from . import solver as _solver

    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; valid: {', '.join(MODES)}")
    x0 = np.asarray(x0, dtype=float)
    log = RunLog(mode=mode, benchmark=model.name, x0=x0.copy(),
                 init_strategy=init_strategy if mode == "safe" else None)
    state = None
    if mode == "safe":
        if init_sequence is not None:
            state = init_from_sequence(model, spec, x0, init_sequence)
        else:
            state = init(model, spec, x0, strategy=init_strategy, policy=policy,
                         solver_options=solver_options)
        state.debug = debug
    x = x0.copy()
    cum = 0.0
    for t in range(steps):
        decision = None
        v_applied = None
        timings = {}
        if mode == "safe":
            u, decision = control_step(state, x, policy)
            v_applied = decision.v_applied
            timings = decision.timings_ns
        elif mode == "naive":
            t0 = time.perf_counter_ns()
            u = np.asarray(policy.propose(x), dtype=float)[0]
            timings = {"infer": time.perf_counter_ns() - t0,
                       "total": time.perf_counter_ns() - t0}
        else:
            t0 = time.perf_counter_ns()
            res = _solver.solve_ocp(model, spec, x, solver_options)
            timings = {"solve": time.perf_counter_ns() - t0,
                       "total": time.perf_counter_ns() - t0}
            if not res.feasible:
                log.diverged = True
                log.diverged_at = t
                break
            u = res.useq[0]
            v_applied = res.cost
        cum += _ocp.stage_cost(spec, model, x, u)
        log.records.append(StepRecord(
            t=t,
            x=x.copy(),
            u=u.copy(),
            mode=mode,
            violations=_closed_loop_violations(spec, model, x, u),
            cumulative_cost=cum,
            decision=decision,
            v_applied=v_applied,
            timings_ns=timings,
        ))
        try:
            x = _rollout.step(model, x, u)
        except _rollout.DivergenceError:
            log.diverged = True
            log.diverged_at = t
            break
    return log
