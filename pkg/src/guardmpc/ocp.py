"""Constraint sets, costs, terminal ingredients, and feasibility checks.

All constraint data lives in shifted coordinates (state minus equilibrium,
input minus equilibrium input); the public check/cost functions accept
original-coordinate states and input sequences and shift internally.

A sequence is feasible from x when every input lies in the input polytope,
every predicted state up to stage N-1 lies in the state polytope, and the
predicted state at stage N lies in the terminal ellipsoid.  The tightened
variant shrinks those sets, either with Lipschitz growth factors against a
hypothetical input disturbance or with a scalar contraction tube.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import models as _models
from . import rollout as _rollout

__all__ = [
    "Polytope",
    "TerminalIngredients",
    "LipschitzTightening",
    "TubeTightening",
    "OcpSpec",
    "Violation",
    "FeasibilityReport",
    "stage_cost",
    "terminal_cost",
    "trajectory_cost",
    "total_cost",
    "check_feasible",
    "check_feasible_tightened",
    "feasible_mask",
    "lipschitz_factors",
    "tube_levels",
    "input_polytope_from_box",
    "spec_for_model",
    "spec_to_json",
    "spec_from_json",
    "spec_digest",
]


@dataclass(frozen=True, eq=False)
class Polytope:
    """Halfspace set {v : L v <= 1} in shifted coordinates."""

    L: np.ndarray

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        if not np.all(np.isfinite(L)):
            raise ValueError("polytope rows must be finite")
        object.__setattr__(self, "L", L)

    @property
    def n_rows(self) -> int:
        return self.L.shape[0]

    @property
    def dim(self) -> int:
        return self.L.shape[1]

    def values(self, v: np.ndarray) -> np.ndarray:
        """Row values L v, broadcasting over leading dimensions of v."""
        return np.asarray(v, dtype=float) @ self.L.T

    def row_l1(self) -> np.ndarray:
        return np.abs(self.L).sum(axis=1)


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    """Ellipsoidal terminal set, quadratic terminal cost, and feedback.

    The terminal set is {x : x^T P_f x <= alpha^2}, the terminal cost
    x^T P_f x, and the terminal controller u = K_f x (shifted coordinates).
    """

    P_f: np.ndarray
    K_f: np.ndarray
    alpha: float

    def __post_init__(self):
        P = np.asarray(self.P_f, dtype=float)
        K = np.atleast_2d(np.asarray(self.K_f, dtype=float))
        if not np.allclose(P, P.T, atol=1e-10 * max(1.0, float(np.abs(P).max()))):
            raise ValueError("terminal cost matrix must be symmetric")
        P = 0.5 * (P + P.T)
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise ValueError("terminal cost matrix must be positive definite") from None
        if not self.alpha > 0.0:
            raise ValueError(f"terminal radius must be positive, got {self.alpha}")
        if K.shape[1] != P.shape[0]:
            raise ValueError("terminal gain and cost dimensions disagree")
        object.__setattr__(self, "P_f", P)
        object.__setattr__(self, "K_f", K)

    def membership_value(self, x_tilde: np.ndarray) -> np.ndarray:
        """(x^T P_f x) / alpha^2; <= 1 means inside the terminal set."""
        x = np.asarray(x_tilde, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P_f, x) / self.alpha**2


@dataclass(frozen=True)
class LipschitzTightening:
    """Growth-factor tightening against an input disturbance of size eps.

    eps shrinks the input box (exact Pontryagin difference for box-shaped
    disturbance sets via the row 1-norm), eps_tilde bounds the one-step state
    displacement the disturbance can cause, and L_f propagates it along the
    horizon through c_k = sum_{i<k} L_f^i.  When alpha_bar is None the
    terminal radius is reduced by the worst-case ellipsoid norm of the
    accumulated displacement.
    """

    L_f: float
    eps: float
    eps_tilde: float
    alpha_bar: Optional[float] = None

    def __post_init__(self):
        if self.L_f < 0.0 or self.eps < 0.0 or self.eps_tilde < 0.0:
            raise ValueError("tightening constants must be nonnegative")


@dataclass(frozen=True, eq=False)
class TubeTightening:
    """Scalar tube s' = -rho s + wbar, discretized exactly per sampling step.

    State row j at stage k is checked as (row value) + c_j * s_k <= 1; the
    terminal radius is replaced by alpha_bar.  rho, wbar, c, K_delta, and
    alpha_bar are configuration inputs, not derived here.
    """

    rho: float
    wbar: float
    c: np.ndarray
    alpha_bar: float
    K_delta: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.rho > 0.0:
            raise ValueError("contraction rate must be positive")
        if self.wbar < 0.0:
            raise ValueError("disturbance bound must be nonnegative")
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if np.any(c < 0.0):
            raise ValueError("tightening factors must be nonnegative")
        if not self.alpha_bar > 0.0:
            raise ValueError("tightened terminal radius must be positive")
        object.__setattr__(self, "c", c)
        if self.K_delta is not None:
            object.__setattr__(
                self, "K_delta", np.atleast_2d(np.asarray(self.K_delta, dtype=float))
            )


Tightening = Optional[LipschitzTightening | TubeTightening]


@dataclass(frozen=True, eq=False)
class OcpSpec:
    """Everything the finite-horizon problem needs besides the model."""

    N: int
    Q: np.ndarray
    R: np.ndarray
    terminal: TerminalIngredients
    state_set: Polytope
    input_set: Polytope
    tightening: Tightening = None
    tol_feas: float = 1e-8

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"horizon must be >= 1, got {self.N}")
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        Q = 0.5 * (Q + Q.T)
        R = 0.5 * (R + R.T)
        if np.linalg.eigvalsh(Q).min() <= 0.0:
            raise ValueError("state weight must have a positive smallest eigenvalue")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise ValueError("input weight must be positive definite") from None
        if self.state_set.dim != Q.shape[0]:
            raise ValueError("state set and state weight dimensions disagree")
        if self.input_set.dim != R.shape[0]:
            raise ValueError("input set and input weight dimensions disagree")
        if self.terminal.P_f.shape[0] != Q.shape[0]:
            raise ValueError("terminal cost and state weight dimensions disagree")
        if isinstance(self.tightening, TubeTightening):
            if self.tightening.c.shape[0] != self.state_set.n_rows:
                raise ValueError("tube tightening needs one factor per state row")
        if not self.tol_feas >= 0.0:
            raise ValueError("feasibility tolerance must be nonnegative")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


@dataclass(frozen=True)
class Violation:
    kind: str  # "input" | "state" | "terminal"
    stage: int
    row: Optional[int]
    margin: float


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    first_violation: Optional[Violation] = None
    kinds: tuple[str, ...] = ()

    def __post_init__(self):
        if self.feasible != (self.first_violation is None):
            raise ValueError("feasible flag must match the absence of a violation")


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------

def stage_cost(spec: OcpSpec, model, x, u) -> float:
    """Quadratic penalty x~' Q x~ + u~' R u~ about the regulation target."""
    xt = model.to_shifted(x)
    ut = model.input_to_shifted(u)
    return float(xt @ spec.Q @ xt + ut @ spec.R @ ut)


def terminal_cost(spec: OcpSpec, model, x) -> float:
    xt = model.to_shifted(x)
    return float(xt @ spec.terminal.P_f @ xt)


def trajectory_cost(spec: OcpSpec, model, traj, useq) -> float | np.ndarray:
    """Cost along a precomputed trajectory; broadcasts over batches."""
    xt = np.asarray(traj, dtype=float) - model.x_e
    ut = np.asarray(useq, dtype=float) - model.u_e
    run = np.einsum("...ki,ij,...kj->...", xt[..., :-1, :], spec.Q, xt[..., :-1, :])
    run += np.einsum("...ki,ij,...kj->...", ut, spec.R, ut)
    term = np.einsum("...i,ij,...j->...", xt[..., -1, :], spec.terminal.P_f, xt[..., -1, :])
    total = run + term
    return float(total) if total.ndim == 0 else total


def total_cost(spec: OcpSpec, model, x, useq, substeps: int | None = None) -> float:
    """Sum of stage costs along the predicted trajectory plus terminal cost."""
    useq = np.asarray(useq, dtype=float)
    if useq.shape[-2] != spec.N:
        raise ValueError(f"input sequence length {useq.shape[-2]} != horizon {spec.N}")
    traj = _rollout.rollout(model, x, useq, substeps)
    return trajectory_cost(spec, model, traj, useq)


# ---------------------------------------------------------------------------
# Tightening arithmetic
# ---------------------------------------------------------------------------

def lipschitz_factors(L_f: float, N: int) -> np.ndarray:
    """Growth factors c_k = sum_{i=0}^{k-1} L_f^i for k = 0..N-1."""
    if L_f < 0.0:
        raise ValueError("Lipschitz constant must be nonnegative")
    if N < 1:
        raise ValueError("need at least one factor")
    c = np.zeros(N)
    if N > 1:
        c[1:] = np.cumsum(np.power(L_f, np.arange(N - 1, dtype=float)))
    return c


def tube_levels(t: TubeTightening, N: int, T_s: float) -> np.ndarray:
    """Tube sizes s_0..s_N under exact exponential-hold discretization."""
    decay = np.exp(-t.rho * T_s)
    gain = (1.0 - decay) * t.wbar / t.rho
    s = np.zeros(N + 1)
    for k in range(N):
        s[k + 1] = decay * s[k] + gain
    return s


def _box_to_ellipsoid_norm(P: np.ndarray) -> float:
    """max ||P^{1/2} d||_2 over the unit infinity-norm ball.

    Exact by corner enumeration up to dimension 16, conservative above.
    """
    n = P.shape[0]
    if n > 16:
        return float(np.sqrt(n * np.linalg.eigvalsh(P).max()))
    best = 0.0
    for bits in range(1 << (n - 1)):
        d = np.ones(n)
        for i in range(n - 1):
            if bits >> i & 1:
                d[i + 1] = -1.0
        best = max(best, float(d @ P @ d))
    return float(np.sqrt(best))


def lipschitz_terminal_radius(spec: OcpSpec, t: LipschitzTightening) -> float:
    """Terminal radius after subtracting the worst accumulated displacement."""
    if t.alpha_bar is not None:
        return t.alpha_bar
    c_N = float(lipschitz_factors(t.L_f, spec.N + 1)[spec.N])
    shrink = c_N * t.eps_tilde * _box_to_ellipsoid_norm(spec.terminal.P_f)
    alpha_bar = spec.terminal.alpha - shrink
    if alpha_bar <= 0.0:
        raise ValueError(
            "accumulated disturbance displacement swallows the terminal set; "
            "supply alpha_bar explicitly or reduce eps"
        )
    return alpha_bar


# ---------------------------------------------------------------------------
# Feasibility checks
# ---------------------------------------------------------------------------

def _scan_violations(spec, input_vals, state_vals, term_val, term_alpha_sq):
    """First violation in stage order, inputs before states, terminal last."""
    tol = spec.tol_feas
    N = input_vals.shape[0]
    first = None
    kinds = set()
    in_bad = input_vals > 1.0 + tol
    st_bad = state_vals > 1.0 + tol
    term_ratio = term_val / term_alpha_sq
    term_bad = term_ratio > 1.0 + tol
    if in_bad.any():
        kinds.add("input")
    if st_bad.any():
        kinds.add("state")
    if term_bad:
        kinds.add("terminal")
    for k in range(N):
        if in_bad[k].any():
            j = int(np.argmax(in_bad[k]))
            first = Violation("input", k, j, float(input_vals[k, j] - 1.0))
            break
        if st_bad[k].any():
            j = int(np.argmax(st_bad[k]))
            first = Violation("state", k, j, float(state_vals[k, j] - 1.0))
            break
    if first is None and term_bad:
        first = Violation("terminal", N, None, float(term_ratio - 1.0))
    if first is None:
        return FeasibilityReport(True)
    return FeasibilityReport(False, first, tuple(sorted(kinds)))


def check_feasible(spec: OcpSpec, model, x, useq, traj=None, substeps=None) -> FeasibilityReport:
    """Nominal feasibility of an input sequence from state x.

    Inputs are checked against the input polytope at every stage, predicted
    states against the state polytope for stages 0..N-1, and the stage-N
    state against the terminal ellipsoid, each with slack tol_feas on the
    normalized constraint value.  Infeasibility is a value, not an error.
    """
    useq = np.asarray(useq, dtype=float)
    if useq.shape != (spec.N, model.n_u):
        raise ValueError(f"input sequence must have shape ({spec.N}, {model.n_u})")
    if traj is None:
        traj = _rollout.rollout(model, x, useq, substeps)
    input_vals = spec.input_set.values(useq - model.u_e)
    state_vals = spec.state_set.values(traj[:-1] - model.x_e)
    xt_N = traj[-1] - model.x_e
    term_val = float(xt_N @ spec.terminal.P_f @ xt_N)
    return _scan_violations(spec, input_vals, state_vals, term_val, spec.terminal.alpha**2)


def check_feasible_tightened(spec: OcpSpec, model, x, useq, traj=None, substeps=None) -> FeasibilityReport:
    """Feasibility against the tightened constraint sets."""
    t = spec.tightening
    if t is None:
        raise ValueError("spec has no tightening; use check_feasible")
    useq = np.asarray(useq, dtype=float)
    if useq.shape != (spec.N, model.n_u):
        raise ValueError(f"input sequence must have shape ({spec.N}, {model.n_u})")
    if traj is None:
        traj = _rollout.rollout(model, x, useq, substeps)
    input_vals = spec.input_set.values(useq - model.u_e)
    state_vals = spec.state_set.values(traj[:-1] - model.x_e)
    if isinstance(t, LipschitzTightening):
        input_vals = input_vals + t.eps * spec.input_set.row_l1()
        c = lipschitz_factors(t.L_f, spec.N)
        state_vals = state_vals + np.outer(c, t.eps_tilde * spec.state_set.row_l1())
        alpha_bar = lipschitz_terminal_radius(spec, t)
    else:
        s = tube_levels(t, spec.N, model.T_s)
        state_vals = state_vals + np.outer(s[: spec.N], t.c)
        alpha_bar = t.alpha_bar
    xt_N = traj[-1] - model.x_e
    term_val = float(xt_N @ spec.terminal.P_f @ xt_N)
    return _scan_violations(spec, input_vals, state_vals, term_val, alpha_bar**2)


def feasible_mask(spec: OcpSpec, model, trajs, useqs) -> np.ndarray:
    """Vectorized nominal feasibility verdicts for a batch of rollouts.

    `trajs` has shape (..., N+1, n_x) and `useqs` (..., N, n_u); returns a
    boolean array over the leading dimensions.  Used where only the verdict
    matters, not the localization.
    """
    tol = spec.tol_feas
    ut = np.asarray(useqs, dtype=float) - model.u_e
    xt = np.asarray(trajs, dtype=float) - model.x_e
    ok_in = (ut @ spec.input_set.L.T <= 1.0 + tol).all(axis=(-2, -1))
    ok_st = (xt[..., :-1, :] @ spec.state_set.L.T <= 1.0 + tol).all(axis=(-2, -1))
    term = spec.terminal.membership_value(xt[..., -1, :])
    return ok_in & ok_st & (term <= 1.0 + tol)


# ---------------------------------------------------------------------------
# Construction and serialization
# ---------------------------------------------------------------------------

def input_polytope_from_box(model) -> Polytope:
    """Input box as halfspace rows about the equilibrium input."""
    rows = []
    for j in range(model.n_u):
        rows.append(np.eye(model.n_u)[j] / (model.u_hi[j] - model.u_e[j]))
        rows.append(-np.eye(model.n_u)[j] / (model.u_e[j] - model.u_lo[j]))
    return Polytope(np.array(rows))


def spec_for_model(model, terminal: TerminalIngredients, tightening: Tightening = None,
                   Q=None, R=None, N=None, tol_feas: float = 1e-8) -> OcpSpec:
    """Assemble an OcpSpec from a benchmark model and terminal ingredients."""
    if Q is None or R is None:
        dq, dr = _models.default_weights(model)
        Q = dq if Q is None else Q
        R = dr if R is None else R
    return OcpSpec(
        N=model.N if N is None else int(N),
        Q=np.asarray(Q, dtype=float),
        R=np.asarray(R, dtype=float),
        terminal=terminal,
        state_set=Polytope(model.state_rows),
        input_set=input_polytope_from_box(model),
        tightening=tightening,
        tol_feas=tol_feas,
    )


def _tightening_to_dict(t: Tightening):
    if t is None:
        return None
    if isinstance(t, LipschitzTightening):
        return {
            "variant": "lipschitz",
            "L_f": t.L_f,
            "eps": t.eps,
            "eps_tilde": t.eps_tilde,
            "alpha_bar": t.alpha_bar,
        }
    return {
        "variant": "tube",
        "rho": t.rho,
        "wbar": t.wbar,
        "c": t.c.tolist(),
        "alpha_bar": t.alpha_bar,
        "K_delta": None if t.K_delta is None else t.K_delta.tolist(),
    }


def _tightening_from_dict(d):
    if d is None:
        return None
    if d["variant"] == "lipschitz":
        return LipschitzTightening(
            L_f=d["L_f"], eps=d["eps"], eps_tilde=d["eps_tilde"],
            alpha_bar=d.get("alpha_bar"),
        )
    if d["variant"] == "tube":
        K = d.get("K_delta")
        return TubeTightening(
            rho=d["rho"], wbar=d["wbar"], c=np.asarray(d["c"], dtype=float),
            alpha_bar=d["alpha_bar"],
            K_delta=None if K is None else np.asarray(K, dtype=float),
        )
    raise ValueError(f"unknown tightening variant {d['variant']!r}")


def spec_to_json(spec: OcpSpec) -> str:
    """Canonical JSON text for an OcpSpec, matrices as row-major nested lists."""
    doc = {
        "N": spec.N,
        "tol_feas": spec.tol_feas,
        "Q": spec.Q.tolist(),
        "R": spec.R.tolist(),
        "terminal": {
            "P_f": spec.terminal.P_f.tolist(),
            "K_f": spec.terminal.K_f.tolist(),
            "alpha": spec.terminal.alpha,
        },
        "state_set": {"L": spec.state_set.L.tolist()},
        "input_set": {"L": spec.input_set.L.tolist()},
        "tightening": _tightening_to_dict(spec.tightening),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def spec_from_json(text: str) -> OcpSpec:
    doc = json.loads(text)
    return OcpSpec(
        N=int(doc["N"]),
        Q=np.asarray(doc["Q"], dtype=float),
        R=np.asarray(doc["R"], dtype=float),
        terminal=TerminalIngredients(
            P_f=np.asarray(doc["terminal"]["P_f"], dtype=float),
            K_f=np.asarray(doc["terminal"]["K_f"], dtype=float),
            alpha=float(doc["terminal"]["alpha"]),
        ),
        state_set=Polytope(np.asarray(doc["state_set"]["L"], dtype=float)),
        input_set=Polytope(np.asarray(doc["input_set"]["L"], dtype=float)),
        tightening=_tightening_from_dict(doc["tightening"]),
        tol_feas=float(doc["tol_feas"]),
    )


def spec_digest(spec: OcpSpec) -> str:
    return hashlib.sha256(spec_to_json(spec).encode()).hexdigest()
