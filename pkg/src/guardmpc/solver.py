"""Desk-scale nonlinear OCP solver and offline synthesis utilities.

The solver is a single-shooting SQP over the stacked input sequence: exact
RK4 sensitivities give a Gauss-Newton quadratic model of the cost, the
(possibly tightened) input/state/terminal constraints are linearized into
halfspace rows, the resulting strictly convex QP is solved by a primal
active-set method (violated rows get elastic slacks so the QP is always
feasible), and steps are accepted under a damped line search on an l1 merit
function.  Feasibility of iterates is always judged by the same checker the
rest of the package uses, so every result that claims feasibility re-passes
that checker by construction.

Offline pieces: Riccati-based terminal ingredient synthesis with a sampled
invariance/decrease/admissibility certificate, sampled Lipschitz and
disturbance-gain estimation for constraint tightening, and a perturbation
probe that checks robust solutions remain nominally feasible under input
disturbances.
"""

from __future__ import annotations

import dataclasses
import weakref
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg as sla
from scipy.stats import qmc

from . import models as _models
from . import ocp as _ocp
from . import rollout as _rollout

__all__ = [
    "SolveOptions",
    "SolveResult",
    "SynthesisError",
    "solve_ocp",
    "terminal_controller_rollout",
    "synth_terminal",
    "certify_terminal",
    "estimate_lipschitz",
    "LipschitzEstimate",
    "lemma1_probe",
    "ProbeReport",
    "SolverPolicy",
    "step_jacobians",
]


class SynthesisError(RuntimeError):
    """Terminal ingredient synthesis failed (Riccati or radius collapse)."""


def default_synthesis_weights(model, Q, R):
    """Riccati weights used to shape the terminal feedback per benchmark.

    The verified ellipsoid must fit inside the state set and keep the
    feedback admissible, so its usable size depends on the shape of the
    cost-to-go, not just the stage weights.  For the quadcopter, weighting
    the attitude block up during gain synthesis shrinks the ellipsoid's tilt
    extent relative to position and enlarges the verified region by an order
    of magnitude; for the other benchmarks the plain stage weights work.
    """
    if model.name == "quadcopter":
        q = np.concatenate([20.0 * np.ones(3), np.ones(3), 80.0 * np.ones(4)])
        return np.diag(q), R
    if model.name == "stir_tank":
        # the stage input weight 1e-5 yields a near-deadbeat gain whose input
        # cap strangles the ellipsoid; a softer synthesis gain doubles it
        return Q, 1e4 * R
    return Q, R


@dataclass(frozen=True)
class SolveOptions:
    max_sqp_iters: int = 60
    qp_reg: float = 1e-7
    tol_kkt: float = 1e-6
    tol_con: float = 1e-8
    # "auto" simulates the clipped terminal controller and falls back to the
    # constant equilibrium input when that rollout is wilder (large initial
    # rates can make the clipped feedback ring through the tan singularity)
    init: str | np.ndarray = "auto"  # "auto" | "terminal" | "zeros" | warm-start array
    prestabilize: Optional[bool] = None  # None: on for tube-tightened solves
    max_linesearch: int = 12
    prune_slack: float = 0.5
    # the QP aims this far inside the sets so converged iterates re-pass the
    # feasibility checker instead of landing epsilon outside an active row
    feas_backoff: float = 1e-7
    # iterations with relative violation progress below this count as stalled
    stall_tol: float = 0.02
    stall_iters: int = 5

    def __post_init__(self):
        if self.max_sqp_iters < 1:
            raise ValueError("max_sqp_iters must be >= 1")
        if not (self.tol_kkt > 0 and self.tol_con > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class SolveResult:
    status: str  # "converged" | "max_iters" | "infeasible"
    useq: np.ndarray
    cost: float
    iters: int
    kkt_residual: float

    @property
    def feasible(self) -> bool:
        return self.status in ("converged", "max_iters")


# ---------------------------------------------------------------------------
# Discrete-map sensitivities (forward-mode chain rule through RK4)
# ---------------------------------------------------------------------------

def step_jacobians(model, x, u, substeps: int | None = None):
    """One sampling step and its Jacobians: returns (x_next, dx'/dx, dx'/du)."""
    if substeps is None:
        substeps = model.substeps
    h = model.T_s / substeps
    n_x, n_u = model.n_x, model.n_u
    A_tot = np.eye(n_x)
    B_tot = np.zeros((n_x, n_u))
    f = model.dynamics
    jac = model.jacobian
    for _ in range(substeps):
        k1 = f(x, u)
        A1, B1 = jac(x, u)
        x2 = x + 0.5 * h * k1
        k2 = f(x2, u)
        A2, B2 = jac(x2, u)
        x3 = x + 0.5 * h * k2
        k3 = f(x3, u)
        A3, B3 = jac(x3, u)
        x4 = x + h * k3
        k4 = f(x4, u)
        A4, B4 = jac(x4, u)

        dk1x = A1
        dk2x = A2 @ (np.eye(n_x) + 0.5 * h * dk1x)
        dk3x = A3 @ (np.eye(n_x) + 0.5 * h * dk2x)
        dk4x = A4 @ (np.eye(n_x) + h * dk3x)
        A_sub = np.eye(n_x) + (h / 6.0) * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)

        dk1u = B1
        dk2u = A2 @ (0.5 * h * dk1u) + B2
        dk3u = A3 @ (0.5 * h * dk2u) + B3
        dk4u = A4 @ (h * dk3u) + B4
        B_sub = (h / 6.0) * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)

        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        A_tot = A_sub @ A_tot
        B_tot = A_sub @ B_tot + B_sub
    return x, A_tot, B_tot


def _forward_pass(model, spec, x0, z, K_pre):
    """Rollout plus sensitivities of states and inputs w.r.t. the decisions.

    Decisions z are the flat input sequence itself, or the flat correction v
    when a prestabilizing feedback K_pre acts on the shifted state:
    u_k = u_e + K_pre (x_k - x_e) + v_k.

    Returns (traj, useq, S_x, S_u) with S_x[k] = d x_k / dz (n_x, n) and
    S_u[k] = d u_k / dz (n_u, n).
    """
    N = spec.N
    n_x, n_u = model.n_x, model.n_u
    n = n_u * N
    V = z.reshape(N, n_u)
    traj = np.empty((N + 1, n_x))
    useq = np.empty((N, n_u))
    S_x = np.zeros((N + 1, n_x, n))
    S_u = np.zeros((N, n_u, n))
    traj[0] = x0
    x = x0
    Sx = np.zeros((n_x, n))
    for k in range(N):
        sel = slice(k * n_u, (k + 1) * n_u)
        if K_pre is None:
            u = V[k]
            Su = np.zeros((n_u, n))
            Su[:, sel] = np.eye(n_u)
        else:
            u = model.u_e + K_pre @ (x - model.x_e) + V[k]
            Su = K_pre @ Sx
            Su[:, sel] += np.eye(n_u)
        x, A, B = step_jacobians(model, x, u)
        Sx = A @ Sx + B @ Su
        useq[k] = u
        S_u[k] = Su
        traj[k + 1] = x
        S_x[k + 1] = Sx
    return traj, useq, S_x, S_u


def _useq_from_z(model, spec, x0, z, K_pre):
    """Inputs and trajectory for a decision vector, without sensitivities."""
    N, n_u = spec.N, model.n_u
    V = z.reshape(N, n_u)
    if K_pre is None:
        useq = V.copy()
        traj = _rollout.rollout(model, x0, useq)
        return traj, useq
    traj = np.empty((N + 1, model.n_x))
    useq = np.empty((N, n_u))
    traj[0] = x0
    x = x0
    for k in range(N):
        u = model.u_e + K_pre @ (x - model.x_e) + V[k]
        x = _rollout.step(model, x, u)
        useq[k] = u
        traj[k + 1] = x
    return traj, useq


def _useq_from_z_batch(model, spec, x0, Z, K_pre):
    """Batched variant over trial decision vectors; non-finite rows allowed.

    Returns (trajs, useqs, ok) where ok flags trials that stayed finite.
    """
    T = Z.shape[0]
    N, n_u, n_x = spec.N, model.n_u, model.n_x
    V = Z.reshape(T, N, n_u)
    trajs = np.full((T, N + 1, n_x), np.nan)
    useqs = np.full((T, N, n_u), np.nan)
    trajs[:, 0, :] = x0
    x = np.broadcast_to(x0, (T, n_x)).copy()
    ok = np.ones(T, dtype=bool)
    h = model.T_s / model.substeps
    f = model.dynamics
    for k in range(N):
        if K_pre is None:
            u = V[:, k, :]
        else:
            u = model.u_e + (x - model.x_e) @ K_pre.T + V[:, k, :]
        useqs[:, k, :] = u
        with np.errstate(all="ignore"):
            for _ in range(model.substeps):
                k1 = f(x, u)
                k2 = f(x + (0.5 * h) * k1, u)
                k3 = f(x + (0.5 * h) * k2, u)
                k4 = f(x + h * k3, u)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        bad = ~np.isfinite(x).all(axis=1)
        if bad.any():
            ok &= ~bad
            x[bad] = 0.0  # keep arithmetic finite; flagged rows are discarded
        trajs[:, k + 1, :] = np.where(ok[:, None], x, np.nan)
    return trajs, useqs, ok


def _z_from_useq(model, spec, x0, useq, K_pre):
    if K_pre is None:
        return np.asarray(useq, dtype=float).ravel().copy()
    x = x0
    v = np.empty_like(useq)
    for k in range(spec.N):
        v[k] = useq[k] - model.u_e - K_pre @ (x - model.x_e)
        x = _rollout.step(model, x, useq[k])
    return v.ravel()


# ---------------------------------------------------------------------------
# Dense primal active-set QP
# ---------------------------------------------------------------------------

def _qp_active_set(H, g, C, d, x0, W0, max_iter=200):
    """Minimize 0.5 x'Hx + g'x subject to Cx <= d from a feasible start.

    H must be positive definite.  W0 lists rows tight at x0.  Returns
    (x, lam) where lam holds the multipliers of all rows (zero if inactive).
    """
    n = H.shape[0]
    m = C.shape[0]
    x = x0.copy()
    W: list[int] = list(W0)
    lam_full = np.zeros(m)
    for _ in range(max_iter):
        na = len(W)
        rhs = np.concatenate([-(H @ x + g), np.zeros(na)])
        if na:
            A_w = C[W]
            kkt = np.zeros((n + na, n + na))
            kkt[:n, :n] = H
            kkt[:n, n:] = A_w.T
            kkt[n:, :n] = A_w
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            p = sol[:n]
            lam = sol[n:]
        else:
            p = np.linalg.solve(H, rhs[:n])
            lam = np.zeros(0)
        if np.max(np.abs(p)) <= 1e-11 * (1.0 + np.max(np.abs(x))):
            lam_full[:] = 0.0
            lam_full[W] = lam
            if na == 0 or lam.min() >= -1e-9:
                return x, lam_full
            W.pop(int(np.argmin(lam)))
            continue
        # largest step that keeps all inactive rows satisfied
        alpha = 1.0
        blocker = -1
        mask = np.ones(m, dtype=bool)
        mask[W] = False
        cp = C[mask] @ p
        rows = np.flatnonzero(mask)
        pos = cp > 1e-13
        if pos.any():
            gaps = (d[rows[pos]] - C[rows[pos]] @ x) / cp[pos]
            gaps = np.maximum(gaps, 0.0)
            idx = int(np.argmin(gaps))
            if gaps[idx] < alpha:
                alpha = float(gaps[idx])
                blocker = int(rows[pos][idx])
        x = x + alpha * p
        if blocker >= 0:
            W.append(blocker)
    lam_full[:] = 0.0
    if W:
        lam_full[W] = np.maximum(lam, 0.0) if len(lam) == len(W) else 0.0
    return x, lam_full


# ---------------------------------------------------------------------------
# Constraint linearization shared by the SQP loop
# ---------------------------------------------------------------------------

def _stage_tightenings(spec, model, tightened):
    """Per-stage additive margins for input rows, state rows, and the radius."""
    N = spec.N
    n_in = spec.input_set.n_rows
    n_st = spec.state_set.n_rows
    in_m = np.zeros((N, n_in))
    st_m = np.zeros((N, n_st))
    alpha = spec.terminal.alpha
    if tightened:
        t = spec.tightening
        if t is None:
            raise ValueError("tightened solve requested but the spec has no tightening")
        if isinstance(t, _ocp.LipschitzTightening):
            in_m += t.eps * spec.input_set.row_l1()
            c = _ocp.lipschitz_factors(t.L_f, N)
            st_m += np.outer(c, t.eps_tilde * spec.state_set.row_l1())
            alpha = _ocp.lipschitz_terminal_radius(spec, t)
        else:
            s = _ocp.tube_levels(t, N, model.T_s)
            st_m += np.outer(s[:N], t.c)
            alpha = t.alpha_bar
    return in_m, st_m, alpha


def _constraint_rows(model, spec, traj, useq, S_x, S_u, in_m, st_m, alpha, bound):
    """Linearized rows C dz <= d for all stages plus the terminal ellipsoid."""
    N = spec.N
    Lu = spec.input_set.L
    Lx = spec.state_set.L
    C_blocks = []
    d_blocks = []
    for k in range(N):
        vals = Lu @ (useq[k] - model.u_e) + in_m[k]
        C_blocks.append(Lu @ S_u[k])
        d_blocks.append(bound - vals)
    for k in range(1, N):
        vals = Lx @ (traj[k] - model.x_e) + st_m[k]
        C_blocks.append(Lx @ S_x[k])
        d_blocks.append(bound - vals)
    xtN = traj[N] - model.x_e
    P = spec.terminal.P_f
    term_val = float(xtN @ P @ xtN) / alpha**2
    C_blocks.append((2.0 / alpha**2) * (P @ xtN) @ S_x[N])
    d_blocks.append(np.array([bound - term_val]))
    C = np.vstack([np.atleast_2d(c) for c in C_blocks])
    d = np.concatenate(d_blocks)
    return C, d


def _row_values(model, spec, traj, useq, in_m, st_m, alpha):
    """Stacked constraint values in the same row order as _constraint_rows."""
    vals_in = (spec.input_set.values(useq - model.u_e) + in_m).ravel()
    vals_st = (spec.state_set.values(traj[1:-1] - model.x_e) + st_m[1:]).ravel()
    xtN = traj[-1] - model.x_e
    term = float(xtN @ spec.terminal.P_f @ xtN) / alpha**2
    return np.concatenate([vals_in, vals_st, [term]])


def _violation_measure(model, spec, traj, useq, in_m, st_m, alpha, bound):
    """Total dimensionless constraint violation of an iterate."""
    vals_in = spec.input_set.values(useq - model.u_e) + in_m
    vals_st = spec.state_set.values(traj[:-1] - model.x_e) + st_m
    xtN = traj[-1] - model.x_e
    term = float(xtN @ spec.terminal.P_f @ xtN) / alpha**2
    v = float(np.clip(vals_in - bound, 0.0, None).sum())
    v += float(np.clip(vals_st - bound, 0.0, None).sum())
    v += max(0.0, term - bound)
    return v


# ---------------------------------------------------------------------------
# Linear prediction: warm starts and a cheap feasibility screen
# ---------------------------------------------------------------------------

_LIN_CACHE: "weakref.WeakKeyDictionary" = None  # set below


def _linearization(model):
    global _LIN_CACHE
    if _LIN_CACHE is None:
        _LIN_CACHE = weakref.WeakKeyDictionary()
    try:
        return _LIN_CACHE[model]
    except KeyError:
        _, A, B = step_jacobians(model, model.x_e, model.u_e)
        _LIN_CACHE[model] = (A, B)
        return A, B


_PREDICTION_CACHE: dict = {}


def _prediction_data(model, spec):
    """Constant pieces of the equilibrium-linearized prediction QP."""
    key = id(spec)
    hit = _PREDICTION_CACHE.get(key)
    if hit is not None and hit[0] is model and hit[1] is spec:
        return hit[2]
    N, n_x, n_u = spec.N, model.n_x, model.n_u
    n = n_u * N
    A, B = _linearization(model)
    G = np.zeros((N, n_x, N, n_u))
    Amats = np.empty((N, n_x, n_x))
    cols = [B]
    Ak = A.copy()
    for k in range(N):
        Amats[k] = Ak
        if k > 0:
            cols.append(A @ cols[-1])
        for j in range(k + 1):
            G[k, :, k - j, :] = cols[j]
        Ak = A @ Ak
    G = G.reshape(N * n_x, n)
    Qbar = np.zeros((N * n_x, N * n_x))
    for k in range(N - 1):
        Qbar[k * n_x:(k + 1) * n_x, k * n_x:(k + 1) * n_x] = spec.Q
    Qbar[(N - 1) * n_x:, (N - 1) * n_x:] = spec.terminal.P_f
    Rbar = np.kron(np.eye(N), spec.R)
    H = 2.0 * (G.T @ Qbar @ G + Rbar)
    H = 0.5 * (H + H.T) + 1e-9 * max(1.0, np.trace(H) / n) * np.eye(n)
    GtQ = 2.0 * (G.T @ Qbar)
    Lu, Lx = spec.input_set.L, spec.state_set.L
    C_in = np.kron(np.eye(N), Lu)
    Lx_blk = np.kron(np.eye(N - 1), Lx) if N > 1 else np.zeros((0, 0))
    C_st = Lx_blk @ G[: (N - 1) * n_x] if N > 1 else np.zeros((0, n))
    data = {
        "G": G, "Amats": Amats, "H": H, "GtQ": GtQ,
        "C": np.vstack([C_in, C_st]), "Lx_blk": Lx_blk,
        "G_last": G[(N - 1) * n_x:],
        "Hinv_GtQ": np.linalg.solve(H, GtQ),
    }
    _PREDICTION_CACHE[key] = (model, spec, data)
    if len(_PREDICTION_CACHE) > 64:
        _PREDICTION_CACHE.pop(next(iter(_PREDICTION_CACHE)))
    return data


def _solve_elastic_qp(H, g, C, d, elastic, big):
    """QP with the flagged rows relaxed by heavily penalized slacks.

    Returns (solution, worst remaining slack).  Rows not flagged elastic
    must admit a feasible point together with x = 0 (i.e. have d >= 0).
    """
    n = H.shape[0]
    rows = np.flatnonzero(elastic & (d < 0.0))
    n_s = rows.size
    if n_s == 0:
        x, _ = _qp_active_set(H, g, C, d, np.zeros(n), [])
        return x, 0.0
    m_rows = C.shape[0]
    H_l = np.zeros((n + n_s, n + n_s))
    H_l[:n, :n] = H
    H_l[n:, n:] = 1e-2 * np.eye(n_s)
    g_l = np.concatenate([g, big * np.ones(n_s)])
    C_l = np.zeros((m_rows + n_s, n + n_s))
    C_l[:m_rows, :n] = C
    for j, row in enumerate(rows):
        C_l[row, n + j] = -1.0
        C_l[m_rows + j, n + j] = -1.0
    d_l = np.concatenate([d, np.zeros(n_s)])
    x_start = np.concatenate([np.zeros(n), -d[rows]])
    sol, _ = _qp_active_set(H_l, g_l, C_l, d_l, x_start, list(rows))
    return sol[:n], float(np.max(sol[n:], initial=0.0))


def linear_warm_start(model, spec, x0, in_m=None, st_m=None, bound=1.0,
                      terminal_cuts: int = 0):
    """Input sequence from QPs on the equilibrium-linearized dynamics.

    Minimizes the true quadratic cost under linearized-prediction input and
    state rows (state rows elastically relaxed so the QP always solves).
    The terminal ellipsoid, a convex quadratic constraint under linear
    dynamics, is approached by a few elastic cutting planes.  Returns the
    clipped sequence, the final linear-model terminal membership ratio, and
    the largest residual row slack; the latter two gauge feasibility.
    """
    N, n_x, n_u = spec.N, model.n_x, model.n_u
    n = n_u * N
    if in_m is None:
        in_m = np.zeros((N, spec.input_set.n_rows))
    if st_m is None:
        st_m = np.zeros((N, spec.state_set.n_rows))
    data = _prediction_data(model, spec)
    xt0 = np.asarray(x0, dtype=float) - model.x_e
    phi = data["Amats"] @ xt0
    phi_f = phi.reshape(N * n_x)
    H = data["H"]
    g = data["GtQ"] @ phi_f
    d_in = (bound - in_m).ravel()
    if N > 1:
        d_st = bound - st_m[1:] - (
            data["Lx_blk"] @ phi_f[: (N - 1) * n_x]
        ).reshape(N - 1, spec.state_set.n_rows)
        d0 = np.concatenate([d_in, d_st.ravel()])
    else:
        d0 = d_in
    C0 = data["C"]
    elastic0 = np.zeros(C0.shape[0], dtype=bool)
    elastic0[d_in.size:] = True  # state rows may start violated
    big = 1e4 * max(1.0, float(np.abs(g).max()))
    P = spec.terminal.P_f
    a2 = spec.terminal.alpha**2

    cuts_C: list[np.ndarray] = []
    cuts_d: list[float] = []
    ut = np.zeros(n)
    slack_left = 0.0
    term_ratio = np.inf
    for _ in range(1 + terminal_cuts):
        if cuts_C:
            C = np.vstack([C0, np.array(cuts_C)])
            d = np.concatenate([d0, np.array(cuts_d)])
            elastic = np.concatenate([elastic0, np.ones(len(cuts_C), dtype=bool)])
        else:
            C, d, elastic = C0, d0, elastic0
        ut, slack_left = _solve_elastic_qp(H, g, C, d, elastic, big)
        xtN = phi[-1] + data["G_last"] @ ut
        term_ratio = float(xtN @ P @ xtN) / a2
        if term_ratio <= bound:
            break
        grad_row = (2.0 / a2) * (P @ xtN) @ data["G_last"]
        cuts_C.append(grad_row)
        cuts_d.append(bound - term_ratio + float(grad_row @ ut))
    useq = np.clip(model.u_e + ut.reshape(N, n_u), model.u_lo, model.u_hi)
    return useq, term_ratio, slack_left


# benchmarks whose equilibrium linearization predicts well enough for the
# screen to be trusted; for strongly nonlinear systems (the stir tank's
# exponential reaction term) it wrongly rejects genuinely feasible states
SCREENABLE = ("quadcopter",)


def screen_by_default(model) -> bool:
    return model.name in SCREENABLE


def feasibility_screen(model, spec, x0, tightened: bool = False,
                       term_slack: float = 9.0, row_slack: float = 0.25,
                       quick_slack: float = 20.0) -> bool:
    """Cheap necessary-style test on the linearized problem.

    Two stages: the cost-unconstrained linear optimum's terminal membership
    ratio first (microseconds; cutoff calibrated with a 4x margin over every
    observed feasible state), then the constrained prediction QP.  Returns
    False only when even the linearized problem cannot come close to the
    constraint set.  Intended to prune hopeless samples before a full solve;
    generous slacks keep it conservative.  Only meaningful where the
    linearization is trustworthy, see SCREENABLE.
    """
    in_m, st_m, alpha = _stage_tightenings(spec, model, tightened)
    scale = (spec.terminal.alpha / alpha) ** 2
    data = _prediction_data(model, spec)
    xt0 = np.asarray(x0, dtype=float) - model.x_e
    phi = data["Amats"] @ xt0
    u_free = -data["Hinv_GtQ"] @ phi.reshape(-1)
    xtN = phi[-1] + data["G_last"] @ u_free
    ratio_free = float(xtN @ spec.terminal.P_f @ xtN) / spec.terminal.alpha**2
    if ratio_free * scale > quick_slack:
        return False
    _, term_ratio, slack_left = linear_warm_start(model, spec, x0, in_m, st_m, 1.0)
    return slack_left <= row_slack and term_ratio * scale <= term_slack


# ---------------------------------------------------------------------------
# The SQP driver
# ---------------------------------------------------------------------------

def terminal_controller_rollout(model, spec, x0) -> np.ndarray:
    """Forward simulation of the clipped terminal controller from x0."""
    useq = np.empty((spec.N, model.n_u))
    x = np.asarray(x0, dtype=float)
    K = spec.terminal.K_f
    for k in range(spec.N):
        u = model.u_e + K @ (x - model.x_e)
        u = np.clip(u, model.u_lo, model.u_hi)
        useq[k] = u
        x = _rollout.step(model, x, u)
    return useq


def _initial_sequence(model, spec, x0, options, in_m, st_m, alpha, bound):
    init = options.init
    if isinstance(init, np.ndarray):
        useq = np.asarray(init, dtype=float)
        if useq.shape != (spec.N, model.n_u):
            raise ValueError("warm-start sequence has the wrong shape")
        return np.clip(useq, model.u_lo, model.u_hi)
    if init == "terminal":
        return terminal_controller_rollout(model, spec, x0)
    if init == "zeros":
        return np.tile(model.u_e, (spec.N, 1))
    if init == "auto":
        cands = [terminal_controller_rollout(model, spec, x0),
                 np.tile(model.u_e, (spec.N, 1)),
                 linear_warm_start(model, spec, x0, in_m, st_m, bound,
                                   terminal_cuts=3)[0]]
        scores = []
        for u in cands:
            try:
                traj = _rollout.rollout(model, x0, u)
                scores.append(_violation_measure(model, spec, traj, u, in_m, st_m, alpha, bound))
            except _rollout.DivergenceError:
                scores.append(np.inf)
        return cands[int(np.argmin(scores))]
    raise ValueError(f"unknown init strategy {init!r}")


def solve_ocp(model, spec, x0, options: SolveOptions | None = None,
              tightened: bool = False) -> SolveResult:
    """Minimize the finite-horizon cost subject to (tightened) constraints.

    Deterministic for fixed arguments.  The returned sequence is the best
    iterate that passed the feasibility checker; status is "infeasible" when
    no iterate did.
    """
    if options is None:
        options = SolveOptions()
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    spec_chk = spec if spec.tol_feas == options.tol_con else dataclasses.replace(
        spec, tol_feas=options.tol_con
    )
    check = _ocp.check_feasible_tightened if tightened else _ocp.check_feasible
    in_m, st_m, alpha = _stage_tightenings(spec, model, tightened)
    bound = 1.0 - options.feas_backoff

    prestab = options.prestabilize
    if prestab is None:
        prestab = tightened and isinstance(spec.tightening, _ocp.TubeTightening)
    if prestab:
        t = spec.tightening
        K_pre = t.K_delta if (t is not None and getattr(t, "K_delta", None) is not None) \
            else spec.terminal.K_f
    else:
        K_pre = None

    with np.errstate(over="ignore", invalid="ignore"):
        return _solve_ocp_impl(model, spec, x0, options, tightened, spec_chk,
                               check, in_m, st_m, alpha, bound, K_pre)


def _solve_ocp_impl(model, spec, x0, options, tightened, spec_chk, check,
                    in_m, st_m, alpha, bound, K_pre):
    useq0 = _initial_sequence(model, spec, x0, options, in_m, st_m, alpha, bound)
    z = _z_from_useq(model, spec, x0, useq0, K_pre)

    # stage-0 state rows do not depend on the decisions; reject early
    vals0 = spec.state_set.values(x0 - model.x_e) + st_m[0]
    if np.any(vals0 > 1.0 + options.tol_con):
        traj0, useq = _useq_from_z(model, spec, x0, z, K_pre)
        return SolveResult(
            status="infeasible",
            useq=useq,
            cost=float(_ocp.trajectory_cost(spec, model, traj0, useq)),
            iters=0,
            kkt_residual=float("inf"),
        )

    n = model.n_u * spec.N
    best_z = None
    best_cost = np.inf
    rho = 10.0
    rho_escalations = 0
    lm = 0.0  # adaptive Levenberg damping, raised when steps get rejected
    kkt = float("inf")
    converged = False
    iters_done = 0
    stall = 0

    traj, useq = _useq_from_z(model, spec, x0, z, K_pre)
    cost = float(_ocp.trajectory_cost(spec, model, traj, useq))
    viol = _violation_measure(model, spec, traj, useq, in_m, st_m, alpha, bound)
    if check(spec_chk, model, x0, useq, traj=traj).feasible:
        best_z, best_cost = z.copy(), cost
    rho = max(rho, 10.0 * (1.0 + abs(cost)))

    def eval_trials(z_trials):
        """Rollout all trial points at once; falls back to one-by-one."""
        Z = np.stack(z_trials)
        try:
            trajs, useqs, ok = _useq_from_z_batch(model, spec, x0, Z, K_pre)
            return trajs, useqs, ok
        except (ValueError, ArithmeticError):
            trajs = np.full((len(z_trials), spec.N + 1, model.n_x), np.nan)
            useqs = np.full((len(z_trials), spec.N, model.n_u), np.nan)
            ok = np.zeros(len(z_trials), dtype=bool)
            for i, zt in enumerate(z_trials):
                try:
                    trajs[i], useqs[i] = _useq_from_z(model, spec, x0, zt, K_pre)
                    ok[i] = True
                except (_rollout.DivergenceError, ValueError, ArithmeticError):
                    pass
            return trajs, useqs, ok

    for it in range(options.max_sqp_iters):
        iters_done = it + 1
        traj, useq, S_x, S_u = _forward_pass(model, spec, x0, z, K_pre)
        xt = traj - model.x_e
        ut = useq - model.u_e
        grad = np.zeros(n)
        H0 = np.zeros((n, n))
        for k in range(spec.N):
            QS = spec.Q @ S_x[k]
            RS = spec.R @ S_u[k]
            grad += 2.0 * (xt[k] @ QS + ut[k] @ RS)
            H0 += 2.0 * (S_x[k].T @ QS + S_u[k].T @ RS)
        PS = spec.terminal.P_f @ S_x[spec.N]
        grad += 2.0 * (xt[spec.N] @ PS)
        H0 += 2.0 * S_x[spec.N].T @ PS
        h_scale = max(1.0, np.trace(H0) / n)
        H0 = 0.5 * (H0 + H0.T)

        C_all, d_all = _constraint_rows(
            model, spec, traj, useq, S_x, S_u, in_m, st_m, alpha, bound
        )
        keep = d_all <= options.prune_slack
        C, d = C_all[keep], d_all[keep]
        violated = np.flatnonzero(d < 0.0)
        n_s = violated.size

        accepted = False
        viol_prev = viol
        for damp_round in range(4):
            H = H0 + (options.qp_reg + lm) * h_scale * np.eye(n)
            if n_s:
                m_rows = C.shape[0]
                H_l = np.zeros((n + n_s, n + n_s))
                H_l[:n, :n] = H
                H_l[n:, n:] = 1e-4 * rho * np.eye(n_s)
                g_l = np.concatenate([grad, rho * np.ones(n_s)])
                C_l = np.zeros((m_rows + n_s, n + n_s))
                C_l[:m_rows, :n] = C
                for j, row in enumerate(violated):
                    C_l[row, n + j] = -1.0
                    C_l[m_rows + j, n + j] = -1.0
                d_l = np.concatenate([d, np.zeros(n_s)])
                x_start = np.concatenate([np.zeros(n), -d[violated]])
                dz_l, lam = _qp_active_set(H_l, g_l, C_l, d_l, x_start, list(violated))
                dz = dz_l[:n]
                lam_rows = lam[:m_rows]
            else:
                dz, lam_rows = _qp_active_set(H, grad, C, d, np.zeros(n), [])
            rho = max(rho, 2.0 * float(np.max(lam_rows, initial=0.0)) + 1.0)
            step_norm = float(np.max(np.abs(dz), initial=0.0))
            kkt = step_norm

            if step_norm <= options.tol_kkt * (1.0 + float(np.max(np.abs(z)))):
                break

            # candidate steps: full step, then full step with a second-order
            # feasibility correction (the linearized terminal ellipsoid
            # systematically overshoots outward), then damped fractions
            fracs = [1.0]
            while len(fracs) < options.max_linesearch:
                fracs.append(fracs[-1] * 0.5)
            z_trials = [z + f * dz for f in fracs]
            trajs, useqs, ok = eval_trials(z_trials)
            if ok[0]:
                vals_1 = _row_values(model, spec, trajs[0], useqs[0], in_m, st_m, alpha)[keep]
                over = vals_1 > bound
                if over.any():
                    A = C[over]
                    resid = vals_1[over] - bound
                    gram = A @ A.T + 1e-10 * np.eye(A.shape[0])
                    corr = -A.T @ np.linalg.solve(gram, resid)
                    t_c, u_c, ok_c = eval_trials([z + dz + corr])
                    if ok_c[0]:
                        fracs.insert(0, 1.0)
                        z_trials.insert(0, z + dz + corr)
                        trajs = np.concatenate([t_c, trajs])
                        useqs = np.concatenate([u_c, useqs])
                        ok = np.concatenate([ok_c, ok])

            merit0 = cost + rho * viol
            descent = float(grad @ dz) - rho * viol
            for i, frac in enumerate(fracs):
                if not ok[i]:
                    continue
                cost_t = float(_ocp.trajectory_cost(spec, model, trajs[i], useqs[i]))
                viol_t = _violation_measure(
                    model, spec, trajs[i], useqs[i], in_m, st_m, alpha, bound
                )
                if cost_t + rho * viol_t <= merit0 + 1e-4 * frac * min(descent, 0.0):
                    z = z_trials[i]
                    cost, viol = cost_t, viol_t
                    if cost < best_cost and check(
                        spec_chk, model, x0, useqs[i], traj=trajs[i]
                    ).feasible:
                        best_z, best_cost = z.copy(), cost
                    accepted = True
                    break
            if accepted:
                lm = lm * 0.25 if lm > 1e-8 else 0.0
                break
            lm = 10.0 * lm if lm > 0.0 else 1e-4

        if not accepted:
            if step_norm <= options.tol_kkt * (1.0 + float(np.max(np.abs(z)))):
                if viol <= options.tol_con and best_z is not None:
                    converged = True
                break
            if viol > options.tol_con and rho_escalations < 3:
                rho *= 10.0
                rho_escalations += 1
                continue
            if viol <= options.tol_con and best_z is not None:
                converged = step_norm <= 1e2 * options.tol_kkt * (1.0 + float(np.max(np.abs(z))))
            break

        # fast exit for hopeless instances: violation no longer improving
        if viol > max(100.0 * options.tol_con, 1e-6):
            if viol >= viol_prev * (1.0 - options.stall_tol):
                stall += 1
                if stall >= options.stall_iters:
                    break
            else:
                stall = 0
        else:
            stall = 0

    if best_z is None:
        traj, useq = _useq_from_z(model, spec, x0, z, K_pre)
        return SolveResult(
            status="infeasible",
            useq=useq,
            cost=float(_ocp.trajectory_cost(spec, model, traj, useq)),
            iters=iters_done,
            kkt_residual=kkt,
        )
    _, useq_best = _useq_from_z(model, spec, x0, best_z, K_pre)
    return SolveResult(
        status="converged" if converged else "max_iters",
        useq=useq_best,
        cost=best_cost,
        iters=iters_done,
        kkt_residual=kkt,
    )


# ---------------------------------------------------------------------------
# Terminal ingredient synthesis and certification
# ---------------------------------------------------------------------------

def _ellipsoid_boundary_dirs(P, n_samples, rng):
    """Unit directions mapped to the {x'Px = 1} shell."""
    n = P.shape[0]
    L = np.linalg.cholesky(P)
    z = rng.standard_normal((n_samples, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return np.linalg.solve(L.T, z.T).T


def certify_terminal(model, spec_or_terminal, Q=None, R=None, n_samples=10000,
                     seed=0, margin=1e-6, boundary=True, substeps=None):
    """Sampled certificate for the terminal ingredients.

    Checks, for states sampled in (or on the boundary of) the terminal
    ellipsoid: membership of the successor under the terminal controller,
    decrease of the terminal cost by at least the stage cost, admissibility
    of the terminal controller input, and exact containment of the ellipsoid
    in the state set.  Returns a dict report with `ok` plus worst residuals;
    residuals <= -margin count as satisfied.
    """
    if isinstance(spec_or_terminal, _ocp.OcpSpec):
        spec = spec_or_terminal
        term = spec.terminal
        Q = spec.Q if Q is None else Q
        R = spec.R if R is None else R
        input_set = spec.input_set
        state_rows = spec.state_set.L
    else:
        term = spec_or_terminal
        if Q is None or R is None:
            Q, R = _models.default_weights(model)
        input_set = _ocp.input_polytope_from_box(model)
        state_rows = model.state_rows
    P, K, alpha = term.P_f, term.K_f, term.alpha
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed)))
    points = _ellipsoid_boundary_dirs(P, n_samples, rng)
    if not boundary:
        radii = rng.uniform(0.0, 1.0, size=n_samples) ** (1.0 / P.shape[0])
        points = points * radii[:, None]
    xt = alpha * points
    ut = xt @ K.T
    x_next = _rollout.step(model, model.x_e + xt, model.u_e + ut, substeps)
    xt_next = x_next - model.x_e
    q_now = np.einsum("bi,ij,bj->b", xt, P, xt)
    q_next = np.einsum("bi,ij,bj->b", xt_next, P, xt_next)
    stage = np.einsum("bi,ij,bj->b", xt, Q, xt) + np.einsum("bi,ij,bj->b", ut, R, ut)
    res_inv = q_next / alpha**2 - 1.0 + margin
    res_dec = (q_next - q_now + stage) / np.maximum(q_now, 1e-30) + margin
    res_inp = (ut @ input_set.L.T).max(axis=1) - 1.0 + margin
    # exact containment of the ellipsoid in the state polytope
    Pinv_rows = np.linalg.solve(P, state_rows.T).T
    support = alpha * np.sqrt(np.einsum("ri,ri->r", state_rows, Pinv_rows))
    res_contain = float(support.max() - 1.0) if state_rows.size else -1.0
    report = {
        "ok": bool(
            (res_inv <= 0.0).all()
            and (res_dec <= 0.0).all()
            and (res_inp <= 0.0).all()
            and res_contain <= 0.0
        ),
        "n_samples": int(n_samples),
        "worst_invariance": float(res_inv.max()) - margin,
        "worst_decrease": float(res_dec.max()) - margin,
        "worst_input": float(res_inp.max()) - margin,
        "containment": res_contain,
        "fail_invariance": int((res_inv > 0.0).sum()),
        "fail_decrease": int((res_dec > 0.0).sum()),
        "fail_input": int((res_inp > 0.0).sum()),
    }
    return report


def synth_terminal(model, Q=None, R=None, n_check: int = 10000, *,
                   margin_factor: float = 2.0, margin: float = 1e-6,
                   synthesis_weights=None, seed: int = 0,
                   substeps: int | None = None) -> _ocp.TerminalIngredients:
    """Riccati-based terminal cost, gain, and verified ellipsoid radius.

    The gain comes from the discrete algebraic Riccati equation for the
    synthesis weights (per-benchmark defaults; equal to the stage weights
    unless shaping helps, see default_synthesis_weights).  The cost matrix
    is the exact discrete Lyapunov cost-to-go of that gain under the true
    stage weights, scaled by `margin_factor` to buy a strict decrease margin
    for the nonlinear map; with synthesis weights equal to the stage weights
    this reduces to the scaled LQR pair.  The radius is the largest one
    whose boundary samples satisfy invariance, cost decrease, and input
    admissibility with the given margin; containment in the state set and
    input admissibility over the whole ellipsoid are enforced through exact
    support-function caps.
    """
    if Q is None or R is None:
        dq, dr = _models.default_weights(model)
        Q = dq if Q is None else Q
        R = dr if R is None else R
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if margin_factor < 1.0:
        raise ValueError("margin_factor must be >= 1")
    if synthesis_weights is None:
        Q_syn, R_syn = default_synthesis_weights(model, Q, R)
    else:
        Q_syn, R_syn = synthesis_weights
    Q_syn = np.asarray(Q_syn, dtype=float)
    R_syn = np.asarray(R_syn, dtype=float)
    _, A, B = step_jacobians(model, model.x_e, model.u_e, substeps)
    try:
        P_gain = sla.solve_discrete_are(A, B, Q_syn, R_syn)
    except Exception as err:
        raise SynthesisError(f"Riccati solve failed: {err}") from None
    K = -np.linalg.solve(R_syn + B.T @ P_gain @ B, B.T @ P_gain @ A)
    A_cl = A + B @ K
    try:
        P = sla.solve_discrete_lyapunov(A_cl.T, Q + K.T @ R @ K)
    except Exception as err:
        raise SynthesisError(f"Lyapunov solve failed: {err}") from None
    P = margin_factor * 0.5 * (P + P.T)

    input_set = _ocp.input_polytope_from_box(model)
    state_rows = model.state_rows
    # exact support caps: ellipsoid inside the state set, K x inside the input set
    caps = []
    if state_rows.size:
        Pinv_rows = np.linalg.solve(P, state_rows.T).T
        sup = np.sqrt(np.einsum("ri,ri->r", state_rows, Pinv_rows))
        caps.append(1.0 / sup.max())
    LK = input_set.L @ K
    Pinv_rows = np.linalg.solve(P, LK.T).T
    sup = np.sqrt(np.einsum("ri,ri->r", LK, Pinv_rows))
    caps.append(1.0 / sup.max())
    alpha_cap = (1.0 - 10.0 * margin) * min(caps)
    if alpha_cap <= 1e-6:
        raise SynthesisError("terminal radius collapsed below 1e-6 (constraint caps)")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed)))
    points = _ellipsoid_boundary_dirs(P, n_check, rng)
    # bisect against a stricter margin than the caller asks for, so fresh
    # sample seeds (which can find slightly worse directions) still clear it
    head = 3.0 * margin

    def passes(alpha):
        xt = alpha * points
        ut = xt @ K.T
        x_next = _rollout.step(model, model.x_e + xt, model.u_e + ut, substeps)
        xt_next = x_next - model.x_e
        q_next = np.einsum("bi,ij,bj->b", xt_next, P, xt_next)
        stage = np.einsum("bi,ij,bj->b", xt, Q, xt) + np.einsum("bi,ij,bj->b", ut, R, ut)
        ok_inv = (q_next <= alpha**2 * (1.0 - head)).all()
        ok_dec = ((q_next - alpha**2 + stage) <= -head * alpha**2).all()
        ok_inp = ((ut @ input_set.L.T) <= 1.0 - head).all()
        return bool(ok_inv and ok_dec and ok_inp)

    lo, hi = 1e-6, alpha_cap
    if not passes(lo):
        raise SynthesisError("terminal radius collapsed below 1e-6 (sampled conditions)")
    if passes(hi):
        alpha = hi
    else:
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if passes(mid):
                lo = mid
            else:
                hi = mid
        alpha = lo
    term = _ocp.TerminalIngredients(P_f=P, K_f=K, alpha=alpha)
    # fresh-sample re-verification; shrink on failure rather than trusting bisection
    for _ in range(25):
        rep = certify_terminal(
            model, term, Q=Q, R=R, n_samples=n_check, seed=seed + 1,
            margin=2.0 * margin, boundary=True, substeps=substeps,
        )
        if rep["ok"]:
            return term
        term = _ocp.TerminalIngredients(P_f=P, K_f=K, alpha=term.alpha * 0.98)
    raise SynthesisError("terminal radius failed fresh-sample verification")


# ---------------------------------------------------------------------------
# Lipschitz / disturbance-gain estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LipschitzEstimate:
    """Sampled lower bounds on the discrete map's sensitivity constants."""

    L_f: float
    eps: float
    eps_tilde: float
    top_L_f: tuple[float, float, float]
    top_eps_tilde: tuple[float, float, float]
    n_samples: int
    seed: int


def estimate_lipschitz(model, n_samples: int, eps: float = 0.0, seed: int = 0,
                       substeps: int | None = None) -> LipschitzEstimate:
    """Sampled maximization of state-to-state and input-to-state gains.

    L_f is the largest observed ratio |F(x1,u) - F(x2,u)|_inf / |x1 - x2|_inf
    over Latin-hypercube samples of the sampling box and input box, mixing
    far pairs with short displacements; eps_tilde is the largest observed
    |F(x, u+d) - F(x, u)|_inf over signed-corner and random disturbances of
    size eps.  Both are lower bounds on the true constants.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    sampler = qmc.LatinHypercube(d=model.n_x + model.n_u, seed=seed)
    raw = sampler.random(n_samples)
    xs = model.sample_lo + raw[:, : model.n_x] * (model.sample_hi - model.sample_lo)
    us = model.u_lo + raw[:, model.n_x:] * (model.u_hi - model.u_lo)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed)))

    fx = _rollout.step(model, xs, us, substeps)
    ratios = []
    # far pairs: cyclic shift pairs samples without extra draws
    xs2 = np.roll(xs, 1, axis=0)
    fx2 = _rollout.step(model, xs2, us, substeps)
    den = np.max(np.abs(xs - xs2), axis=1)
    num = np.max(np.abs(fx - fx2), axis=1)
    good = den > 1e-12
    ratios.append(num[good] / den[good])
    # short displacements along random sign patterns
    h = 1e-4
    signs = rng.choice([-1.0, 1.0], size=xs.shape)
    fx3 = _rollout.step(model, xs + h * signs, us, substeps)
    ratios.append(np.max(np.abs(fx3 - fx), axis=1) / h)
    allr = np.sort(np.concatenate(ratios))
    top_L = tuple(float(v) for v in allr[-3:][::-1]) if allr.size >= 3 else tuple(allr[::-1])

    if eps > 0.0:
        corners = np.array(
            [[(1.0 if (i >> j) & 1 else -1.0) for j in range(model.n_u)]
             for i in range(1 << model.n_u)]
        )
        disp = []
        for c in corners:
            fd = _rollout.step(model, xs, us + eps * c, substeps)
            disp.append(np.max(np.abs(fd - fx), axis=1))
        rand_d = rng.uniform(-eps, eps, size=(4,) + us.shape)
        for d in rand_d:
            fd = _rollout.step(model, xs, us + d, substeps)
            disp.append(np.max(np.abs(fd - fx), axis=1))
        alld = np.sort(np.concatenate(disp))
        top_e = tuple(float(v) for v in alld[-3:][::-1]) if alld.size >= 3 else tuple(alld[::-1])
        eps_tilde = float(alld[-1])
    else:
        eps_tilde = 0.0
        top_e = (0.0, 0.0, 0.0)
    return LipschitzEstimate(
        L_f=float(allr[-1]),
        eps=float(eps),
        eps_tilde=eps_tilde,
        top_L_f=top_L,
        top_eps_tilde=top_e,
        n_samples=int(n_samples),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# Perturbation probe: robust solutions stay nominally feasible
# ---------------------------------------------------------------------------

def lipschitz_tightening_for(model, terminal, eps: float, n_samples: int = 3000,
                             seed: int = 0, n_probe: int = 24) -> _ocp.LipschitzTightening:
    """Lipschitz tightening with a concrete tightened terminal radius.

    Constants come from sampled estimation.  The terminal radius first tries
    the worst-case geometric-growth bound; when that swallows the set (the
    growth factors are very crude for unstable maps), it falls back to a
    sampled bound on the terminal displacement that input perturbations
    actually cause along admissible rollouts, with a 1.5x safety factor.
    Like the constants themselves, the fallback is sampled, not proven.
    """
    est = estimate_lipschitz(model, n_samples, eps=eps, seed=seed)
    t0 = _ocp.LipschitzTightening(L_f=est.L_f, eps=eps, eps_tilde=est.eps_tilde)
    N = model.N
    c_N = float(_ocp.lipschitz_factors(est.L_f, N + 1)[N])
    worst = terminal.alpha - c_N * est.eps_tilde * _ocp._box_to_ellipsoid_norm(terminal.P_f)
    if worst >= 0.25 * terminal.alpha:
        return _ocp.LipschitzTightening(L_f=est.L_f, eps=eps,
                                        eps_tilde=est.eps_tilde, alpha_bar=worst)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed + 1)))
    L_chol = np.linalg.cholesky(terminal.P_f)
    disp = 0.0
    n_flat = model.n_u * N
    for i in range(n_probe):
        x0 = _models.sample_initial_state(model, seed + 2, i)
        useq = np.empty((N, model.n_u))
        x = x0
        K = terminal.K_f
        for k in range(N):
            u = np.clip(model.u_e + K @ (x - model.x_e), model.u_lo, model.u_hi)
            useq[k] = u
            x = _rollout.step(model, x, u)
        base_term = x
        ds = [rng.uniform(-eps, eps, size=n_flat) for _ in range(16)]
        ds.append(eps * np.ones(n_flat))
        ds.append(-eps * np.ones(n_flat))
        D = np.stack(ds).reshape(len(ds), N, model.n_u)
        try:
            trajs = _rollout.rollout(
                model, np.broadcast_to(x0, (len(ds), model.n_x)), useq[None] + D
            )
        except _rollout.DivergenceError:
            continue
        delta = trajs[:, -1, :] - base_term
        disp = max(disp, float(np.linalg.norm(delta @ L_chol, axis=1).max()))
    alpha_bar = terminal.alpha - 1.5 * disp
    if alpha_bar <= 0.0:
        raise SynthesisError(
            "sampled terminal displacement exceeds the terminal radius; "
            "reduce eps or supply alpha_bar explicitly"
        )
    return _ocp.LipschitzTightening(L_f=est.L_f, eps=eps,
                                    eps_tilde=est.eps_tilde, alpha_bar=alpha_bar)


@dataclass
class ProbeReport:
    passed: bool
    n_perturbations: int
    failures: list = field(default_factory=list)
    solve: Optional[SolveResult] = None


def lemma1_probe(model, spec, x0, eps: float, n_trials: int, seed: int = 0,
                 options: SolveOptions | None = None) -> ProbeReport:
    """Perturb a tightened solution and check nominal feasibility of each.

    Perturbations are n_trials i.i.d. uniform draws from the infinity-norm
    ball of radius eps over the whole sequence, plus the 2 n_u N single-axis
    extremes and the two all-coordinate corners.  Failures are reported as
    values, not raised.
    """
    res = solve_ocp(model, spec, x0, options, tightened=True)
    if not res.feasible:
        raise ValueError("tightened problem is infeasible at x0; probe precondition unmet")
    n_flat = model.n_u * spec.N
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed)))
    ds = [rng.uniform(-eps, eps, size=n_flat) for _ in range(n_trials)]
    for i in range(n_flat):
        for sgn in (1.0, -1.0):
            d = np.zeros(n_flat)
            d[i] = sgn * eps
            ds.append(d)
    ds.append(eps * np.ones(n_flat))
    ds.append(-eps * np.ones(n_flat))
    D = np.stack(ds).reshape(len(ds), spec.N, model.n_u)
    useqs = res.useq[None, :, :] + D
    trajs = _rollout.rollout(model, np.broadcast_to(x0, (len(ds), model.n_x)), useqs)
    ok = _ocp.feasible_mask(spec, model, trajs, useqs)
    failures = []
    for idx in np.flatnonzero(~ok):
        rep = _ocp.check_feasible(spec, model, x0, useqs[idx], traj=trajs[idx])
        failures.append((int(idx), rep))
    return ProbeReport(
        passed=bool(ok.all()),
        n_perturbations=len(ds),
        failures=failures,
        solve=res,
    )


# ---------------------------------------------------------------------------
# Solver-backed oracle policy
# ---------------------------------------------------------------------------

class SolverPolicy:
    """Policy that proposes the solver's sequence at each queried state.

    Solutions are memoized by state bytes, and each new solve warm-starts
    from the previous solution shifted by one stage, so closed-loop replay is
    cheap.  Proposals are just proposals: the guard still validates them.
    """

    def __init__(self, model, spec, options: SolveOptions | None = None,
                 tightened: bool = False, memoize: bool = True):
        self.model = model
        self.spec = spec
        self.options = options or SolveOptions()
        self.tightened = tightened
        self.memoize = memoize
        self._memo: dict[bytes, np.ndarray] = {}
        self._warm: Optional[np.ndarray] = None
        self._warm_x: Optional[np.ndarray] = None

    def _shifted_warm(self) -> np.ndarray:
        """Previous solution shifted one stage, terminal controller appended."""
        traj = _rollout.rollout(self.model, self._warm_x, self._warm)
        u_term = self.model.u_e + self.spec.terminal.K_f @ (traj[-1] - self.model.x_e)
        u_term = np.clip(u_term, self.model.u_lo, self.model.u_hi)
        return np.vstack([self._warm[1:], u_term])

    def propose(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        if self.memoize and key in self._memo:
            return self._memo[key].copy()
        options = self.options
        if self._warm is not None:
            try:
                options = dataclasses.replace(options, init=self._shifted_warm())
            except _rollout.DivergenceError:
                pass
        res = solve_ocp(self.model, self.spec, x, options, tightened=self.tightened)
        self._warm = res.useq
        self._warm_x = x
        if self.memoize:
            self._memo[key] = res.useq.copy()
        return res.useq.copy()
