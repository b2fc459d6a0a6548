"""Fixed-step discretization and open-loop prediction.

The discrete map realized here (classical RK4 over one sampling period) is
the single source of truth for dataset generation, feasibility checking, and
closed-loop simulation: the plant is propagated with the same function that
the predictions use.
"""

from __future__ import annotations

import numpy as np

__all__ = ["DivergenceError", "step", "rollout"]


class DivergenceError(RuntimeError):
    """A rollout produced a non-finite state."""

    def __init__(self, message, stage=None, substep=None):
        super().__init__(message)
        self.stage = stage
        self.substep = substep


def step(model, x, u, substeps: int | None = None) -> np.ndarray:
    """Advance the state by one sampling period with classical RK4.

    `x` may carry leading batch dimensions; `u` must broadcast against it.
    Raises DivergenceError naming the substep if the state stops being
    finite.
    """
    if substeps is None:
        substeps = model.substeps
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h = model.T_s / substeps
    f = model.dynamics
    for j in range(substeps):
        k1 = f(x, u)
        k2 = f(x + (0.5 * h) * k1, u)
        k3 = f(x + (0.5 * h) * k2, u)
        k4 = f(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"state became non-finite at substep {j}", substep=j
            )
    return x


def rollout(model, x, useq, substeps: int | None = None) -> np.ndarray:
    """Predicted trajectory for an input sequence, states[0] = x exactly.

    `useq` has shape (N, n_u) or batched (..., N, n_u); the returned
    trajectory has one more entry along the stage axis.  A divergence error
    carries the failing stage index.
    """
    x = np.asarray(x, dtype=float)
    useq = np.asarray(useq, dtype=float)
    if useq.ndim < 2:
        raise ValueError("input sequence must have shape (N, n_u)")
    if useq.shape[-1] != model.n_u:
        raise ValueError(
            f"input dimension mismatch: expected {model.n_u}, got {useq.shape[-1]}"
        )
    n_steps = useq.shape[-2]
    traj = np.empty(useq.shape[:-2] + (n_steps + 1, model.n_x))
    traj[..., 0, :] = x
    cur = x
    for k in range(n_steps):
        try:
            cur = step(model, cur, useq[..., k, :], substeps)
        except DivergenceError as err:
            raise DivergenceError(
                f"rollout diverged at stage {k} (substep {err.substep})",
                stage=k,
                substep=err.substep,
            ) from None
        traj[..., k + 1, :] = cur
    return traj
