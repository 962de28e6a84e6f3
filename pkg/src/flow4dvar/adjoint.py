"""Discrete adjoint of the theta-scheme and the reduced gradient.

The step residuals couple only consecutive states, so the state Jacobian
is block lower bidiagonal and its transpose is solved by a backward sweep::

    (∂F_{k-1}/∂y^k)^T λ^k = -∂J/∂y^k - (∂F_k/∂y^k)^T λ^{k+1},   λ^{K+1} = 0
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import FlowProblem, LinearSolverError, Trajectory


@dataclass
class AdjointState:
    lam_u: np.ndarray  # full velocity vector, zero on walls
    lam_p: np.ndarray
    k: int


def solve_adjoint(problem: FlowProblem, traj: Trajectory, sources, factors=None) -> np.ndarray:
    """Backward sweep.

    ``sources`` is (K+1, n) with row ``k`` holding ∂J/∂y^k in unknown numbering
    (row 0 is ignored).  ``factors`` optionally holds the LU factors of
    ∂F_{k-1}/∂y^k for k = 1..K from the forward solve.  Returns ``lam`` of
    shape (K+1, n) with ``lam[0] = 0``.
    """
    K = traj.K
    n = problem.n
    sources = np.asarray(sources, dtype=float)
    if sources.shape != (K + 1, n):
        raise ValueError(f"sources must have shape {(K + 1, n)}")
    lam = np.zeros((K + 1, n))
    coupling = np.zeros(n)
    for k in range(K, 0, -1):
        rhs = -sources[k] - coupling
        if not np.any(rhs):
            lam[k] = 0.0
        else:
            if factors is not None:
                lu = factors[k - 1]
            else:
                try:
                    lu = problem.factorize(problem.jacobian_new(traj.U[k], traj.U[k - 1]))
                except LinearSolverError as exc:
                    raise LinearSolverError(f"adjoint step {k}: {exc}") from exc
            lam[k] = lu.solve(rhs, trans="T")
            if not np.all(np.isfinite(lam[k])):
                raise LinearSolverError(f"adjoint step {k}: non-finite solution")
        # coupling into the equation for y^{k-1}: (∂F_{k-1}/∂u^{k-1})^T λ^k
        coupling = np.zeros(n)
        if k >= 2 and np.any(lam[k]):
            J0 = problem.jacobian_old(traj.U[k], traj.U[k - 1])
            coupling[: problem.nuf] = J0.T @ lam[k]
    return lam


def adjoint_states(problem: FlowProblem, lam: np.ndarray) -> list:
    out = []
    for k in range(1, len(lam)):
        u, p = problem.split(lam[k])
        out.append(AdjointState(u, p, k))
    return out


def assemble_gradient(problem: FlowProblem, traj: Trajectory, lam: np.ndarray, reg_gradient=None) -> np.ndarray:
    """Reduced gradient ``(∂F/∂m)^T λ + ∂R/∂m`` in the flat control layout
    ``[u0 on non-wall DOFs, g_1, ..., g_K]``."""
    K = traj.K
    grad = np.empty(problem.nuf + K * problem.ng)
    J0 = problem.jacobian_old(traj.U[1], traj.U[0])
    grad[: problem.nuf] = J0.T @ lam[1]
    Gt = problem.G_map.T.tocsr()
    grad[problem.nuf:] = (Gt @ lam[1:].T).T.ravel()
    if reg_gradient is not None:
        reg_gradient = np.asarray(reg_gradient)
        if reg_gradient.shape != grad.shape:
            raise ValueError("regularisation gradient does not match the control layout")
        grad += reg_gradient
    return grad


# -- full-space operators, used to check adjointness ------------------------

def apply_state_jacobian(problem: FlowProblem, traj: Trajectory, w: np.ndarray) -> np.ndarray:
    """(∂F/∂y) w for a state direction ``w`` of shape (K+1, n) (row 0 ignored)."""
    K = traj.K
    out = np.zeros((K + 1, problem.n))
    for k in range(K):
        J1 = problem.jacobian_new(traj.U[k + 1], traj.U[k])
        out[k + 1] = J1 @ w[k + 1]
        if k >= 1:
            J0 = problem.jacobian_old(traj.U[k + 1], traj.U[k])
            out[k + 1] += J0 @ w[k, : problem.nuf]
    return out


def apply_state_jacobian_adjoint(problem: FlowProblem, traj: Trajectory, lam: np.ndarray) -> np.ndarray:
    """(∂F/∂y)^* λ with λ of shape (K+1, n); row ``k`` pairs with residual F_{k-1}."""
    K = traj.K
    out = np.zeros((K + 1, problem.n))
    for k in range(K):
        J1 = problem.jacobian_new(traj.U[k + 1], traj.U[k])
        out[k + 1] += J1.T @ lam[k + 1]
        if k >= 1:
            J0 = problem.jacobian_old(traj.U[k + 1], traj.U[k])
            out[k, : problem.nuf] += J0.T @ lam[k + 1]
    return out
