"""Control layout, Tikhonov regularisation and the Riesz map of the control space.

A control is ``m = (u0, g_1..g_K)``.  Its flat layout is ``[u0 on non-wall
velocity DOFs, g_1, ..., g_K]`` with each ``g_k`` on the Γ_D DOFs of the
forward problem.  The regularisation is::

    R = α/2 Σ_k δt (g_kᵀ W g_k + ġ_kᵀ W ġ_k) + γ/2 u0ᵀ (M + K) u0

with ``W`` the boundary mass plus tangential stiffness on Γ_D and
``ġ_k = (g_k - g_{k-1})/δt``.  ``g_0`` is the Γ_D trace of u0, unless the
one-sided variant is selected, in which case the sum over ġ starts at k = 2.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .forward import FlowProblem, LinearSolverError, read_container, write_container


@dataclass(frozen=True)
class RegularisationConfig:
    alpha: float = 1e-5
    gamma: float = 1e-5
    anchor_initial_trace: bool = True  # g_0 := trace of u0

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise fem.ConfigurationError("regularisation weights must be non-negative")


@dataclass(eq=False)
class Control:
    u0: np.ndarray  # full velocity vector (2 nv), walls zero
    g: np.ndarray  # (K, ng) on Γ_D DOFs

    def copy(self) -> "Control":
        return Control(self.u0.copy(), self.g.copy())


class ControlSpace:
    def __init__(self, problem: FlowProblem, anchor_initial_trace: bool = True):
        self.problem = problem
        self.K = problem.cfg.K
        self.dt = problem.cfg.dt
        self.nu0 = problem.nuf
        self.ng = problem.ng
        self.size = self.nu0 + self.K * self.ng
        self.anchor = anchor_initial_trace

    # -- layout ------------------------------------------------------------------
    def zero(self) -> Control:
        return Control(np.zeros(2 * self.problem.nv), np.zeros((self.K, self.ng)))

    def to_vector(self, m: Control) -> np.ndarray:
        g = np.asarray(m.g, dtype=float)
        if g.shape != (self.K, self.ng) or len(m.u0) != 2 * self.problem.nv:
            raise ValueError("control does not match the problem layout")
        return np.concatenate([np.asarray(m.u0)[self.problem.free_u], g.ravel()])

    def from_vector(self, x) -> Control:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise ValueError(f"control vector must have length {self.size}")
        return Control(self.problem.full_u(x[: self.nu0]), x[self.nu0:].reshape(self.K, self.ng).copy())

    def split(self, x):
        return x[: self.nu0], x[self.nu0:].reshape(self.K, self.ng)

    # -- operators -----------------------------------------------------------------
    @cached_property
    def H_u0(self) -> sp.csr_matrix:
        P = self.problem
        f = P.free_u
        return (P.M + P.Kstiff).tocsr()[f][:, f].tocsr()

    @cached_property
    def W(self) -> sp.csr_matrix:
        P = self.problem
        facets = P.mesh.facets_with(*P.cfg.dirichlet_tags)
        Wf = fem.assemble_boundary_mass(P.V, facets) + fem.assemble_boundary_stiffness(P.V, facets)
        g = P.g_dofs
        return Wf.tocsr()[g][:, g].tocsr()

    @cached_property
    def trace(self) -> sp.csr_matrix:
        """Selection of the Γ_D trace from the u0 block, (ng, nu0)."""
        P = self.problem
        cols = P.u_index[P.g_dofs]
        return sp.csr_matrix((np.ones(self.ng), (np.arange(self.ng), cols)), shape=(self.ng, self.nu0))

    def _boundary_form(self) -> sp.csr_matrix:
        """Unweighted space-time H¹ form of the boundary data, over the flat layout."""
        K, dt, ng = self.K, self.dt, self.ng
        # stacked [g_0, g_1..g_K] from the flat layout
        top = sp.hstack([self.trace, sp.csr_matrix((ng, K * ng))])
        bottom = sp.hstack([sp.csr_matrix((K * ng, self.nu0)), sp.identity(K * ng)])
        S = sp.vstack([top, bottom]).tocsr()
        D = sp.diags([-np.ones(K), np.ones(K)], [0, 1], shape=(K, K + 1)).tocsr()
        if not self.anchor:
            D = D[1:]
        diff = sp.kron(D.T @ D, self.W) / dt
        tmass = sp.block_diag([sp.csr_matrix((self.nu0, self.nu0)), sp.kron(sp.identity(K), dt * self.W)])
        return (S.T @ diff @ S + tmass).tocsr()

    @cached_property
    def boundary_form(self) -> sp.csr_matrix:
        return self._boundary_form()

    @cached_property
    def initial_form(self) -> sp.csr_matrix:
        return sp.block_diag([self.H_u0, sp.csr_matrix((self.K * self.ng, self.K * self.ng))]).tocsr()

    def hessian(self, alpha: float, gamma: float) -> sp.csr_matrix:
        return (alpha * self.boundary_form + gamma * self.initial_form).tocsr()

    # -- regularisation --------------------------------------------------------------
    def regularisation_value(self, x, cfg: RegularisationConfig) -> float:
        u0, g = self.split(np.asarray(x, dtype=float))
        dt, W = self.dt, self.W
        val_u0 = u0 @ (self.H_u0 @ u0)
        Wg = (W @ g.T).T
        val_g = dt * np.sum(g * Wg)
        g0 = self.trace @ u0
        prev = np.vstack([g0[None], g[:-1]])
        gd = (g - prev) / dt
        if not self.anchor:
            gd = gd[1:]
        val_g += dt * np.sum(gd * (W @ gd.T).T)
        return float(0.5 * cfg.alpha * val_g + 0.5 * cfg.gamma * val_u0)

    def regularisation_gradient(self, x, cfg: RegularisationConfig) -> np.ndarray:
        return self.hessian(cfg.alpha, cfg.gamma) @ np.asarray(x, dtype=float)

    @cached_property
    def riesz(self) -> "RieszMap":
        return RieszMap(self.hessian(1.0, 1.0))

    def inner(self, a, b) -> float:
        """The optimisation inner product (a, b)_M on primal vectors."""
        return float(a @ (self.riesz.H @ b))


class RieszMap:
    """Dual -> primal map ``H^{-1}`` for the unweighted H¹ control metric."""

    def __init__(self, H: sp.spmatrix):
        self.H = H.tocsc()
        try:
            self._lu = spla.splu(self.H)
        except RuntimeError as exc:
            raise LinearSolverError(f"singular Riesz operator: {exc}") from exc

    def __call__(self, grad) -> np.ndarray:
        return self._lu.solve(np.asarray(grad, dtype=float))

    def inverse(self, x) -> np.ndarray:
        return self.H @ x

    def norm(self, grad) -> float:
        """M-norm of the primal representative of a dual vector."""
        return float(np.sqrt(max(grad @ self(grad), 0.0)))


class EuclideanRiesz:
    """Identity on coefficients (test hook: textbook L-BFGS)."""

    def __init__(self, size: int):
        self.H = sp.identity(size, format="csr")

    def __call__(self, grad):
        return np.array(grad, dtype=float)

    def inverse(self, x):
        return np.array(x, dtype=float)

    def norm(self, grad) -> float:
        return float(np.linalg.norm(grad))


def save_control(m: Control, path, mesh_hash: str = "") -> None:
    write_container(path, {"kind": "control", "mesh_hash": mesh_hash, "K": int(m.g.shape[0]),
                           "ng": int(m.g.shape[1])}, {"u0": m.u0, "g": m.g})


def load_control(path):
    meta, arr = read_container(path)
    if meta.get("kind") != "control":
        raise ValueError(f"{path}: not a control file")
    return Control(arr["u0"], arr["g"]), meta
