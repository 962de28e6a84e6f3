"""Theta-scheme Navier-Stokes with Nitsche boundary control.

Per step, with ``uθ = θ u1 + (1-θ) u0`` and test functions ``(v, q)``::

    (u1 - u0)/dt . v + ν ∇uθ : ∇v + (uθ . ∇) uθ . v
      - p1 div v - q div u1 - β h² ∇p1 . ∇q
      - (ν ∂uθ/∂n - p1 n) . v          on Γ_D
      - (θ ν ∂v/∂n - q n) . (u1 - g1)   on Γ_D
      + ν σ / h (u1 - g1) . v           on Γ_D  = f . v

Walls carry ``u = 0`` strongly.  The unknown vector of a step is
``[u1 restricted to non-wall DOFs, p1]``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .fem import Space
from .mesh import Mesh

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, msg, residual=None, step=None):
        self.residual = residual
        self.step = step
        super().__init__(msg)


class LinearSolverError(SolverError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    nu: float = 3.5
    dt: float = 0.004625
    T: float = 0.555
    theta: float = 0.5
    sigma: float = 100.0
    beta: float = 1e-3
    body_force: tuple = (0.0, 0.0)
    outlet: str = "out1"  # controlled outlet; the other one is traction free
    newton_atol: float = 1e-10
    newton_rtol: float = 1e-11
    newton_max_iter: int = 50
    convection: bool = True  # test hook: False gives the Stokes limit

    def __post_init__(self):
        if not self.theta > 0 or self.theta > 1:
            raise fem.ConfigurationError("theta must lie in (0, 1]")
        if self.dt <= 0 or self.T <= 0:
            raise fem.ConfigurationError("dt and T must be positive")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise fem.ConfigurationError(f"T/dt = {ratio} is not integral")
        if self.outlet not in ("out1", "out2"):
            raise fem.ConfigurationError("outlet must be out1 or out2")
        if self.sigma <= 0:
            raise fem.ConfigurationError("Nitsche coefficient must be positive")
        if self.beta <= 0:
            raise fem.ConfigurationError("stabilisation coefficient must be positive")

    @property
    def K(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def dirichlet_tags(self) -> tuple:
        return ("inlet", self.outlet)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.K + 1)

    def swapped(self) -> "ModelConfig":
        return replace(self, outlet="out2" if self.outlet == "out1" else "out1")


class _Pattern:
    """Fixed CSR sparsity with a scatter map from COO entries."""

    def __init__(self, rows, cols, shape):
        self.shape = shape
        key = rows.astype(np.int64) * shape[1] + cols
        uniq, inv = np.unique(key, return_inverse=True)
        self.map = inv
        self.nnz = len(uniq)
        r = uniq // shape[1]
        self.indices = (uniq % shape[1]).astype(np.int32)
        self.indptr = np.searchsorted(r, np.arange(shape[0] + 1)).astype(np.int32)

    def data_from(self, vals):
        return np.bincount(self.map, weights=vals, minlength=self.nnz)

    def matrix(self, data) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


@dataclass
class FlowState:
    u: np.ndarray
    p: np.ndarray
    k: int = 0


@dataclass
class StepInfo:
    iterations: int
    residuals: list


@dataclass(eq=False)
class Trajectory:
    """States ``k = 0..K``: ``U`` is (K+1, 2 nv), ``P`` is (K+1, nv)."""

    U: np.ndarray
    P: np.ndarray
    dt: float
    theta: float
    mesh_hash: str = ""
    newton_iterations: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.U) - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.K + 1)

    @property
    def states(self) -> list:
        return [FlowState(self.U[k], self.P[k], k) for k in range(self.K + 1)]

    def scaled(self, c: float) -> "Trajectory":
        return Trajectory(c * self.U, c * self.P, self.dt, self.theta, self.mesh_hash)


class FlowProblem:
    """Discrete operators and step solver for one mesh and model configuration."""

    def __init__(self, mesh: Mesh, cfg: ModelConfig):
        self.mesh = mesh
        self.cfg = cfg
        self.V = Space(mesh, 2)
        self.Q = Space(mesh, 1)
        nv = mesh.num_vertices
        self.nv = nv
        self.wall_dofs = self.V.vertex_dofs(mesh.boundary_vertices("walls")) if len(
            mesh.facets_with("walls")) else np.zeros(0, dtype=np.int64)
        self.free_u = np.setdiff1d(np.arange(2 * nv), self.wall_dofs)
        self.nuf = len(self.free_u)
        self.n = self.nuf + nv
        self.g_dofs = np.unique(np.concatenate([self.V.boundary_dofs(t) for t in cfg.dirichlet_tags]))
        self.ng = len(self.g_dofs)
        # position of each velocity DOF among the unknowns, -1 on walls
        self.u_index = -np.ones(2 * nv, dtype=np.int64)
        self.u_index[self.free_u] = np.arange(self.nuf)
        self.g_index = -np.ones(2 * nv, dtype=np.int64)
        self.g_index[self.g_dofs] = np.arange(self.ng)

    # -- operators ----------------------------------------------------------
    @cached_property
    def M(self):
        return fem.assemble_mass(self.V)

    @cached_property
    def Kstiff(self):
        return fem.assemble_stiffness(self.V, 1.0)

    @cached_property
    def B(self):
        return fem.assemble_divergence(self.V, self.Q)

    @cached_property
    def S(self):
        return fem.assemble_pressure_stabilization(self.Q, self.cfg.beta)

    @cached_property
    def nitsche(self) -> fem.NitscheBlocks:
        c = self.cfg
        return fem.assemble_nitsche_blocks(self.V, self.Q, c.dirichlet_tags, c.nu, c.sigma, c.theta)

    @cached_property
    def _linear_blocks(self):
        """(A1 full-vel, A0 full-vel, pressure blocks) in global velocity numbering."""
        c, N = self.cfg, self.nitsche
        th, tt = c.theta, 1.0 - c.theta
        Auu1 = self.M / c.dt + th * c.nu * self.Kstiff + N.vv_new
        Auu0 = -self.M / c.dt + tt * c.nu * self.Kstiff + N.vv_old
        Aup = -self.B.T + N.pv
        Apu = -self.B + N.qv
        return Auu1.tocsr(), Auu0.tocsr(), Aup.tocsr(), Apu.tocsr()

    @cached_property
    def A1_lin(self) -> sp.csr_matrix:
        Auu1, _, Aup, Apu = self._linear_blocks
        f = self.free_u
        return sp.bmat([[Auu1[f][:, f], Aup[f]], [Apu[:, f], self.S]], format="csr")

    @cached_property
    def A0_lin(self) -> sp.csr_matrix:
        _, Auu0, _, _ = self._linear_blocks
        f = self.free_u
        return sp.vstack([Auu0[f][:, f], sp.csr_matrix((self.nv, self.nuf))], format="csr")

    @cached_property
    def G_map(self) -> sp.csr_matrix:
        """Derivative of the step residual with respect to the boundary data g1."""
        N, f, g = self.nitsche, self.free_u, self.g_dofs
        return sp.vstack([N.gv[f][:, g], N.gq[:, g]], format="csr")

    @cached_property
    def load(self) -> np.ndarray:
        fx, fy = self.cfg.body_force
        r = np.zeros(self.n)
        if fx or fy:
            fvec = self.V.interpolate(lambda x, y: (fx + 0 * x, fy + 0 * x))
            r[: self.nuf] = (self.M @ fvec)[self.free_u]
        return r

    @cached_property
    def _conv_coo(self):
        """COO positions of the cellwise 6x6 convection blocks in unknown numbering."""
        dm = self.V.dof_map  # (nc, 6)
        rows = np.repeat(dm, 6, axis=1).ravel()
        cols = np.tile(dm, (1, 6)).ravel()
        r = self.u_index[rows]
        c = self.u_index[cols]
        keep = (r >= 0) & (c >= 0)
        return keep, r[keep], c[keep]

    @cached_property
    def _pattern1(self):
        keep, r, c = self._conv_coo
        A = self.A1_lin.tocoo()
        pat = _Pattern(np.concatenate([A.row, r]), np.concatenate([A.col, c]), (self.n, self.n))
        base = pat.data_from(np.concatenate([A.data, np.zeros(len(r))]))
        conv_map = pat.map[len(A.data):]
        return pat, base, conv_map

    @cached_property
    def _pattern0(self):
        keep, r, c = self._conv_coo
        A = self.A0_lin.tocoo()
        pat = _Pattern(np.concatenate([A.row, r]), np.concatenate([A.col, c]), (self.n, self.nuf))
        base = pat.data_from(np.concatenate([A.data, np.zeros(len(r))]))
        conv_map = pat.map[len(A.data):]
        return pat, base, conv_map

    @cached_property
    def _cell_mass(self):
        return self.mesh.areas[:, None, None] * fem._MASS_REF[None]

    @cached_property
    def _conv_weights(self):
        # W[c, q, i] = wt_q A_c phi_i(q)
        return np.einsum("q,c,qi->cqi", fem.TRI_WEIGHTS, self.mesh.areas, fem.TRI_BARY)

    # -- nonlinear term -------------------------------------------------------
    def _cell_fields(self, w):
        nv = self.nv
        c = self.mesh.cells
        wc = np.stack([w[:nv][c], w[nv:][c]], axis=1)  # (nc, 2, 3) component, vertex
        return wc

    def _conv_local(self, w):
        """Local 6x6 Jacobian blocks of w -> (w.∇)w and the local residual vectors.

        Uses the closed-form P1 products ``int φ_i φ_a = A (1 + δ_ia) / 12``.
        """
        g = self.mesh.grad_basis  # (nc, 3, 2)
        wc = self._cell_fields(w)  # (nc, 2, 3)
        wg = np.matmul(wc.transpose(0, 2, 1), g.transpose(0, 2, 1))  # (nc, 3a, 3j): w_a . ∇φ_j
        mloc = self._cell_mass
        Cl = np.matmul(mloc, wg)  # (nc, 3i, 3j)
        du = np.matmul(wc, g)  # (nc, comp, dir)
        nc = len(g)
        J = np.empty((nc, 2, 3, 2, 3))
        J[:] = du[:, :, None, :, None] * mloc[:, None, :, None, :]
        J[:, 0, :, 0, :] += Cl
        J[:, 1, :, 1, :] += Cl
        vec = np.matmul(wc, Cl.transpose(0, 2, 1))  # (nc, comp, i)
        return J.reshape(nc, 36), vec.reshape(nc, 6)

    def convection_vector(self, w) -> np.ndarray:
        """Global velocity vector of ``int (w.∇) w . v``."""
        _, vec = self._conv_local(w)
        return np.bincount(self.V.dof_map.ravel(), weights=vec.ravel(), minlength=2 * self.nv)

    # -- step residual and Jacobians -----------------------------------------
    def full_u(self, uf) -> np.ndarray:
        u = np.zeros(2 * self.nv)
        u[self.free_u] = uf
        return u

    def split(self, x):
        return self.full_u(x[: self.nuf]), x[self.nuf:].copy()

    def residual(self, x1, u0, g1) -> np.ndarray:
        """Step residual for unknowns ``x1`` given full previous velocity ``u0``."""
        th = self.cfg.theta
        u1 = self.full_u(x1[: self.nuf])
        r = self.A1_lin @ x1 + self.A0_lin @ u0[self.free_u] + self.G_map @ g1 - self.load
        if self.cfg.convection:
            ut = th * u1 + (1 - th) * u0
            r[: self.nuf] += self.convection_vector(ut)[self.free_u]
        return r

    def _jac(self, which, u1, u0):
        th = self.cfg.theta
        pat, base, cmap = self._pattern1 if which == 1 else self._pattern0
        weight = th if which == 1 else 1.0 - th
        if not self.cfg.convection or weight == 0.0:
            return pat.matrix(base.copy())
        keep = self._conv_coo[0]
        J, _ = self._conv_local(th * u1 + (1 - th) * u0)
        extra = np.bincount(cmap, weights=J.ravel()[keep], minlength=pat.nnz)
        return pat.matrix(base + weight * extra)

    def jacobian_new(self, u1, u0) -> sp.csr_matrix:
        """∂F_k/∂y^{k+1} at (u1, u0), square in unknown numbering."""
        return self._jac(1, u1, u0)

    def jacobian_old(self, u1, u0) -> sp.csr_matrix:
        """∂F_k/∂u^k restricted to non-wall DOFs, shape (n, nuf)."""
        return self._jac(0, u1, u0)

    # -- solvers ---------------------------------------------------------------
    def factorize(self, J):
        try:
            return spla.splu(J.tocsc())
        except RuntimeError as exc:
            raise LinearSolverError(f"singular step Jacobian: {exc}") from exc

    def solve_step(self, u0, g1, guess=None, lu=None):
        """Newton iteration for one step.

        With ``lu`` given (a factorised Jacobian at a nearby state) the
        iteration starts as a chord method and refreshes the Jacobian at the
        current iterate whenever the residual contracts by less than 4x.
        """
        cfg = self.cfg
        x = np.concatenate([u0[self.free_u], np.zeros(self.nv)]) if guess is None else guess.copy()
        r = self.residual(x, u0, g1)
        res = [float(np.linalg.norm(r))]
        tol = max(cfg.newton_atol, cfg.newton_rtol * res[0])
        it = 0
        fresh = False
        while res[-1] > tol:
            if it >= cfg.newton_max_iter:
                raise SolverError(f"Newton did not converge in {it} iterations (residual {res[-1]:.3e})",
                                  residual=res[-1])
            if lu is None:
                lu = self.factorize(self.jacobian_new(self.full_u(x[: self.nuf]), u0))
                fresh = True
            dx = lu.solve(-r)
            if not np.all(np.isfinite(dx)):
                raise LinearSolverError("non-finite Newton update")
            x_new = x + dx
            r_new = self.residual(x_new, u0, g1)
            rn = float(np.linalg.norm(r_new))
            it += 1
            if not math.isfinite(rn):
                raise SolverError("Newton diverged", residual=rn)
            if rn > res[-1] and not fresh:
                lu = None  # stale Jacobian made things worse: retry from x with a fresh one
                continue
            lam = 1.0
            while rn > res[-1] and lam > 1e-3:
                # damped Newton: backtrack on the residual norm
                lam *= 0.5
                x_new = x + lam * dx
                r_new = self.residual(x_new, u0, g1)
                rn = float(np.linalg.norm(r_new))
            if lam < 1.0:
                lu = None
            x, r = x_new, r_new
            res.append(rn)
            if np.linalg.norm(dx) <= 1e-14 * (1.0 + np.linalg.norm(x)):
                break
            if rn > 0.25 * res[-2]:
                lu = None
            fresh = False
        return x, StepInfo(it, res)

    def solve(self, u0, G, keep_factors: bool = False):
        """Trajectory from initial velocity ``u0`` (full length) and boundary data ``G`` (K, ng).

        With ``keep_factors`` the LU factors of ∂F_k/∂y^{k+1} at the converged
        states are returned as well, for the adjoint sweep.
        """
        K = self.cfg.K
        G = np.asarray(G, dtype=float).reshape(K, self.ng)
        U = np.zeros((K + 1, 2 * self.nv))
        P = np.zeros((K + 1, self.nv))
        U[0] = u0
        U[0, self.wall_dofs] = 0.0
        iters = []
        factors = []
        lu = None
        x_prev = None
        for k in range(K):
            x_k = np.concatenate([U[k, self.free_u], P[k]])
            # p^0 is not a state variable, so only extrapolate from k >= 2
            guess = x_k if x_prev is None or k < 2 else 2 * x_k - x_prev
            try:
                x, info = self.solve_step(U[k], G[k], guess, lu)
            except SolverError:
                try:
                    # fall back to plain damped Newton from the previous state
                    x, info = self.solve_step(U[k], G[k], x_k, None)
                except SolverError as exc:
                    raise type(exc)(f"step {k + 1}: {exc}", residual=exc.residual, step=k + 1) from exc
            x_prev = x_k
            U[k + 1], P[k + 1] = self.split(x)
            iters.append(info.iterations)
            lu = self.factorize(self.jacobian_new(U[k + 1], U[k]))
            if keep_factors:
                factors.append(lu)
        traj = Trajectory(U, P, self.cfg.dt, self.cfg.theta, self.mesh.hash, iters)
        return (traj, factors) if keep_factors else traj

    def state_vector(self, traj: Trajectory, k: int) -> np.ndarray:
        return np.concatenate([traj.U[k, self.free_u], traj.P[k]])


def step(problem: FlowProblem, prev: FlowState, g_next) -> FlowState:
    x, _ = problem.solve_step(prev.u, np.asarray(g_next, dtype=float))
    u, p = problem.split(x)
    return FlowState(u, p, prev.k + 1)


def solve_forward(problem: FlowProblem, m) -> Trajectory:
    """Solve for a control with attributes ``u0`` (full velocity vector) and ``g`` (K, ng)."""
    return problem.solve(m.u0, m.g)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"flow4dvar-data v1\n"


def write_container(path, header: dict, arrays: dict) -> None:
    """Deterministic binary container: magic, one JSON header line, raw float64 blocks."""
    meta = dict(header)
    meta["arrays"] = [[k, list(np.shape(v))] for k, v in arrays.items()]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_container(path):
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path}: not a flow4dvar data file")
        meta = json.loads(fh.readline())
        arrays = {}
        for name, shape in meta.pop("arrays"):
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated array {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return meta, arrays


def save_trajectory(traj: Trajectory, path) -> None:
    write_container(path, {"kind": "trajectory", "mesh_hash": traj.mesh_hash, "K": traj.K,
                           "dt": traj.dt, "theta": traj.theta}, {"U": traj.U, "P": traj.P})


def load_trajectory(path) -> Trajectory:
    meta, arr = read_container(path)
    if meta.get("kind") != "trajectory":
        raise ValueError(f"{path}: not a trajectory file")
    return Trajectory(arr["U"], arr["P"], meta["dt"], meta["theta"], meta["mesh_hash"])
