"""P1 function spaces and sparse assembly.

Vector fields use a blocked layout: DOF ``c * nv + i`` is component ``c``
at vertex ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import BOUNDARY_TAGS, Mesh

# Degree-4 rule on triangles (6 points), barycentric coordinates and weights
# normalised to sum to one.
_A1, _B1, _W1 = 0.445948490915965, 0.108103018168070, 0.223381589678011
_A2, _B2, _W2 = 0.091576213509771, 0.816847572980459, 0.109951743655322
TRI_BARY = np.array([
    [_B1, _A1, _A1], [_A1, _B1, _A1], [_A1, _A1, _B1],
    [_B2, _A2, _A2], [_A2, _B2, _A2], [_A2, _A2, _B2],
])
TRI_WEIGHTS = np.array([_W1] * 3 + [_W2] * 3)

# 3-point Gauss on [0, 1] (exact to degree 5)
_g = np.sqrt(3.0 / 5.0)
EDGE_POINTS = 0.5 * (1.0 + np.array([-_g, 0.0, _g]))
EDGE_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0


class ConfigurationError(ValueError):
    pass


def integrate(mesh: Mesh, f, cells=None) -> float:
    """Integrate ``f(x, y)`` over the mesh (or a subset of cells) with the degree-4 rule."""
    cells = np.arange(mesh.num_cells) if cells is None else np.asarray(cells)
    p = mesh.vertices[mesh.cells[cells]]
    xq = np.einsum("qa,cak->cqk", TRI_BARY, p)
    vals = f(xq[..., 0], xq[..., 1])
    return float(np.einsum("cq,q,c->", vals, TRI_WEIGHTS, mesh.areas[cells]))


@dataclass(frozen=True, eq=False)
class Space:
    mesh: Mesh
    arity: int = 1

    @property
    def dimension(self) -> int:
        return self.arity * self.mesh.num_vertices

    @cached_property
    def dof_map(self) -> np.ndarray:
        """Cell -> global DOFs, shape (nc, arity * 3) ordered component-major."""
        nv = self.mesh.num_vertices
        return np.concatenate([self.mesh.cells + c * nv for c in range(self.arity)], axis=1)

    def vertex_dofs(self, vertices) -> np.ndarray:
        nv = self.mesh.num_vertices
        vertices = np.asarray(vertices, dtype=np.int64)
        return np.concatenate([vertices + c * nv for c in range(self.arity)])

    def boundary_dofs(self, tag: str, exclude_walls: bool = True) -> np.ndarray:
        """Sorted DOFs on facets tagged ``tag``; wall vertices win at corners."""
        verts = self.mesh.boundary_vertices(tag)
        if exclude_walls and tag != "walls":
            verts = np.setdiff1d(verts, self.mesh.boundary_vertices("walls"))
        return np.sort(self.vertex_dofs(verts))

    def interpolate(self, func) -> np.ndarray:
        x, y = self.mesh.vertices.T
        vals = np.asarray(func(x, y), dtype=float)
        if self.arity == 1:
            return np.broadcast_to(vals, x.shape).astype(float).copy()
        return np.concatenate([np.broadcast_to(vals[c], x.shape) for c in range(self.arity)]).astype(float)


@dataclass
class Field:
    space: Space
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.dimension,):
            raise ValueError("coefficient length does not match the space dimension")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("non-finite coefficients")


def _csr(rows, cols, vals, shape) -> sp.csr_matrix:
    A = sp.coo_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape).tocsr()
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def _cells(mesh, cells):
    return np.arange(mesh.num_cells) if cells is None else np.asarray(cells, dtype=np.int64)


_MASS_REF = (np.ones((3, 3)) + np.eye(3)) / 12.0


def _scalar_local(space, local, cells):
    """Assemble per-cell 3x3 scalar blocks into every component of ``space``."""
    mesh = space.mesh
    c = mesh.cells[cells]
    nv = mesh.num_vertices
    rows, cols, vals = [], [], []
    for comp in range(space.arity):
        rows.append(np.repeat(c + comp * nv, 3, axis=1))
        cols.append(np.tile(c + comp * nv, (1, 3)))
        vals.append(local.reshape(len(cells), 9))
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                (space.dimension, space.dimension))


def assemble_mass(space: Space, cells=None) -> sp.csr_matrix:
    """Consistent mass matrix, optionally restricted to a subset of cells."""
    cells = _cells(space.mesh, cells)
    local = space.mesh.areas[cells, None, None] * _MASS_REF[None]
    return _scalar_local(space, local, cells)


def assemble_stiffness(space: Space, coefficient: float = 1.0, cells=None) -> sp.csr_matrix:
    if coefficient < 0:
        raise ConfigurationError("stiffness coefficient must be non-negative")
    cells = _cells(space.mesh, cells)
    g = space.mesh.grad_basis[cells]
    local = coefficient * space.mesh.areas[cells, None, None] * np.einsum("cik,cjk->cij", g, g)
    return _scalar_local(space, local, cells)


def _vector_rows_cols(mesh, cells, ci, cj):
    nv = mesh.num_vertices
    c = mesh.cells[cells]
    return np.repeat(c + ci * nv, 3, axis=1), np.tile(c + cj * nv, (1, 3))


def _qp_values(mesh, w, cells):
    """P1 vector field ``w`` (blocked) at the quadrature points, shape (nc, nq, 2)."""
    nv = mesh.num_vertices
    c = mesh.cells[cells]
    wv = np.stack([w[:nv][c], w[nv:][c]], axis=2)  # (nc, 3, 2)
    return np.einsum("qa,cak->cqk", TRI_BARY, wv)


def assemble_convection(space: Space, advecting, cells=None) -> sp.csr_matrix:
    """C(w) with ``v . C(w) u = int (w . grad) u . v``."""
    mesh = space.mesh
    cells = _cells(mesh, cells)
    w = advecting.coefficients if isinstance(advecting, Field) else np.asarray(advecting)
    wq = _qp_values(mesh, w, cells)
    g = mesh.grad_basis[cells]  # (nc, 3, 2)
    # local[c, i, j] = sum_q wt_q A phi_i(q) (w(q) . grad phi_j)
    local = np.einsum("q,c,qi,cqk,cjk->cij", TRI_WEIGHTS, mesh.areas[cells], TRI_BARY, wq, g)
    rows, cols, vals = [], [], []
    for comp in range(2):
        r, cc = _vector_rows_cols(mesh, cells, comp, comp)
        rows.append(r)
        cols.append(cc)
        vals.append(local.reshape(len(cells), 9))
    n = space.dimension
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n, n))


def assemble_convection_derivative(space: Space, advected, cells=None) -> sp.csr_matrix:
    """D(u) with ``v . D(u) w = int (w . grad) u . v`` (derivative w.r.t. the advecting field)."""
    mesh = space.mesh
    cells = _cells(mesh, cells)
    u = advected.coefficients if isinstance(advected, Field) else np.asarray(advected)
    nv = mesh.num_vertices
    c = mesh.cells[cells]
    g = mesh.grad_basis[cells]
    # grad u per cell: du[c, comp, dir]
    du = np.stack([np.einsum("cj,cjk->ck", u[comp * nv:(comp + 1) * nv][c], g) for comp in range(2)], axis=1)
    mloc = mesh.areas[cells, None, None] * _MASS_REF[None]
    rows, cols, vals = [], [], []
    for ci in range(2):
        for cj in range(2):
            r, cc = _vector_rows_cols(mesh, cells, ci, cj)
            rows.append(r)
            cols.append(cc)
            vals.append((du[:, ci, cj, None, None] * mloc).reshape(len(cells), 9))
    n = space.dimension
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n, n))


def assemble_divergence(velocity_space: Space, pressure_space: Space) -> sp.csr_matrix:
    """B with ``q . B u = int q div u`` (shape npressure x nvelocity)."""
    mesh = velocity_space.mesh
    cells = np.arange(mesh.num_cells)
    g = mesh.grad_basis
    nv = mesh.num_vertices
    c = mesh.cells
    # int phi_i d phi_j/dx_k = A/3 * grad_jk
    rows, cols, vals = [], [], []
    for comp in range(2):
        local = (mesh.areas / 3.0)[:, None, None] * np.broadcast_to(g[:, None, :, comp], (len(cells), 3, 3))
        rows.append(np.repeat(c, 3, axis=1))
        cols.append(np.tile(c + comp * nv, (1, 3)))
        vals.append(local.reshape(len(cells), 9))
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                (pressure_space.dimension, velocity_space.dimension))


def assemble_pressure_stabilization(pressure_space: Space, beta: float) -> sp.csr_matrix:
    """``-beta sum_T h_T^2 int_T grad p . grad q`` (negative semidefinite)."""
    if beta <= 0:
        raise ConfigurationError("stabilisation coefficient must be positive")
    mesh = pressure_space.mesh
    g = mesh.grad_basis
    local = -beta * (mesh.cell_diameters ** 2 * mesh.areas)[:, None, None] * np.einsum("cik,cjk->cij", g, g)
    return _scalar_local(pressure_space, local, np.arange(mesh.num_cells))


# ---------------------------------------------------------------------------
# boundary forms
# ---------------------------------------------------------------------------

def _facet_data(mesh: Mesh, facets):
    facets = np.asarray(facets, dtype=np.int64)
    fv = mesh.facet_vertices[facets]
    owner = mesh.facet_cells[facets]
    return facets, fv, owner


def _edge_basis():
    # values of the two edge P1 basis functions at the Gauss points, (nq, 2)
    return np.stack([1.0 - EDGE_POINTS, EDGE_POINTS], axis=1)


def assemble_boundary_mass(space: Space, facets, weight=None) -> sp.csr_matrix:
    """``int_facets weight u . v ds`` with piecewise-constant ``weight`` per facet."""
    mesh = space.mesh
    facets, fv, _ = _facet_data(mesh, facets)
    L = mesh.facet_lengths[facets]
    wgt = np.ones(len(facets)) if weight is None else np.asarray(weight, dtype=float)
    phi = _edge_basis()
    local = np.einsum("q,qi,qj->ij", EDGE_WEIGHTS, phi, phi)[None] * (wgt * L)[:, None, None]
    nv = mesh.num_vertices
    rows, cols, vals = [], [], []
    for comp in range(space.arity):
        rows.append(np.repeat(fv + comp * nv, 2, axis=1))
        cols.append(np.tile(fv + comp * nv, (1, 2)))
        vals.append(local.reshape(len(facets), 4))
    n = space.dimension
    if not rows:
        return sp.csr_matrix((n, n))
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n, n))


def assemble_boundary_stiffness(space: Space, facets) -> sp.csr_matrix:
    """Tangential-derivative form ``int_facets d_t u . d_t v ds``."""
    mesh = space.mesh
    facets, fv, _ = _facet_data(mesh, facets)
    L = mesh.facet_lengths[facets]
    local = np.array([[1.0, -1.0], [-1.0, 1.0]])[None] / L[:, None, None]
    nv = mesh.num_vertices
    rows, cols, vals = [], [], []
    for comp in range(space.arity):
        rows.append(np.repeat(fv + comp * nv, 2, axis=1))
        cols.append(np.tile(fv + comp * nv, (1, 2)))
        vals.append(local.reshape(len(facets), 4))
    n = space.dimension
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n, n))


def assemble_normal_derivative(space: Space, facets) -> sp.csr_matrix:
    """E with ``v . E u = int_facets (du/dn) . v ds``."""
    mesh = space.mesh
    facets, fv, owner = _facet_data(mesh, facets)
    L = mesh.facet_lengths[facets]
    n = mesh.facet_normals[facets]
    gn = np.einsum("cjk,ck->cj", mesh.grad_basis[owner], n)  # (nf, 3) normal derivative of cell basis
    phi_int = np.einsum("q,qi->i", EDGE_WEIGHTS, _edge_basis())  # = [1/2, 1/2]
    local = (L[:, None, None] * phi_int[None, :, None]) * gn[:, None, :]  # (nf, 2, 3)
    cellv = mesh.cells[owner]
    nv = mesh.num_vertices
    rows, cols, vals = [], [], []
    for comp in range(space.arity):
        rows.append(np.repeat(fv + comp * nv, 3, axis=1))
        cols.append(np.tile(cellv + comp * nv, (1, 2)))
        vals.append(local.reshape(len(facets), 6))
    N = space.dimension
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (N, N))


def assemble_normal_pressure(velocity_space: Space, pressure_space: Space, facets) -> sp.csr_matrix:
    """G with ``v . G p = int_facets p n . v ds`` (shape nvelocity x npressure)."""
    mesh = velocity_space.mesh
    facets, fv, _ = _facet_data(mesh, facets)
    L = mesh.facet_lengths[facets]
    n = mesh.facet_normals[facets]
    phi = _edge_basis()
    mloc = np.einsum("q,qi,qj->ij", EDGE_WEIGHTS, phi, phi)[None] * L[:, None, None]
    nv = mesh.num_vertices
    rows, cols, vals = [], [], []
    for comp in range(2):
        rows.append(np.repeat(fv + comp * nv, 2, axis=1))
        cols.append(np.tile(fv, (1, 2)))
        vals.append((mloc * n[:, comp, None, None]).reshape(len(facets), 4))
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                (velocity_space.dimension, pressure_space.dimension))


@dataclass(frozen=True, eq=False)
class NitscheBlocks:
    """Pieces of the Nitsche boundary form on the controlled boundary.

    With ``E``, ``G``, ``P`` as built by :func:`assemble_nitsche_blocks` the
    boundary residual tested with ``(v, q)`` is

        v-rows:  vv_new u1 + vv_old u0 + pv p1 + gv g1
        q-rows:  qv u1 + gq g1
    """

    E: sp.csr_matrix  # int du/dn . v
    G: sp.csr_matrix  # int p n . v
    P: sp.csr_matrix  # int nu sigma / h u . v
    nu: float
    theta: float

    @cached_property
    def vv_new(self):
        t, nu = self.theta, self.nu
        return (-t * nu * self.E - t * nu * self.E.T + self.P).tocsr()

    @cached_property
    def vv_old(self):
        return (-(1.0 - self.theta) * self.nu * self.E).tocsr()

    @property
    def pv(self):
        return self.G

    @cached_property
    def qv(self):
        return self.G.T.tocsr()

    @cached_property
    def gv(self):
        return (self.theta * self.nu * self.E.T - self.P).tocsr()

    @cached_property
    def gq(self):
        return (-self.G.T).tocsr()


def assemble_nitsche_blocks(velocity_space: Space, pressure_space: Space, tags, nu: float,
                            sigma: float, theta: float) -> NitscheBlocks:
    if sigma <= 0:
        raise ConfigurationError("Nitsche coefficient must be positive")
    if theta <= 0:
        raise ConfigurationError("theta must be positive for the Nitsche method")
    for t in tags:
        if t not in BOUNDARY_TAGS or t == "walls":
            raise ConfigurationError(f"invalid Dirichlet tag {t!r}")
    mesh = velocity_space.mesh
    facets = mesh.facets_with(*tags)
    E = assemble_normal_derivative(velocity_space, facets)
    G = assemble_normal_pressure(velocity_space, pressure_space, facets)
    P = assemble_boundary_mass(velocity_space, facets, weight=nu * sigma / mesh.facet_h[facets])
    return NitscheBlocks(E, G, P, nu, theta)
