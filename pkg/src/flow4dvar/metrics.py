"""Error measures and wall shear stress.

All PDE quantities are in mm and s, so ``ρ ν ∂u/∂n`` with ρ in kg/m³ comes
out in kg/m³·mm²/s²; the factor 1e-6 converts that to Pa.
"""
from __future__ import annotations

import io
import math

import numpy as np

from . import fem
from .forward import Trajectory
from .mesh import Mesh

RHO_BLOOD = 1060.0
TO_PA = 1e-6


def wss(mesh: Mesh, traj: Trajectory, facets=None, nu: float = 3.5, rho: float = RHO_BLOOD,
        to_pa: bool = True) -> np.ndarray:
    """|σn - (σn·n)n| per step and facet, shape (K+1, nf).

    σ = ρ(-pI + ν(∇u + ∇uᵀ)) with the owning cell's constant gradient and the
    facet-averaged pressure.
    """
    facets = mesh.ane_wall_facets if facets is None else np.asarray(facets, dtype=np.int64)
    nv = mesh.num_vertices
    cells = mesh.facet_cells[facets]
    gb = mesh.grad_basis[cells]  # (nf, 3, 2)
    verts = mesh.cells[cells]  # (nf, 3)
    n = mesh.facet_normals[facets]  # (nf, 2)
    fv = mesh.facet_vertices[facets]
    ux = traj.U[:, :nv][:, verts]  # (K+1, nf, 3)
    uy = traj.U[:, nv:][:, verts]
    G = np.stack([np.einsum("kfa,faj->kfj", ux, gb), np.einsum("kfa,faj->kfj", uy, gb)], axis=2)  # (K+1,nf,i,j)
    p = 0.5 * (traj.P[:, fv[:, 0]] + traj.P[:, fv[:, 1]])
    sym = G + np.swapaxes(G, 2, 3)
    sigma = rho * (nu * sym - p[..., None, None] * np.eye(2))
    t = np.einsum("kfij,fj->kfi", sigma, n)
    tn = np.einsum("kfi,fi->kf", t, n)
    tang = t - tn[..., None] * n[None]
    out = np.linalg.norm(tang, axis=2)
    return out * TO_PA if to_pa else out


def _mass(mesh: Mesh, cells):
    return fem.assemble_mass(fem.Space(mesh, 2), cells=cells)


def _check_grids(traj: Trajectory, truth: Trajectory):
    if traj.U.shape != truth.U.shape or abs(traj.dt - truth.dt) > 1e-12 * truth.dt:
        raise ValueError("trajectory and truth live on different grids")


def velocity_error(mesh: Mesh, traj: Trajectory, truth: Trajectory, cells=None) -> float:
    """Relative L²(Ω_ane × (0, T]) error, rectangle rule over k = 1..K."""
    _check_grids(traj, truth)
    cells = mesh.ane_cells if cells is None else cells
    M = _mass(mesh, cells)
    E = traj.U[1:] - truth.U[1:]
    num = np.sum(E * (M @ E.T).T)
    den = np.sum(truth.U[1:] * (M @ truth.U[1:].T).T)
    if den <= 0:
        raise ValueError("true velocity vanishes on the region")
    return math.sqrt(num / den)


def wss_error(mesh: Mesh, traj: Trajectory, truth: Trajectory, facets=None, nu: float = 3.5) -> float:
    _check_grids(traj, truth)
    facets = mesh.ane_wall_facets if facets is None else facets
    L = mesh.facet_lengths[facets]
    w = wss(mesh, traj, facets, nu)[1:]
    wt = wss(mesh, truth, facets, nu)[1:]
    den = np.sum(L * wt ** 2)
    if den <= 0:
        raise ValueError("true wall shear stress vanishes on the region")
    return math.sqrt(np.sum(L * (w - wt) ** 2) / den)


def mean_velocity_error(mesh: Mesh, traj: Trajectory, truth: Trajectory, cells=None) -> float:
    """Relative L²(Ω_ane) error of the time-averaged velocity (our reading of ℰ_ua)."""
    _check_grids(traj, truth)
    cells = mesh.ane_cells if cells is None else cells
    M = _mass(mesh, cells)
    e = traj.U[1:].mean(axis=0) - truth.U[1:].mean(axis=0)
    t = truth.U[1:].mean(axis=0)
    den = t @ (M @ t)
    if den <= 0:
        raise ValueError("mean true velocity vanishes on the region")
    return math.sqrt((e @ (M @ e)) / den)


def timeseries(mesh: Mesh, traj: Trajectory, truth: Trajectory, nu: float = 3.5) -> np.ndarray:
    """Columns t, ‖u‖, ‖u_true‖ on Ω_ane and ‖WSS‖, ‖WSS_true‖ on Γ_ane."""
    _check_grids(traj, truth)
    M = _mass(mesh, mesh.ane_cells)
    facets = mesh.ane_wall_facets
    L = mesh.facet_lengths[facets]

    def unorm(U):
        return np.sqrt(np.maximum(np.sum(U * (M @ U.T).T, axis=1), 0.0))

    w, wt = wss(mesh, traj, facets, nu), wss(mesh, truth, facets, nu)
    return np.column_stack([truth.times, unorm(traj.U), unorm(truth.U),
                            np.sqrt(w ** 2 @ L), np.sqrt(wt ** 2 @ L)])


def timeseries_csv(table: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("t,u_norm_ane,u_norm_ane_true,wss_norm,wss_norm_true\n")
    for row in table:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def report(mesh: Mesh, traj: Trajectory, truth: Trajectory, nu: float = 3.5) -> dict:
    return {
        "E_ane": velocity_error(mesh, traj, truth),
        "E_wss": wss_error(mesh, traj, truth, nu=nu),
        "E_ua": mean_velocity_error(mesh, traj, truth),
    }


def format_report(values: dict) -> str:
    lines = ["# reconstruction errors (relative, unit free); WSS evaluated in Pa with rho = 1060 kg/m^3",
             "# E_ua is the relative error of the time-averaged velocity on the aneurysm"]
    lines += [f"{k} = {float(v)!r}" for k, v in values.items()]
    return "\n".join(lines) + "\n"
