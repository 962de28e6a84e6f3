"""Twin experiments: synthetic truth on the extended domain and its transfer."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .forward import FlowProblem, ModelConfig, Trajectory
from .mesh import Mesh


def pulse(t):
    return np.sin(np.pi * (1.0 - np.asarray(t, dtype=float)) ** 3)


def parabolic_profile(mesh: Mesh, tag: str, peak: float, inflow: bool) -> np.ndarray:
    """Full velocity vector with a parabolic normal profile on the facets ``tag``.

    The profile is ``4 s (1-s) peak`` in the chord coordinate ``s`` of the
    (straight) boundary piece, directed along the mean outward normal,
    reversed for inflow.
    """
    facets = mesh.facets_with(tag)
    if len(facets) == 0:
        raise ValueError(f"mesh has no facets tagged {tag!r}")
    verts = np.unique(mesh.facet_vertices[facets])
    n = mesh.facet_normals[facets].mean(axis=0)
    n /= np.linalg.norm(n)
    tangent = np.array([-n[1], n[0]])
    s = mesh.vertices[verts] @ tangent
    s = (s - s.min()) / (s.max() - s.min())
    val = (-1.0 if inflow else 1.0) * 4.0 * s * (1.0 - s) * peak
    nv = mesh.num_vertices
    u = np.zeros(2 * nv)
    u[verts] = val * n[0]
    u[verts + nv] = val * n[1]
    return u


@dataclass(frozen=True)
class TruthConfig:
    inlet_peak: float = 1000.0
    outlet_peak: float = 870.0
    outlet: str = "out2"  # Dirichlet outlet during data generation


def truth_boundary_data(problem: FlowProblem, tc: TruthConfig) -> np.ndarray:
    mesh = problem.mesh
    profile = parabolic_profile(mesh, "inlet", tc.inlet_peak, True)
    profile += parabolic_profile(mesh, problem.cfg.outlet, tc.outlet_peak, False)
    times = problem.cfg.times[1:]
    return pulse(times)[:, None] * profile[problem.g_dofs][None, :]


def generate_truth(mesh: Mesh, cfg: ModelConfig, tc: TruthConfig = TruthConfig()) -> Trajectory:
    """Forward run from rest with pulsed parabolic inlet/outlet profiles."""
    problem = FlowProblem(mesh, replace(cfg, outlet=tc.outlet))
    G = truth_boundary_data(problem, tc)
    return problem.solve(np.zeros(2 * mesh.num_vertices), G)


def vertex_map(src: Mesh, dst: Mesh, tol: float = 1e-9) -> np.ndarray:
    """Index of each ``dst`` vertex among the ``src`` vertices (coordinates must match)."""
    dist, idx = cKDTree(src.vertices).query(dst.vertices)
    scale = max(1.0, float(np.abs(src.vertices).max()))
    if np.any(dist > tol * scale):
        raise ValueError("destination vertices are not a subset of the source vertices")
    return idx


def transfer(traj: Trajectory, src: Mesh, dst: Mesh) -> Trajectory:
    """Nodal P1 interpolation onto a mesh whose vertices are a subset of ``src``."""
    idx = vertex_map(src, dst)
    ns = src.num_vertices
    U = np.concatenate([traj.U[:, idx], traj.U[:, idx + ns]], axis=1)
    return Trajectory(U, traj.P[:, idx].copy(), traj.dt, traj.theta, dst.hash)
