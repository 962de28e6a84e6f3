"""Observation operators, misfit, adjoint sources and noise.

Both operators are written as a weight matrix ``Wt`` of shape (N, K+1) over
the timesteps, ``T_n u = Σ_k Wt[n, k] R u^k`` with ``R`` the restriction to
Ω_obs vertices.  The instantaneous operator has one unit weight per row; the
averaged one spreads ``δt / |interval|`` over the steps in ``(t_{n-1}, t_n]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import Mesh

HEADER = "flow4dvar-obs v1"
KINDS = ("instantaneous", "averaged")


class AlignmentError(ValueError):
    pass


class ObservationFormatError(ValueError):
    def __init__(self, msg, lineno=None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {msg}" if lineno else msg)


def grid_steps(times, dt: float) -> np.ndarray:
    """Step indices of times that lie on the grid ``k δt`` (within 1e-9 δt)."""
    times = np.asarray(times, dtype=float)
    k = np.floor(times / dt + 0.5)
    off = np.abs(times - k * dt)
    if np.any(off > 1e-9 * dt):
        bad = times[np.argmax(off)]
        raise AlignmentError(f"observation time {bad!r} is not on the step grid (dt={dt!r})")
    return k.astype(np.int64)


def even_times(T: float, dt: float, N: int, kind: str = "instantaneous") -> np.ndarray:
    """N evenly distributed observation times (or N+1 interval endpoints) snapped to the grid."""
    if N < 1:
        raise ValueError("N must be positive")
    K = int(round(T / dt))
    start = 1 if kind == "instantaneous" else 0
    steps = np.floor(np.arange(start, N + 1) * K / N + 0.5).astype(np.int64)
    if np.any(np.diff(steps) <= 0):
        raise AlignmentError(f"{N} observations do not fit on a grid of {K} steps")
    return steps * dt


@dataclass(eq=False)
class ObservationSet:
    kind: str
    times: np.ndarray  # t_1..t_N, or endpoints t_0..t_N when averaged
    data: np.ndarray  # (N, 2 nobs): x components of all vertices, then y
    vertices: np.ndarray  # observed mesh vertices (sorted)
    dt: float
    mesh_hash: str = ""
    quadrature: str = "rectangle"  # averaged only; "trapezoid" is the alternative
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown observation kind {self.kind!r}")
        self.times = np.asarray(self.times, dtype=float)
        self.data = np.asarray(self.data, dtype=float)
        self.vertices = np.asarray(self.vertices, dtype=np.int64)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if self.data.shape != (self.N, 2 * len(self.vertices)):
            raise ValueError(f"data shape {self.data.shape} does not match N={self.N} and "
                             f"{len(self.vertices)} vertices")
        grid_steps(self.times, self.dt)

    @property
    def N(self) -> int:
        return len(self.times) - (1 if self.kind == "averaged" else 0)

    @property
    def steps(self) -> np.ndarray:
        return grid_steps(self.times, self.dt)

    def weights(self, K: int) -> np.ndarray:
        return time_weights(self.kind, self.steps, K, self.quadrature)

    def with_data(self, data, **meta) -> "ObservationSet":
        return replace(self, data=np.array(data, dtype=float), meta={**self.meta, **meta})


def time_weights(kind: str, steps, K: int, quadrature: str = "rectangle") -> np.ndarray:
    steps = np.asarray(steps)
    if steps.min() < 0 or steps.max() > K:
        raise AlignmentError(f"observation steps outside 0..{K}")
    if kind == "instantaneous":
        Wt = np.zeros((len(steps), K + 1))
        Wt[np.arange(len(steps)), steps] = 1.0
        return Wt
    Wt = np.zeros((len(steps) - 1, K + 1))
    for n, (a, b) in enumerate(zip(steps[:-1], steps[1:])):
        if b <= a:
            raise ValueError(f"empty averaging interval ({a}, {b}]")
        if quadrature == "rectangle":
            Wt[n, a + 1:b + 1] = 1.0 / (b - a)
        elif quadrature == "trapezoid":
            Wt[n, a:b + 1] = 1.0 / (b - a)
            Wt[n, a] *= 0.5
            Wt[n, b] *= 0.5
        else:
            raise ValueError(f"unknown quadrature {quadrature!r}")
    return Wt


def observed_vertices(mesh: Mesh) -> np.ndarray:
    return np.unique(mesh.cells[mesh.obs_cells])


class Observer:
    """Restriction and mass form on Ω_obs for one mesh."""

    def __init__(self, mesh: Mesh, vertices=None):
        self.mesh = mesh
        self.V = fem.Space(mesh, 2)
        self.vertices = observed_vertices(mesh) if vertices is None else np.asarray(vertices, dtype=np.int64)
        if len(self.vertices) == 0:
            raise ValueError("mesh has no observation region")
        self.dofs = self.V.vertex_dofs(self.vertices)

    @cached_property
    def M_obs(self) -> sp.csr_matrix:
        M = fem.assemble_mass(self.V, cells=self.mesh.obs_cells).tocsr()
        return M[self.dofs][:, self.dofs].tocsr()

    def restrict(self, u) -> np.ndarray:
        return np.asarray(u)[..., self.dofs]

    def apply(self, traj, kind: str, times, quadrature: str = "rectangle") -> np.ndarray:
        steps = grid_steps(times, traj.dt)
        Wt = time_weights(kind, steps, traj.K, quadrature)
        return Wt @ self.restrict(traj.U)

    def observe(self, traj, kind: str, times, quadrature: str = "rectangle") -> ObservationSet:
        data = self.apply(traj, kind, times, quadrature)
        return ObservationSet(kind, times, data, self.vertices, traj.dt, self.mesh.hash, quadrature)

    def check(self, obs: ObservationSet):
        if obs.mesh_hash and obs.mesh_hash != self.mesh.hash:
            raise ValueError(f"observations belong to mesh {obs.mesh_hash}, not {self.mesh.hash}")
        if not np.array_equal(obs.vertices, self.vertices):
            raise ValueError("observation vertices differ from the mesh's observation region")

    def errors(self, traj, obs: ObservationSet) -> np.ndarray:
        if abs(traj.dt - obs.dt) > 1e-12 * obs.dt:
            raise AlignmentError("trajectory and observations use different timesteps")
        return obs.weights(traj.K) @ self.restrict(traj.U) - obs.data

    def misfit(self, traj, obs: ObservationSet) -> float:
        e = self.errors(traj, obs)
        return float(np.sum(e * (self.M_obs @ e.T).T))

    def sources(self, traj, obs: ObservationSet) -> np.ndarray:
        """∂J/∂u^k as full velocity vectors, shape (K+1, 2 nv)."""
        e = self.errors(traj, obs)
        Me = 2.0 * (self.M_obs @ e.T).T  # (N, nd)
        out = np.zeros((traj.K + 1, self.V.dimension))
        out[:, self.dofs] = obs.weights(traj.K).T @ Me
        return out

    def energy(self, data) -> float:
        d = np.atleast_2d(data)
        return float(np.sum(d * (self.M_obs @ d.T).T))


def observe_instantaneous(traj, mesh: Mesh, times) -> np.ndarray:
    return Observer(mesh).apply(traj, "instantaneous", times)


def observe_averaged(traj, mesh: Mesh, endpoints, quadrature: str = "rectangle") -> np.ndarray:
    return Observer(mesh).apply(traj, "averaged", endpoints, quadrature)


def misfit(traj, obs: ObservationSet, mesh: Mesh) -> float:
    return Observer(mesh, obs.vertices).misfit(traj, obs)


def misfit_state_sources(traj, obs: ObservationSet, mesh: Mesh) -> np.ndarray:
    return Observer(mesh, obs.vertices).sources(traj, obs)


def add_noise(obs: ObservationSet, target_snr: float, seed: int, observer: Observer) -> ObservationSet:
    """Gaussian noise scaled so that ‖Tu‖² / ‖Tu - d‖² equals ``target_snr`` exactly.

    The norms are the L²(Ω_obs) norms summed over observations, the same
    form as the misfit.
    """
    if math.isinf(target_snr):
        return obs.with_data(obs.data, snr="inf", seed=str(int(seed)))
    if not target_snr > 0:
        raise ValueError("target SNR must be positive")
    signal = observer.energy(obs.data)
    if signal <= 0:
        raise ValueError("cannot add noise at finite SNR to zero-signal observations")
    rng = np.random.default_rng(int(seed))
    noise = rng.standard_normal(obs.data.shape)
    scale = math.sqrt(signal / (target_snr * observer.energy(noise)))
    return obs.with_data(obs.data + scale * noise, snr=repr(float(target_snr)), seed=str(int(seed)))


def realised_snr(clean, noisy, observer: Observer) -> float:
    return observer.energy(clean) / observer.energy(np.asarray(noisy) - np.asarray(clean))


# -- file format ----------------------------------------------------------------

def format_observations(obs: ObservationSet) -> str:
    nobs = len(obs.vertices)
    lines = [HEADER, f"mesh {obs.mesh_hash or '-'}", f"kind {obs.kind}", f"N {obs.N}",
             f"dt {float(obs.dt)!r}", f"quadrature {obs.quadrature}"]
    for key in sorted(obs.meta):
        lines.append(f"meta {key} {obs.meta[key]}")
    for n in range(obs.N):
        if obs.kind == "instantaneous":
            when = f"time {float(obs.times[n])!r}"
        else:
            when = f"interval {float(obs.times[n])!r} {float(obs.times[n + 1])!r}"
        lines.append(f"observation {n + 1} {when} vertices {nobs}")
        vx, vy = obs.data[n, :nobs], obs.data[n, nobs:]
        lines.extend(f"{v} {a!r} {b!r}" for v, a, b in zip(obs.vertices, vx.tolist(), vy.tolist()))
    return "\n".join(lines) + "\n"


def save_observations(obs: ObservationSet, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_observations(obs))


def parse_observations(text: str) -> ObservationSet:
    rows = text.splitlines()
    pos = 0

    def take(prefix):
        nonlocal pos
        if pos >= len(rows):
            raise ObservationFormatError(f"unexpected end of file, expected '{prefix}'", pos + 1)
        parts = rows[pos].split()
        if not parts or parts[0] != prefix:
            raise ObservationFormatError(f"expected '{prefix}'", pos + 1)
        pos += 1
        return parts[1:]

    if not rows or rows[0].strip() != HEADER:
        raise ObservationFormatError(f"missing header '{HEADER}'", 1)
    pos = 1
    try:
        mesh_hash = take("mesh")[0]
        kind = take("kind")[0]
        N = int(take("N")[0])
        dt = float(take("dt")[0])
        quadrature = take("quadrature")[0]
        meta = {}
        while pos < len(rows) and rows[pos].startswith("meta "):
            _, key, val = rows[pos].split(maxsplit=2)
            meta[key] = val
            pos += 1
        times, data, verts = [], [], None
        for n in range(N):
            lineno = pos + 1
            parts = take("observation")
            if kind == "instantaneous" and parts[1] == "time":
                times.append(float(parts[2]))
            elif kind == "averaged" and parts[1] == "interval":
                if not times:
                    times.append(float(parts[2]))
                elif float(parts[2]) != times[-1]:
                    raise ObservationFormatError("averaging intervals are not contiguous", lineno)
                times.append(float(parts[3]))
            else:
                raise ObservationFormatError("observation line does not match the kind", lineno)
            count = int(parts[-1])
            block = rows[pos:pos + count]
            if len(block) != count:
                raise ObservationFormatError("truncated observation block", pos + 1)
            arr = np.array([r.split() for r in block], dtype=float)
            if arr.shape != (count, 3):
                raise ObservationFormatError("expected 'vertex vx vy' lines", pos + 1)
            v = arr[:, 0].astype(np.int64)
            if verts is None:
                verts = v
            elif not np.array_equal(v, verts):
                raise ObservationFormatError("vertex list changes between observations", pos + 1)
            data.append(np.concatenate([arr[:, 1], arr[:, 2]]))
            pos += count
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ObservationFormatError):
            raise
        raise ObservationFormatError(str(exc), pos + 1) from exc
    return ObservationSet(kind, np.array(times), np.array(data), verts, dt,
                          "" if mesh_hash == "-" else mesh_hash, quadrature, meta)


def load_observations(path) -> ObservationSet:
    with open(path) as fh:
        return parse_observations(fh.read())
