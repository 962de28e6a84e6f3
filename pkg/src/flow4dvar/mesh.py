"""Triangular meshes with tagged boundaries and regions.

Lengths are in mm.  Boundary facets carry one of ``inlet``, ``out1``,
``out2`` or ``walls``; cells carry one of ``interior``, ``obs``, ``ane``
(aneurysm, implies observed) or ``ext`` (extension used only for data
generation).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

BOUNDARY_TAGS = ("inlet", "out1", "out2", "walls")
REGION_TAGS = ("interior", "obs", "ane", "ext")
INTERIOR, OBS, ANE, EXT = range(4)

HEADER = "flow4dvar-mesh v1"


class MeshError(ValueError):
    """Raised for malformed or invalid meshes."""


class MeshParseError(MeshError):
    def __init__(self, msg, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            msg = f"line {lineno}: {msg}"
        super().__init__(msg)


class GeometryError(MeshError):
    """Raised when a bifurcation outline cannot be meshed."""


@dataclass(frozen=True)
class FacetGeometry:
    normal: np.ndarray
    length: float
    h: float


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (nv, 2)
    cells: np.ndarray  # (nc, 3), counter-clockwise
    facet_vertices: np.ndarray  # (nf, 2) boundary edges
    facet_tags: np.ndarray  # (nf,) index into BOUNDARY_TAGS
    cell_regions: np.ndarray = field(default=None)  # (nc,) index into REGION_TAGS

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=float))
        object.__setattr__(self, "cells", np.ascontiguousarray(self.cells, dtype=np.int64))
        fv = np.asarray(self.facet_vertices, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "facet_vertices", fv)
        object.__setattr__(self, "facet_tags", np.asarray(self.facet_tags, dtype=np.int64))
        if self.cell_regions is None:
            regions = np.zeros(len(self.cells), dtype=np.int64)
        else:
            regions = np.asarray(self.cell_regions, dtype=np.int64)
        object.__setattr__(self, "cell_regions", regions)
        for arr in (self.vertices, self.cells, self.facet_vertices, self.facet_tags, self.cell_regions):
            arr.setflags(write=False)
        self.validate()

    # -- basic sizes -------------------------------------------------------
    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def num_facets(self) -> int:
        return len(self.facet_vertices)

    # -- geometry -----------------------------------------------------------
    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def cell_diameters(self) -> np.ndarray:
        p = self.vertices[self.cells]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.linalg.norm(e, axis=2).max(axis=1)

    @cached_property
    def grad_basis(self) -> np.ndarray:
        """Constant gradients of the three P1 basis functions, shape (nc, 3, 2)."""
        p = self.vertices[self.cells]
        x, y = p[..., 0], p[..., 1]
        two_a = 2.0 * self.signed_areas
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        return np.stack([gx, gy], axis=2) / two_a[:, None, None]

    @cached_property
    def facet_cells(self) -> np.ndarray:
        owners = self._edge_owners()
        return np.array([owners[tuple(sorted(e))][0] for e in self.facet_vertices.tolist()],
                        dtype=np.int64)

    @cached_property
    def facet_lengths(self) -> np.ndarray:
        p = self.vertices[self.facet_vertices]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    @cached_property
    def facet_normals(self) -> np.ndarray:
        """Outward unit normals of the boundary facets."""
        p = self.vertices[self.facet_vertices]
        t = p[:, 1] - p[:, 0]
        n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        n /= np.linalg.norm(n, axis=1)[:, None]
        # flip towards the outside: away from the owning cell's opposite vertex
        centroid = self.vertices[self.cells[self.facet_cells]].mean(axis=1)
        mid = p.mean(axis=1)
        flip = np.einsum("ij,ij->i", n, mid - centroid) < 0
        n[flip] *= -1.0
        return n

    @cached_property
    def facet_h(self) -> np.ndarray:
        return self.cell_diameters[self.facet_cells]

    def facet_geometry(self, facet: int) -> FacetGeometry:
        if not 0 <= facet < self.num_facets:
            raise IndexError(f"facet index {facet} out of range [0, {self.num_facets})")
        return FacetGeometry(self.facet_normals[facet].copy(), float(self.facet_lengths[facet]),
                             float(self.facet_h[facet]))

    # -- tags ---------------------------------------------------------------
    def facets_with(self, *tags: str) -> np.ndarray:
        codes = [BOUNDARY_TAGS.index(t) for t in tags]
        return np.flatnonzero(np.isin(self.facet_tags, codes))

    def boundary_vertices(self, *tags: str) -> np.ndarray:
        return np.unique(self.facet_vertices[self.facets_with(*tags)])

    @property
    def obs_cells(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.cell_regions, (OBS, ANE)))

    @property
    def ane_cells(self) -> np.ndarray:
        return np.flatnonzero(self.cell_regions == ANE)

    @property
    def ext_cells(self) -> np.ndarray:
        return np.flatnonzero(self.cell_regions == EXT)

    @cached_property
    def ane_wall_facets(self) -> np.ndarray:
        """Wall facets bounding the aneurysm sac."""
        walls = self.facets_with("walls")
        return walls[self.cell_regions[self.facet_cells[walls]] == ANE]

    def region_area(self, *codes: int) -> float:
        return float(self.areas[np.isin(self.cell_regions, codes)].sum())

    # -- validation ---------------------------------------------------------
    def _edge_owners(self) -> dict:
        owners: dict = {}
        c = self.cells
        for local in ((0, 1), (1, 2), (2, 0)):
            a = c[:, local[0]]
            b = c[:, local[1]]
            lo = np.minimum(a, b).tolist()
            hi = np.maximum(a, b).tolist()
            for idx, key in enumerate(zip(lo, hi)):
                owners.setdefault(key, []).append(idx)
        return owners

    def validate(self):
        nv = self.num_vertices
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise MeshError("cells must be vertex-index triples")
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() >= nv):
            raise MeshError("cell vertex index out of range")
        if len(self.facet_tags) != len(self.facet_vertices):
            raise MeshError("facet tag count mismatch")
        if len(self.cell_regions) != len(self.cells):
            raise MeshError("cell region count mismatch")
        bad = np.flatnonzero(self.signed_areas <= 0)
        if bad.size:
            raise MeshError(f"cells with non-positive signed area: {bad[:10].tolist()}")
        if np.any((self.facet_tags < 0) | (self.facet_tags >= len(BOUNDARY_TAGS))):
            raise MeshError("unknown boundary tag code")
        if np.any((self.cell_regions < 0) | (self.cell_regions >= len(REGION_TAGS))):
            raise MeshError("unknown region tag code")
        owners = self._edge_owners()
        if any(len(v) > 2 for v in owners.values()):
            raise MeshError("non-manifold edge shared by more than two cells")
        boundary = {k for k, v in owners.items() if len(v) == 1}
        tagged: dict = {}
        for e in self.facet_vertices.tolist():
            key = tuple(sorted(e))
            if key not in boundary:
                raise MeshError(f"tagged facet {e} is not a boundary edge")
            if key in tagged:
                raise MeshError(f"boundary edge {e} tagged more than once")
            tagged[key] = True
        missing = sorted(boundary - tagged.keys())
        if missing:
            raise MeshError(f"untagged boundary edges: {missing[:10]}")

    # -- misc ---------------------------------------------------------------
    def to_text(self) -> str:
        out = [HEADER, f"vertices {self.num_vertices}"]
        out += [f"{x!r} {y!r}" for x, y in self.vertices.tolist()]
        out.append(f"cells {self.num_cells}")
        out += [f"{i} {j} {k}" for i, j, k in self.cells.tolist()]
        out.append(f"boundary {self.num_facets}")
        out += [f"{i} {j} {BOUNDARY_TAGS[t]}"
                for (i, j), t in zip(self.facet_vertices.tolist(), self.facet_tags.tolist())]
        tagged = np.flatnonzero(self.cell_regions != INTERIOR)
        out.append(f"regions {len(tagged)}")
        names = {OBS: "obs", ANE: "ane", EXT: "ext"}
        out += [f"{c} {names[self.cell_regions[c]]}" for c in tagged.tolist()]
        return "\n".join(out) + "\n"

    @cached_property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def transformed(self, matrix, shift=(0.0, 0.0)) -> "Mesh":
        """Mesh with vertices mapped by ``x -> matrix @ x + shift`` (orientation preserving)."""
        matrix = np.asarray(matrix, dtype=float)
        if np.linalg.det(matrix) <= 0:
            raise MeshError("transformation must preserve orientation")
        v = self.vertices @ matrix.T + np.asarray(shift, dtype=float)
        return Mesh(v, self.cells, self.facet_vertices, self.facet_tags, self.cell_regions)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(mesh.to_text())


def parse_mesh(text: str) -> Mesh:
    lines = text.splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines):
            pos += 1
            s = lines[pos - 1].strip()
            if s and not s.startswith("#"):
                return s, pos
        raise MeshParseError("unexpected end of file", pos)

    head, ln = next_line()
    if head != HEADER:
        raise MeshParseError(f"expected header {HEADER!r}", ln)

    def section(name):
        s, ln = next_line()
        parts = s.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshParseError(f"expected section '{name} <count>'", ln)
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshParseError(f"bad count in section {name}", ln) from None
        if count < 0:
            raise MeshParseError("negative count", ln)
        rows = []
        for _ in range(count):
            rows.append(next_line())
        return rows

    def fields(rows, n, conv, name):
        out = []
        for s, ln in rows:
            parts = s.split()
            if len(parts) != n:
                raise MeshParseError(f"{name}: expected {n} fields", ln)
            try:
                out.append([c(p) for c, p in zip(conv, parts)])
            except (ValueError, KeyError):
                raise MeshParseError(f"{name}: cannot parse {s!r}", ln) from None
        return out

    verts = fields(section("vertices"), 2, (float, float), "vertices")
    cell_rows = section("cells")
    cells = fields(cell_rows, 3, (int, int, int), "cells")
    nv = len(verts)
    for (s, ln), c in zip(cell_rows, cells):
        if min(c) < 0 or max(c) >= nv:
            raise MeshParseError("vertex index out of range", ln)
    btag = {t: i for i, t in enumerate(BOUNDARY_TAGS)}
    bnd_rows = section("boundary")
    bnd = fields(bnd_rows, 3, (int, int, btag.__getitem__), "boundary")
    rtag = {"obs": OBS, "ane": ANE, "ext": EXT}
    reg_rows = section("regions")
    reg = fields(reg_rows, 2, (int, rtag.__getitem__), "regions")
    regions = np.zeros(len(cells), dtype=np.int64)
    for (s, ln), (c, t) in zip(reg_rows, reg):
        if not 0 <= c < len(cells):
            raise MeshParseError("cell index out of range", ln)
        regions[c] = t
    try:
        extra, ln = next_line()
    except MeshParseError:
        extra = None
    if extra is not None:
        raise MeshParseError("trailing content", ln)
    return Mesh(
        np.array(verts, dtype=float).reshape(-1, 2),
        np.array(cells, dtype=np.int64).reshape(-1, 3),
        np.array([b[:2] for b in bnd], dtype=np.int64).reshape(-1, 2),
        np.array([b[2] for b in bnd], dtype=np.int64),
        regions,
    )


def load_mesh(path) -> Mesh:
    return parse_mesh(Path(path).read_text())


# ---------------------------------------------------------------------------
# small meshes
# ---------------------------------------------------------------------------

def unit_square(n: int = 1, tag: str = "walls", tags: dict | None = None) -> Mesh:
    """Structured ``n x n`` square split into ``2 n^2`` triangles.

    ``tags`` may map the sides ``bottom``, ``right``, ``top``, ``left`` to
    boundary tags; unmapped sides get ``tag``.
    """
    tags = tags or {}
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs)
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    cells = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = idx[j, i], idx[j, i + 1], idx[j + 1, i + 1], idx[j + 1, i]
            cells += [(a, b, c), (a, c, d)]
    sides = {
        "bottom": [(idx[0, i], idx[0, i + 1]) for i in range(n)],
        "right": [(idx[j, n], idx[j + 1, n]) for j in range(n)],
        "top": [(idx[n, i + 1], idx[n, i]) for i in range(n)],
        "left": [(idx[j + 1, 0], idx[j, 0]) for j in range(n)],
    }
    fv, ft = [], []
    for side, edges in sides.items():
        code = BOUNDARY_TAGS.index(tags.get(side, tag))
        fv += edges
        ft += [code] * len(edges)
    return Mesh(verts, np.array(cells), np.array(fv), np.array(ft))


def restrict(mesh: Mesh, keep_cells) -> Mesh:
    """Sub-mesh on ``keep_cells``.

    New boundary edges inherit the tag given by ``interface_tags`` stored
    by the generator; edges that become boundary without a known tag are
    tagged ``walls``.
    """
    return _restrict(mesh, np.asarray(keep_cells), {})


def _restrict(mesh: Mesh, keep, interface_tags: dict) -> Mesh:
    keep = np.sort(keep)
    cells = mesh.cells[keep]
    used = np.unique(cells)
    renum = -np.ones(mesh.num_vertices, dtype=np.int64)
    renum[used] = np.arange(len(used))
    sub_cells = renum[cells]
    old_tags = {tuple(sorted(e)): t for e, t in zip(mesh.facet_vertices.tolist(), mesh.facet_tags.tolist())}
    owners: dict = {}
    for local in ((0, 1), (1, 2), (2, 0)):
        for a, b in zip(cells[:, local[0]].tolist(), cells[:, local[1]].tolist()):
            key = (min(a, b), max(a, b))
            owners[key] = owners.get(key, 0) + 1
    fv, ft = [], []
    walls = BOUNDARY_TAGS.index("walls")
    for key, cnt in owners.items():
        if cnt != 1:
            continue
        tag = old_tags.get(key, interface_tags.get(key, walls))
        fv.append((renum[key[0]], renum[key[1]]))
        ft.append(tag)
    order = np.lexsort((np.array([f[1] for f in fv]), np.array([f[0] for f in fv])))
    fv = np.array(fv, dtype=np.int64)[order]
    ft = np.array(ft, dtype=np.int64)[order]
    return Mesh(mesh.vertices[used], sub_cells, fv, ft, mesh.cell_regions[keep])


# ---------------------------------------------------------------------------
# bifurcation generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BifurcationParams:
    """Symmetric Y-bifurcation with a circular aneurysm sac at the apex (mm, degrees)."""

    width: float = 3.0
    branch_width: float = 2.2
    parent_length: float = 9.0
    branch_length: float = 9.0
    branch_angle: float = 35.0
    aneurysm_radius: float = 1.6
    aneurysm_offset: float = 0.6  # sac centre beyond the apex, in units of the radius
    edge_length: float = 0.2
    extension_widths: float = 5.0
    obs_wall_margin: float = 0.0  # cells closer than this to a wall are not observed

    def scaled(self, factor: float, edge_length: float) -> "BifurcationParams":
        return BifurcationParams(
            self.width * factor, self.branch_width * factor, self.parent_length * factor,
            self.branch_length * factor, self.branch_angle, self.aneurysm_radius * factor,
            self.aneurysm_offset, edge_length, self.extension_widths, self.obs_wall_margin * factor,
        )


_M_WALL, _M_IN, _M_OUT1, _M_OUT2 = 1, 2, 3, 4
_M_IF_IN, _M_IF_OUT1, _M_IF_OUT2, _M_NECK = 12, 13, 14, 20
_MARKER_TAG = {_M_WALL: "walls", _M_IN: "inlet", _M_OUT1: "out1", _M_OUT2: "out2",
               _M_IF_IN: "inlet", _M_IF_OUT1: "out1", _M_IF_OUT2: "out2"}


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def bifurcation_outline(params: BifurcationParams):
    """Key points of the outline.  Returns a dict of named points and arc data."""
    W, Wb = params.width, params.branch_width
    Lp, Lb = params.parent_length, params.branch_length
    phi = math.radians(params.branch_angle)
    R = params.aneurysm_radius
    Le, Leb = params.extension_widths * W, params.extension_widths * Wb
    d = np.array([math.cos(phi), math.sin(phi)])
    n = np.array([-math.sin(phi), math.cos(phi)])
    mirror = np.array([1.0, -1.0])

    t_o = (W / 2 - (Wb / 2) * math.cos(phi)) / math.sin(phi)
    q_up = t_o * d + (Wb / 2) * n
    x_c = Wb / (2 * math.sin(phi))
    a = params.aneurysm_offset * R
    disc = a * a * math.cos(phi) ** 2 - a * a + R * R
    if disc <= 0 or R <= a:
        raise GeometryError("aneurysm circle must enclose the apex")
    t_p = a * math.cos(phi) + math.sqrt(disc)
    apex = np.array([x_c, 0.0])
    p_up = apex + t_p * d
    centre = apex + np.array([a, 0.0])
    psi = math.atan2(p_up[1], p_up[0] - centre[0])

    def branch(t, side):
        return t * d + side * (Wb / 2) * n

    pts = {
        "q_up": q_up,
        "apex": apex,
        "p_up": p_up,
        "centre": centre,
        "psi": psi,
        "out_o": branch(Lb, 1), "out_i": branch(Lb, -1),
        "ext_o": branch(Lb + Leb, 1), "ext_i": branch(Lb + Leb, -1),
        "mirror": mirror,
    }
    # geometric sanity
    t_inner_end = np.dot(pts["out_i"] - apex, d)
    if t_p >= t_inner_end:
        raise GeometryError("aneurysm sac reaches beyond the branch outlet")
    if q_up[0] <= -Lp:
        raise GeometryError("parent vessel too short for the branch junction")
    if t_o >= Lb:
        raise GeometryError("branches too short")
    if pts["out_i"][1] <= 0:
        raise GeometryError("branch inner wall crosses the symmetry axis")
    # sac must not reach the outer wall of the branch
    dist_outer = abs(np.dot(centre - (Wb / 2) * n, n))
    if dist_outer < R:
        raise GeometryError("aneurysm sac intersects the branch outer wall")
    pts.update(Lp=Lp, Le=Le, W=W)
    return pts


def analytic_sac_area(params: BifurcationParams) -> float:
    pts = bifurcation_outline(params)
    R, psi = params.aneurysm_radius, pts["psi"]
    return 0.5 * R * R * (2 * psi - math.sin(2 * psi))


def _split(a, b, h):
    n = max(1, int(math.ceil(np.linalg.norm(np.asarray(b) - np.asarray(a)) / h - 1e-9)))
    s = np.linspace(0.0, 1.0, n + 1)[:, None]
    return (1 - s) * np.asarray(a) + s * np.asarray(b)


def generate_bifurcation(params: BifurcationParams | None = None, with_extension: bool = True) -> Mesh:
    """Mesh the bifurcation.  Without extension, the mesh is the restriction of
    the extended mesh to the reconstruction domain, so its vertices are a
    subset of the extended mesh's vertices."""
    import triangle

    params = params or BifurcationParams()
    for name in ("width", "branch_width", "parent_length", "branch_length", "branch_angle",
                 "aneurysm_radius", "edge_length", "extension_widths"):
        if getattr(params, name) <= 0:
            raise GeometryError(f"{name} must be positive")
    h = params.edge_length
    if h >= min(params.width, params.branch_width):
        raise GeometryError("edge length must be smaller than the narrowest channel width")
    pts = bifurcation_outline(params)
    W, Lp, Le, m = pts["W"], pts["Lp"], pts["Le"], pts["mirror"]

    def low(p):
        return np.asarray(p) * m

    # outline polylines (point list, marker) traversed counter-clockwise
    inlet_bot = np.array([-Lp - Le, -W / 2])
    if_bot = np.array([-Lp, -W / 2])
    if_top = np.array([-Lp, W / 2])
    inlet_top = np.array([-Lp - Le, W / 2])
    R, centre, psi = params.aneurysm_radius, pts["centre"], pts["psi"]
    narc = max(8, int(math.ceil(2 * psi * R / h)))
    ang = np.linspace(-psi, psi, narc + 1)
    arc = centre + R * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    arc[0] = low(pts["p_up"])
    arc[-1] = pts["p_up"]

    chain = [
        (inlet_bot, if_bot, _M_WALL),
        (if_bot, low(pts["q_up"]), _M_WALL),
        (low(pts["q_up"]), low(pts["out_o"]), _M_WALL),
        (low(pts["out_o"]), low(pts["ext_o"]), _M_WALL),
        (low(pts["ext_o"]), low(pts["ext_i"]), _M_OUT2),
        (low(pts["ext_i"]), low(pts["out_i"]), _M_WALL),
        (low(pts["out_i"]), low(pts["p_up"]), _M_WALL),
        ("arc", None, _M_WALL),
        (pts["p_up"], pts["out_i"], _M_WALL),
        (pts["out_i"], pts["ext_i"], _M_WALL),
        (pts["ext_i"], pts["ext_o"], _M_OUT1),
        (pts["ext_o"], pts["out_o"], _M_WALL),
        (pts["out_o"], pts["q_up"], _M_WALL),
        (pts["q_up"], if_top, _M_WALL),
        (if_top, inlet_top, _M_WALL),
        (inlet_top, inlet_bot, _M_IN),
    ]
    verts: list = []
    segs: list = []
    marks: list = []
    index: dict = {}

    def vid(p):
        key = (round(float(p[0]), 12), round(float(p[1]), 12))
        if key not in index:
            index[key] = len(verts)
            verts.append((float(p[0]), float(p[1])))
        return index[key]

    def add_poly(poly, marker):
        ids = [vid(p) for p in poly]
        for a, b in zip(ids[:-1], ids[1:]):
            segs.append((a, b))
            marks.append(marker)

    for a, b, marker in chain:
        if isinstance(a, str):
            add_poly(arc, marker)
        else:
            add_poly(_split(a, b, h), marker)
    outline = np.array(verts)
    # self-intersection check on the closed outline
    nseg = len(segs)
    P = outline
    for i in range(nseg):
        a1, b1 = segs[i]
        for j in range(i + 2, nseg):
            if i == 0 and j == nseg - 1:
                continue
            a2, b2 = segs[j]
            if _segments_intersect(P[a1], P[b1], P[a2], P[b2]):
                raise GeometryError("self-intersecting outline")
    # interior interfaces
    add_poly(_split(if_bot, if_top, h), _M_IF_IN)
    add_poly(_split(pts["out_o"], pts["out_i"], h), _M_IF_OUT1)
    add_poly(_split(low(pts["out_o"]), low(pts["out_i"]), h), _M_IF_OUT2)
    add_poly(_split(low(pts["p_up"]), pts["p_up"], h), _M_NECK)

    mid_branch = 0.5 * (pts["out_o"] + pts["out_i"])
    dir_b = (pts["ext_o"] - pts["out_o"]) / np.linalg.norm(pts["ext_o"] - pts["out_o"])
    ext_b = mid_branch + 0.5 * params.extension_widths * params.branch_width * dir_b
    far = centre[0] + R
    regions = [
        (-Lp / 2, 0.0, OBS, 0),
        (0.5 * (pts["p_up"][0] + far), 0.0, ANE, 0),
        (-Lp - Le / 2, 0.0, EXT, 0),
        (*ext_b, EXT, 0),
        (*low(ext_b), EXT, 0),
    ]
    max_area = math.sqrt(3) / 4 * h * h
    tri = triangle.triangulate(
        {"vertices": np.array(verts), "segments": np.array(segs), "segment_markers": np.array(marks)[:, None],
         "regions": np.array(regions, dtype=float)},
        f"pq30a{max_area:.12f}AQ",
    )
    if "triangles" not in tri or len(tri["triangles"]) == 0:
        raise GeometryError("triangulation failed")
    V = tri["vertices"]
    C = tri["triangles"].astype(np.int64)
    attr = tri["triangle_attributes"][:, 0].round().astype(np.int64)
    # orient counter-clockwise
    p = V[C]
    sa = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    C[sa < 0] = C[sa < 0][:, [0, 2, 1]]
    seg_out = tri["segments"].astype(np.int64)
    seg_mark = tri["segment_markers"].ravel().astype(np.int64)
    edge_mark = {tuple(sorted(s)): mk for s, mk in zip(seg_out.tolist(), seg_mark.tolist())}

    # boundary facets of the full mesh
    count: dict = {}
    for local in ((0, 1), (1, 2), (2, 0)):
        for a, b in zip(C[:, local[0]].tolist(), C[:, local[1]].tolist()):
            key = (min(a, b), max(a, b))
            count[key] = count.get(key, 0) + 1
    fv, ft = [], []
    for key, cnt in sorted(count.items()):
        if cnt == 1:
            mk = edge_mark.get(key)
            if mk not in (_M_WALL, _M_IN, _M_OUT1, _M_OUT2):
                raise GeometryError(f"boundary edge {key} without outline marker")
            fv.append(key)
            ft.append(BOUNDARY_TAGS.index(_MARKER_TAG[mk]))

    if params.obs_wall_margin > 0:
        wall_edges = np.array([k for k, t in zip(fv, ft) if t == BOUNDARY_TAGS.index("walls")])
        centroids = V[C].mean(axis=1)
        dist = _distance_to_segments(centroids, V[wall_edges[:, 0]], V[wall_edges[:, 1]])
        attr[(attr == OBS) & (dist < params.obs_wall_margin)] = INTERIOR

    full = Mesh(V, C, np.array(fv), np.array(ft), attr)
    if with_extension:
        return full
    interface_tags = {k: BOUNDARY_TAGS.index(_MARKER_TAG[mk]) for k, mk in edge_mark.items()
                      if mk in (_M_IF_IN, _M_IF_OUT1, _M_IF_OUT2)}
    return _restrict(full, np.flatnonzero(attr != EXT), interface_tags)


def reconstruction_domain(mesh: Mesh) -> Mesh:
    """Drop the extension cells; the interfaces take the tag of the open
    boundary at the far end of their extension piece."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    is_ext = mesh.cell_regions == EXT
    owners = mesh._edge_owners()
    pairs = [own for own in owners.values() if len(own) == 2 and is_ext[own[0]] and is_ext[own[1]]]
    nc = mesh.num_cells
    if pairs:
        a, b = np.array(pairs).T
        graph = coo_matrix((np.ones(len(a)), (a, b)), shape=(nc, nc))
    else:
        graph = coo_matrix((nc, nc))
    _, label = connected_components(graph, directed=False)
    walls = BOUNDARY_TAGS.index("walls")
    piece_tag = {}
    for f in range(mesh.num_facets):
        c = mesh.facet_cells[f]
        if is_ext[c] and mesh.facet_tags[f] != walls:
            piece_tag[label[c]] = int(mesh.facet_tags[f])
    tags = {}
    for key, own in owners.items():
        if len(own) == 2 and is_ext[own[0]] != is_ext[own[1]]:
            c = own[0] if is_ext[own[0]] else own[1]
            if label[c] not in piece_tag:
                raise MeshError("extension piece without an open boundary")
            tags[key] = piece_tag[label[c]]
    return _restrict(mesh, np.flatnonzero(~is_ext), tags)


def _distance_to_segments(points, a, b):
    ab = b - a
    t = np.einsum("pk,sk->ps", points, ab) - np.einsum("sk,sk->s", a, ab)[None, :]
    t = np.clip(t / np.einsum("sk,sk->s", ab, ab)[None, :], 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - proj, axis=2).min(axis=1)
