"""Legacy ASCII VTK (4.2) output of velocity/pressure snapshots."""
from __future__ import annotations

import numpy as np

from .mesh import Mesh


def format_vtk(mesh: Mesh, u, p, title: str = "flow4dvar") -> str:
    nv, nc = mesh.num_vertices, mesh.num_cells
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    out = ["# vtk DataFile Version 4.2", title.replace("\n", " ")[:255], "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    out.append(f"CELLS {nc} {4 * nc}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.cells.tolist()]
    out.append(f"CELL_TYPES {nc}")
    out += ["5"] * nc
    out.append(f"POINT_DATA {nv}")
    out.append("VECTORS velocity double")
    out += [f"{a!r} {b!r} 0.0" for a, b in zip(u[:nv].tolist(), u[nv:].tolist())]
    out.append("SCALARS pressure double 1")
    out.append("LOOKUP_TABLE default")
    out += [repr(v) for v in p.tolist()]
    return "\n".join(out) + "\n"


def write_vtk(path, mesh: Mesh, u, p, title: str = "flow4dvar") -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_vtk(mesh, u, p, title))


def read_vtk_points(path) -> tuple:
    """Points (n, 2) and cells (nc, 3) of a file written by ``write_vtk``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = next(k for k, line in enumerate(lines) if line.startswith("POINTS"))
    n = int(lines[i].split()[1])
    pts = np.array([line.split()[:2] for line in lines[i + 1:i + 1 + n]], dtype=float)
    j = next(k for k, line in enumerate(lines) if line.startswith("CELLS"))
    nc = int(lines[j].split()[1])
    cells = np.array([line.split()[1:] for line in lines[j + 1:j + 1 + nc]], dtype=np.int64)
    return pts, cells
