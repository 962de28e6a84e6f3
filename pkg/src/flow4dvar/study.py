"""The bundled twin-experiment manifest and its runner.

Each cell is one reconstruction.  Cells that share (operator, N, snr, seed)
share one truth and one observation file.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .config import AssimilationConfig
from .control import save_control
from .forward import FlowProblem, save_trajectory
from .mesh import Mesh, generate_bifurcation, reconstruction_domain, save_mesh
from .observe import Observer, add_noise, even_times, save_observations
from .optimize import minimize
from .reduced import ReducedFunctional
from .twin import generate_truth, transfer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cell:
    name: str
    operator: str = "inst"
    N: int = 16
    snr: float = math.inf
    alpha: float = 1e-5
    swap_outlets: bool = False


def default_manifest() -> list:
    cells = []
    for op in ("inst", "avg"):
        cells.append(Cell(f"base-{op}", op))
        for snr in (2.0, 1.0):
            cells.append(Cell(f"snr{snr:g}-{op}", op, snr=snr))
        for a in (1e-4, 1e-2, 1.0):
            cells.append(Cell(f"alpha{a:g}-{op}", op, alpha=a))
        for n in (4, 8, 32):
            cells.append(Cell(f"N{n}-{op}", op, N=n))
        cells.append(Cell(f"swap-{op}", op, swap_outlets=True))
    return cells


def manifest_text(cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "operator", "N", "snr", "alpha", "swap_outlets"])
    for c in cells:
        w.writerow([c.name, c.operator, c.N, "inf" if math.isinf(c.snr) else repr(c.snr), repr(c.alpha),
                    str(c.swap_outlets).lower()])
    return buf.getvalue()


def parse_manifest(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [Cell(r["name"], r["operator"], int(r["N"]), float(r["snr"]), float(r["alpha"]),
                 r["swap_outlets"].strip().lower() in ("1", "true", "yes")) for r in rows]


class TwinStudy:
    """Meshes and truths shared by the cells of a study (cached per outlet setup)."""

    def __init__(self, cfg: AssimilationConfig, ext: Mesh | None = None):
        self.cfg = cfg
        self.ext = ext if ext is not None else generate_bifurcation(cfg.geometry(), with_extension=True)
        self.rec = reconstruction_domain(self.ext)
        self.observer = Observer(self.rec)
        self._truth = {}

    def truth(self, cfg: AssimilationConfig):
        key = (cfg.truth(), cfg.dt, cfg.T)
        if key not in self._truth:
            full = generate_truth(self.ext, cfg.model(), cfg.truth())
            self._truth[key] = transfer(full, self.ext, self.rec)
        return self._truth[key]

    def observations(self, cfg: AssimilationConfig):
        truth = self.truth(cfg)
        obs = self.observer.observe(truth, cfg.kind, even_times(cfg.T, cfg.dt, cfg.N, cfg.kind), cfg.quadrature)
        if not math.isinf(cfg.snr):
            obs = add_noise(obs, cfg.snr, cfg.seed, self.observer)
        return obs

    def reconstruct(self, cfg: AssimilationConfig, obs=None, x0=None):
        obs = obs if obs is not None else self.observations(cfg)
        problem = FlowProblem(self.rec, cfg.model())
        rf = ReducedFunctional(problem, obs, cfg.regularisation(), self.observer)
        x0 = np.zeros(rf.size) if x0 is None else x0
        x, trace = minimize(rf, x0, rf.space.riesz, cfg.optimizer())
        m = rf.space.from_vector(x)
        traj = problem.solve(m.u0, m.g)
        return Result(cfg, obs, m, traj, trace, rf)

    def cell_config(self, cell: Cell) -> AssimilationConfig:
        return self.cfg.replace(operator=cell.operator, N=cell.N, snr=cell.snr, alpha=cell.alpha,
                                gamma=cell.alpha, swap_outlets=cell.swap_outlets)


@dataclass
class Result:
    cfg: AssimilationConfig
    obs: object
    m: object
    traj: object
    trace: object
    rf: ReducedFunctional

    def errors(self, mesh: Mesh, truth) -> dict:
        return metrics.report(mesh, self.traj, truth, self.cfg.nu)


def run_study(cfg: AssimilationConfig, cells, out_dir, ext: Mesh | None = None) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    study = TwinStudy(cfg, ext)
    save_mesh(study.ext, out / "extended.mesh")
    save_mesh(study.rec, out / "reconstruction.mesh")
    (out / "manifest.csv").write_text(manifest_text(cells))
    summary = []
    for cell in cells:
        ccfg = study.cell_config(cell)
        log.info("study cell %s", cell.name)
        res = study.reconstruct(ccfg)
        truth = study.truth(ccfg)
        cdir = out / cell.name
        cdir.mkdir(exist_ok=True)
        (cdir / "config.ini").write_text(ccfg.to_text())
        save_observations(res.obs, cdir / "observations.txt")
        save_control(res.m, cdir / "control.bin", study.rec.hash)
        save_trajectory(res.traj, cdir / "trajectory.bin")
        res.trace.save(cdir / "trace.csv")
        errs = res.errors(study.rec, truth)
        (cdir / "report.txt").write_text(metrics.format_report(errs))
        (cdir / "timeseries.csv").write_text(metrics.timeseries_csv(
            metrics.timeseries(study.rec, res.traj, truth, ccfg.nu)))
        row = {"name": cell.name, **errs, "iterations": res.trace.iterations, "status": res.trace.status,
               "J": res.trace.rows[-1].J, "R": res.trace.rows[-1].R}
        summary.append(row)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = ["name", "E_ane", "E_wss", "E_ua", "iterations", "status", "J", "R"]
    w.writerow(keys)
    for row in summary:
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])
    (out / "summary.csv").write_text(buf.getvalue())
    return summary
