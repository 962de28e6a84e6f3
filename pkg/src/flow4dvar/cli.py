"""Command line front end.

Exit codes: 0 success, 1 usage, 2 validation, 3 solver failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import metrics
from .control import Control, ControlSpace, EuclideanRiesz, load_control, save_control
from .fem import ConfigurationError
from .forward import FlowProblem, SolverError, load_trajectory, save_trajectory
from .mesh import MeshError, generate_bifurcation, load_mesh, reconstruction_domain, save_mesh
from .observe import (AlignmentError, Observer, add_noise, even_times, grid_steps, load_observations,
                      save_observations)
from .optimize import OptimizationError, minimize
from .reduced import ReducedFunctional
from .study import default_manifest, parse_manifest, run_study
from .twin import generate_truth, transfer
from .verify import random_direction, taylor_test
from .vtk import write_vtk

log = logging.getLogger("flow4dvar")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_SOLVER = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _float_or_inf(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity", "none"):
        return math.inf
    return float(text)


CONFIG_FLAGS = {
    # flag: (config key, type)
    "--nu": ("nu", float), "--dt": ("dt", float), "--T": ("T", float), "--theta": ("theta", float),
    "--sigma": ("sigma", float), "--beta": ("beta", float), "--alpha": ("alpha", float),
    "--gamma": ("gamma", float), "--max-iter": ("max_iter", int), "--ftol-rel": ("ftol_rel", float),
    "--memory": ("memory", int), "--N": ("N", int), "--snr": ("snr", _float_or_inf), "--seed": ("seed", int),
    "--inlet-peak": ("inlet_peak", float), "--outlet-peak": ("outlet_peak", float),
    "--scale": ("scale", float), "--edge-length": ("edge_length", float),
}


def _add_config_flags(p, names):
    p.add_argument("--config", help="key = value config file (CLI flags take precedence)")
    for flag in names:
        key, typ = CONFIG_FLAGS[flag]
        p.add_argument(flag, dest=key, type=typ, default=None)


def _resolve(args, extra=None) -> cfgmod.AssimilationConfig:
    file_values = cfgmod.load_config_file(args.config) if getattr(args, "config", None) else {}
    cli = {key: getattr(args, key, None) for key, _ in CONFIG_FLAGS.values()}
    cli.update(extra or {})
    return cfgmod.resolve(file_values, cli)


# -- commands -------------------------------------------------------------------------

def cmd_mesh_gen(args) -> int:
    cfg = _resolve(args)
    params = cfg.geometry()
    if args.obs_wall_margin is not None:
        from dataclasses import replace
        params = replace(params, obs_wall_margin=args.obs_wall_margin)
    mesh = generate_bifurcation(params, with_extension=not args.no_extension)
    save_mesh(mesh, args.out)
    print(f"{args.out}: {mesh.num_vertices} vertices, {mesh.num_cells} cells, hash {mesh.hash}")
    return EXIT_OK


def cmd_twin_gen(args) -> int:
    cfg = _resolve(args, {"operator": args.operator})
    ext = load_mesh(args.mesh)
    rec = load_mesh(args.recon_mesh) if args.recon_mesh else reconstruction_domain(ext)
    truth_full = generate_truth(ext, cfg.model(), cfg.truth())
    truth = transfer(truth_full, ext, rec)
    observer = Observer(rec)
    obs = observer.observe(truth, cfg.kind, even_times(cfg.T, cfg.dt, cfg.N, cfg.kind), cfg.quadrature)
    if not math.isinf(cfg.snr):
        obs = add_noise(obs, cfg.snr, cfg.seed, observer)
    save_observations(obs, args.out_obs)
    save_trajectory(truth, args.out_truth)
    if args.out_recon_mesh:
        save_mesh(rec, args.out_recon_mesh)
    e = observer.energy(obs.data - observer.observe(truth, cfg.kind, obs.times, cfg.quadrature).data)
    print(f"{args.out_obs}: {obs.N} {obs.kind} observations on {len(obs.vertices)} vertices, "
          f"noise energy {float(e)!r}")
    return EXIT_OK


def cmd_assimilate(args) -> int:
    cfg = _resolve(args, {"swap_outlets": True if args.swap_outlets else None})
    mesh = load_mesh(args.mesh)
    obs = load_observations(args.obs)
    if obs.mesh_hash and obs.mesh_hash != mesh.hash:
        raise ValueError(f"observations were made on mesh {obs.mesh_hash}, not on {mesh.hash}")
    if abs(obs.dt - cfg.dt) > 1e-12 * cfg.dt:
        raise ValueError(f"observation timestep {obs.dt!r} differs from the model timestep {cfg.dt!r}")
    problem = FlowProblem(mesh, cfg.model())
    rf = ReducedFunctional(problem, obs, cfg.regularisation())
    if args.m0 in (None, "zero"):
        x0 = np.zeros(rf.size)
    else:
        m0, meta = load_control(args.m0)
        x0 = rf.space.to_vector(m0)
    riesz = EuclideanRiesz(rf.size) if args.euclidean else rf.space.riesz
    x, trace = minimize(rf, x0, riesz, cfg.optimizer())
    m = rf.space.from_vector(x)
    traj = problem.solve(m.u0, m.g)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_control(m, out / "control.bin", mesh.hash)
    save_trajectory(traj, out / "trajectory.bin")
    trace.save(out / "trace.csv")
    (out / "config.ini").write_text(cfg.to_text())
    last = trace.rows[-1]
    print(f"status {trace.status}, {trace.iterations} iterations, Jhat {float(last.Jhat)!r} (J {float(last.J)!r}, R {float(last.R)!r})")
    return EXIT_OK


def cmd_metrics(args) -> int:
    mesh = load_mesh(args.mesh)
    traj = load_trajectory(args.traj)
    truth = load_trajectory(args.truth)
    for t, name in ((traj, args.traj), (truth, args.truth)):
        if t.mesh_hash and t.mesh_hash != mesh.hash:
            raise ValueError(f"{name} was computed on mesh {t.mesh_hash}, not on {mesh.hash}")
        if t.U.shape[1] != 2 * mesh.num_vertices:
            raise ValueError(f"{name} does not match the mesh")
    values = metrics.report(mesh, traj, truth, args.nu)
    text = metrics.format_report(values)
    if args.out_report:
        Path(args.out_report).write_text(text)
    if args.out_csv:
        Path(args.out_csv).write_text(metrics.timeseries_csv(metrics.timeseries(mesh, traj, truth, args.nu)))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_taylor(args) -> int:
    cfg = _resolve(args)
    mesh = load_mesh(args.mesh)
    if args.obs:
        obs = load_observations(args.obs)
    else:
        # self-contained problem: data from a pulsed run on the same mesh
        truth = generate_truth(mesh, cfg.model(), cfg.truth())
        obs = Observer(mesh).observe(truth, cfg.kind, even_times(cfg.T, cfg.dt, cfg.N, cfg.kind))
    problem = FlowProblem(mesh, cfg.model())
    rf = ReducedFunctional(problem, obs, cfg.regularisation())
    space = rf.space
    m = 50.0 * random_direction(space.size, cfg.seed + 1, space.riesz) * math.sqrt(space.size)
    variants = {"joint": None, "u0": slice(0, space.nu0), "g": slice(space.nu0, space.size)}
    if args.block != "all":
        variants = {args.block: variants[args.block]}
    ok = True
    text = []
    for i, (name, block) in enumerate(variants.items()):
        dm = random_direction(space.size, cfg.seed + 10 + i, space.riesz, block)
        dm *= float(np.linalg.norm(m)) / max(float(np.linalg.norm(dm)), 1e-300) * args.rel_size
        res = taylor_test(rf, m, dm, args.h0, args.levels, negate=args.negate_gradient, value=rf.value)
        text.append(res.report(name))
        orders = [o for o in res.orders1 if o is not None]
        if not orders or min(orders) < 1.9:
            ok = False
    report = "\n".join(text)
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_export(args) -> int:
    mesh = load_mesh(args.mesh)
    traj = load_trajectory(args.traj)
    if traj.U.shape[1] != 2 * mesh.num_vertices:
        raise ValueError("trajectory does not match the mesh")
    if args.steps:
        steps = [int(s) for s in args.steps.split(",")]
    else:
        steps = grid_steps([float(t) for t in args.times.split(",")], traj.dt).tolist()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k in steps:
        if not 0 <= k <= traj.K:
            raise ValueError(f"step {k} outside 0..{traj.K}")
        path = out / f"{args.prefix}_{k:05d}.vtk"
        write_vtk(path, mesh, traj.U[k], traj.P[k], f"flow4dvar step {k} t={float(k * traj.dt)!r}")
        print(path)
    return EXIT_OK


def cmd_run_study(args) -> int:
    cfg = _resolve(args)
    cells = parse_manifest(Path(args.manifest).read_text()) if args.manifest else default_manifest()
    if args.only:
        wanted = set(args.only.split(","))
        cells = [c for c in cells if c.name in wanted]
        if not cells:
            raise ValueError("no manifest cell matches --only")
    ext = load_mesh(args.mesh) if args.mesh else None
    summary = run_study(cfg, cells, args.out_dir, ext)
    for row in summary:
        print(f"{row['name']}: E_ane {row['E_ane']:.4f}  E_wss {row['E_wss']:.4f}  "
              f"E_ua {row['E_ua']:.4f}  iterations {row['iterations']} ({row['status']})")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flow4dvar", description="4DVar flow reconstruction for 2D twin experiments")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("mesh-gen", help="generate the bifurcation mesh")
    s.add_argument("--out", required=True)
    s.add_argument("--no-extension", action="store_true")
    s.add_argument("--obs-wall-margin", type=float, default=None)
    _add_config_flags(s, ["--scale", "--edge-length"])
    s.set_defaults(func=cmd_mesh_gen)

    s = sub.add_parser("twin-gen", help="truth run on the extended mesh and observations")
    s.add_argument("--mesh", required=True, help="extended mesh")
    s.add_argument("--recon-mesh", help="reconstruction mesh (default: extended mesh without extensions)")
    s.add_argument("--operator", choices=["inst", "avg"], default=None)
    s.add_argument("--out-obs", required=True)
    s.add_argument("--out-truth", required=True, help="truth trajectory on the reconstruction mesh")
    s.add_argument("--out-recon-mesh")
    _add_config_flags(s, ["--nu", "--dt", "--T", "--theta", "--sigma", "--beta", "--N", "--snr", "--seed",
                          "--inlet-peak", "--outlet-peak"])
    s.set_defaults(func=cmd_twin_gen)

    s = sub.add_parser("assimilate", help="reconstruct the flow from observations")
    s.add_argument("--mesh", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--swap-outlets", action="store_true")
    s.add_argument("--m0", default="zero", help="initial control file or 'zero'")
    s.add_argument("--euclidean", action="store_true", help="test hook: identity instead of the Riesz map")
    _add_config_flags(s, ["--nu", "--dt", "--T", "--theta", "--sigma", "--beta", "--alpha", "--gamma",
                          "--max-iter", "--ftol-rel", "--memory"])
    s.set_defaults(func=cmd_assimilate)

    s = sub.add_parser("metrics", help="reconstruction errors against a truth")
    s.add_argument("--mesh", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--nu", type=float, default=3.5)
    s.add_argument("--out-report")
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("taylor", help="Taylor remainder test of the reduced gradient")
    s.add_argument("--mesh", required=True)
    s.add_argument("--obs")
    s.add_argument("--levels", type=int, default=5)
    s.add_argument("--h0", type=float, default=1.0)
    s.add_argument("--rel-size", type=float, default=0.1, help="size of dm relative to m")
    s.add_argument("--block", choices=["all", "joint", "u0", "g"], default="all")
    s.add_argument("--negate-gradient", action="store_true")
    s.add_argument("--out")
    _add_config_flags(s, ["--nu", "--dt", "--T", "--theta", "--sigma", "--beta", "--alpha", "--gamma", "--N",
                          "--seed"])
    s.set_defaults(func=cmd_taylor)

    s = sub.add_parser("export", help="VTK snapshots of a trajectory")
    s.add_argument("--mesh", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--times", default="0.296")
    s.add_argument("--steps", help="comma separated step indices (overrides --times)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--prefix", default="snapshot")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("run-study", help="run the bundled experiment manifest")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--manifest", help="CSV manifest (default: bundled)")
    s.add_argument("--only", help="comma separated cell names")
    s.add_argument("--mesh", help="extended mesh (default: generated from the geometry settings)")
    _add_config_flags(s, ["--nu", "--dt", "--T", "--theta", "--sigma", "--beta", "--max-iter", "--ftol-rel",
                          "--seed", "--scale", "--edge-length"])
    s.set_defaults(func=cmd_run_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing command")
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SolverError, OptimizationError) as exc:
        sys.stderr.write(f"solver failure: {exc}\n")
        return EXIT_SOLVER
    except (MeshError, ConfigurationError, AlignmentError, ValueError, OSError) as exc:
        sys.stderr.write(f"validation error: {exc}\n")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
