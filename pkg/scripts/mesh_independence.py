"""Iterations to a fixed reduction of Jhat - Jhat_min on refined meshes.

    python scripts/mesh_independence.py [--euclidean] [--edge 0.35 0.175]
"""
import argparse
import time

import numpy as np

from flow4dvar.control import EuclideanRiesz, RegularisationConfig
from flow4dvar.forward import FlowProblem, ModelConfig
from flow4dvar.mesh import BifurcationParams, generate_bifurcation, reconstruction_domain
from flow4dvar.observe import Observer, even_times
from flow4dvar.optimize import OptimizerConfig, minimize
from flow4dvar.reduced import ReducedFunctional
from flow4dvar.twin import generate_truth, transfer


def iterations_to(values, factor):
    d = np.asarray(values) - np.min(values)
    return int(np.argmax(d <= d[0] / factor))


def run(edge, euclidean, cfg, max_iter):
    ext = generate_bifurcation(BifurcationParams().scaled(0.5, edge), with_extension=True)
    rec = reconstruction_domain(ext)
    truth = transfer(generate_truth(ext, cfg), ext, rec)
    ob = Observer(rec)
    obs = ob.observe(truth, "instantaneous", even_times(cfg.T, cfg.dt, 5))
    rf = ReducedFunctional(FlowProblem(rec, cfg), obs, RegularisationConfig(), ob)
    riesz = EuclideanRiesz(rf.size) if euclidean else rf.space.riesz
    _, trace = minimize(rf, np.zeros(rf.size), riesz, OptimizerConfig(ftol_rel=0.0, max_iter=max_iter))
    return rec.num_cells, trace


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--euclidean", action="store_true")
    ap.add_argument("--edge", type=float, nargs="+", default=[0.35, 0.175])
    ap.add_argument("--max-iter", type=int, default=40)
    a = ap.parse_args()
    cfg = ModelConfig(dt=0.037, T=0.37)
    for edge in a.edge:
        t = time.time()
        cells, trace = run(edge, a.euclidean, cfg, a.max_iter)
        print(f"edge {edge}: {cells} cells, iterations to 10x {iterations_to(trace.values, 10)}, "
              f"100x {iterations_to(trace.values, 100)}, {trace.iterations} run ({time.time() - t:.0f} s)")
