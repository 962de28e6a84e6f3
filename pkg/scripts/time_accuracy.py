"""Observed temporal order of the forward solver on a channel.

    python scripts/time_accuracy.py

Prints two studies at fixed mesh: the full scheme with the Nitsche inlet and
pressure stabilisation, and the bare theta scheme (walls only, tiny beta,
body force at the midpoint).  The boundary and stabilisation terms are
evaluated at the new time level, so the first study settles near order one
with an error that shrinks with h; the second is order two.
"""
import numpy as np

from flow4dvar.forward import FlowProblem, ModelConfig
from flow4dvar.mesh import unit_square
from flow4dvar.twin import parabolic_profile

DTS = (0.04, 0.02, 0.01, 0.005, 0.0025)


def orders(finals):
    d = [np.linalg.norm(a - b) for a, b in zip(finals[:-1], finals[1:])]
    return np.log2(np.array(d[:-1]) / d[1:])


def full_scheme(n=6):
    mesh = unit_square(n, "walls", {"left": "inlet", "right": "out2"})
    out = []
    for dt in DTS:
        P = FlowProblem(mesh, ModelConfig(dt=dt, T=0.4))
        prof = parabolic_profile(mesh, "inlet", 50.0, True)[P.g_dofs]
        G = np.sin(np.pi * P.cfg.times[1:] / 0.8)[:, None] ** 2 * prof
        out.append(P.solve(np.zeros(2 * P.nv), G).U[-1])
    return orders(out)


def bare_theta(n=6):
    mesh = unit_square(n, "walls", {"right": "out2"})
    out = []
    for dt in DTS[:-1]:
        P = FlowProblem(mesh, ModelConfig(nu=0.5, dt=dt, T=0.4, beta=1e-8))
        f = P.V.interpolate(lambda x, y: (np.sin(np.pi * y) * np.sin(np.pi * x), np.sin(2 * np.pi * x) * y))
        base = np.zeros(P.n)
        base[:P.nuf] = (P.M @ f)[P.free_u]
        u, x = np.zeros(2 * P.nv), None
        for k in range(P.cfg.K):
            P.__dict__["load"] = 200 * np.sin(np.pi * (k + 0.5) * dt / 0.8) ** 2 * base
            x, _ = P.solve_step(u, np.zeros(P.ng), x)
            u = P.full_u(x[:P.nuf])
        out.append(u)
    return orders(out)


if __name__ == "__main__":
    print("full scheme   ", np.round(full_scheme(), 2))
    print("bare theta    ", np.round(bare_theta(), 2))
