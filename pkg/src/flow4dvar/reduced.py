"""The reduced functional Ĵ(m) = J(u(m)) + R(m) and its adjoint gradient."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import adjoint
from .control import ControlSpace, RegularisationConfig
from .forward import FlowProblem, Trajectory
from .observe import ObservationSet, Observer

log = logging.getLogger(__name__)


@dataclass
class Evaluation:
    x: np.ndarray
    Jhat: float
    J: float
    R: float
    grad: np.ndarray | None
    traj: Trajectory


class ReducedFunctional:
    """Callable ``x -> (Ĵ, dĴ/dm, info)`` over the flat control layout."""

    def __init__(self, problem: FlowProblem, obs: ObservationSet, reg: RegularisationConfig,
                 observer: Observer | None = None):
        self.problem = problem
        self.obs = obs
        self.reg = reg
        self.space = ControlSpace(problem, reg.anchor_initial_trace)
        self.observer = observer or Observer(problem.mesh, obs.vertices)
        self.observer.check(obs)
        if abs(obs.dt - problem.cfg.dt) > 1e-12 * problem.cfg.dt:
            raise ValueError("observation timestep does not match the model timestep")
        obs.weights(problem.cfg.K)  # validates the observation grid
        self.n_evals = 0
        self.last: Evaluation | None = None

    @property
    def size(self) -> int:
        return self.space.size

    def forward(self, x, keep_factors=False):
        m = self.space.from_vector(x)
        return self.problem.solve(m.u0, m.g, keep_factors=keep_factors)

    def value(self, x) -> float:
        traj = self.forward(x)
        return self.observer.misfit(traj, self.obs) + self.space.regularisation_value(x, self.reg)

    def evaluate(self, x) -> Evaluation:
        x = np.asarray(x, dtype=float)
        traj, factors = self.forward(x, keep_factors=True)
        J = self.observer.misfit(traj, self.obs)
        R = self.space.regularisation_value(x, self.reg)
        src_full = self.observer.sources(traj, self.obs)
        P = self.problem
        src = np.zeros((traj.K + 1, P.n))
        src[:, : P.nuf] = src_full[:, P.free_u]
        lam = adjoint.solve_adjoint(P, traj, src, factors)
        grad = adjoint.assemble_gradient(P, traj, lam, self.space.regularisation_gradient(x, self.reg))
        self.n_evals += 1
        self.last = Evaluation(x.copy(), J + R, J, R, grad, traj)
        log.debug("eval %d: J=%.6e R=%.6e", self.n_evals, J, R)
        return self.last

    def __call__(self, x):
        ev = self.evaluate(x)
        return ev.Jhat, ev.grad, {"J": ev.J, "R": ev.R}
