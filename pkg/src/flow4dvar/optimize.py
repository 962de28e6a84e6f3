"""L-BFGS in a Hilbert space with a strong Wolfe line search.

Gradients are dual vectors; ``riesz`` maps them to primal directions and
serves as the initial inverse Hessian.  All curvature pairings ⟨y, s⟩ are
plain coefficient dots between a dual difference and a primal step.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .forward import SolverError

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    ftol_rel: float = 1e-4
    max_iter: int = 100
    max_ls_trials: int = 25
    gtol_rel: float = 1e-12
    scale_h0: bool = True  # ⟨s,y⟩/⟨y,H0 y⟩ scaling of the centre H0

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.memory < 1:
            raise ValueError("memory must be at least 1")
        if self.max_iter < 0 or self.max_ls_trials < 1:
            raise ValueError("iteration limits must be non-negative")


@dataclass
class TraceRow:
    iter: int
    J: float
    R: float
    Jhat: float
    gnormM: float
    step: float
    ls_trials: int


@dataclass
class OptimizerTrace:
    rows: list = field(default_factory=list)
    status: str = ""
    n_evals: int = 0

    @property
    def iterations(self) -> int:
        return len(self.rows) - 1

    @property
    def values(self) -> np.ndarray:
        return np.array([r.Jhat for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "J", "R", "Jhat", "gnormM", "step", "ls_trials"])
        for r in self.rows:
            w.writerow([r.iter, repr(r.J), repr(r.R), repr(r.Jhat), repr(r.gnormM), repr(r.step), r.ls_trials])
        return buf.getvalue()

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _row(it, f, info, gnorm, step, trials) -> TraceRow:
    return TraceRow(it, float(info.get("J", f)), float(info.get("R", 0.0)), float(f), float(gnorm), float(step),
                    int(trials))


def _call(fun, x):
    out = fun(x)
    if len(out) == 3:
        return out
    f, g = out
    return f, g, {}


def _cubic_min(a, fa, da, b, fb, db):
    """Minimiser of the cubic interpolating (a, fa, da) and (b, fb, db), or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    den = db - da + 2.0 * d2
    if den == 0:
        return None
    t = b - (b - a) * (db + d2 - d1) / den
    return t if math.isfinite(t) else None


@dataclass
class _Point:
    a: float
    f: float
    d: float  # directional derivative
    g: object = None
    info: dict = field(default_factory=dict)


def line_search(phi, f0, d0, alpha1, c1=1e-4, c2=0.9, max_trials=25, alpha_max=1e12):
    """Strong Wolfe line search (bracketing + cubic zoom).

    ``phi(a)`` returns a ``_Point``; non-finite ``f`` marks a failed
    evaluation and is treated as a step that is too long.  Returns
    ``(point, trials, ok)``; on failure ``point`` is the best admissible
    point found (or ``None``).
    """
    origin = _Point(0.0, f0, d0)
    prev = origin
    best = None
    a = alpha1
    trials = 0

    def armijo(p):
        return math.isfinite(p.f) and p.f <= f0 + c1 * p.a * d0 and p.f < f0

    def zoom(lo, hi):
        nonlocal trials, best
        while trials < max_trials:
            lo_a, hi_a = min(lo.a, hi.a), max(lo.a, hi.a)
            width = hi_a - lo_a
            t = None
            if math.isfinite(hi.f):
                t = _cubic_min(lo.a, lo.f, lo.d, hi.a, hi.f, hi.d)
            if t is None or not (lo_a + 0.1 * width <= t <= hi_a - 0.1 * width):
                t = 0.5 * (lo.a + hi.a)
            p = phi(t)
            trials += 1
            if armijo(p) and (best is None or p.f < best.f):
                best = p
            if not armijo(p) or p.f >= lo.f:
                hi = p
            else:
                if abs(p.d) <= -c2 * d0:
                    return p, True
                if p.d * (hi.a - lo.a) >= 0:
                    hi = lo
                lo = p
            if width < 1e-14 * max(1.0, hi_a):
                break
        return best, False

    while trials < max_trials:
        p = phi(a)
        trials += 1
        if armijo(p) and (best is None or p.f < best.f):
            best = p
        if not armijo(p) or (prev is not origin and p.f >= prev.f):
            pt, ok = zoom(prev, p)
            return pt, trials, ok
        if abs(p.d) <= -c2 * d0:
            return p, trials, True
        if p.d >= 0:
            pt, ok = zoom(p, prev)
            return pt, trials, ok
        t = _cubic_min(prev.a, prev.f, prev.d, p.a, p.f, p.d)
        if t is None or t < 1.5 * a or t > 8.0 * a:
            t = 4.0 * a
        prev, a = p, min(t, alpha_max)
    return best, trials, False


class LBFGS:
    def __init__(self, riesz, cfg: OptimizerConfig):
        self.riesz = riesz
        self.cfg = cfg
        self.pairs = deque(maxlen=cfg.memory)

    def reset(self):
        self.pairs.clear()

    def update(self, s, y) -> bool:
        sy = float(s @ y)
        ny = self.riesz.norm(y)
        ns = math.sqrt(max(float(s @ self.riesz.inverse(s)), 0.0))
        if sy <= 1e-12 * ny * ns:
            return False
        self.pairs.append((s, y, 1.0 / sy))
        return True

    def direction(self, g) -> np.ndarray:
        """Primal direction ``-H g`` from the two-loop recursion."""
        q = np.array(g, dtype=float)
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * float(s @ q)
            q -= a * y
            alphas.append(a)
        r = self.riesz(q)
        if self.pairs and self.cfg.scale_h0:
            s, y, rho = self.pairs[-1]
            r *= (1.0 / rho) / float(y @ self.riesz(y))
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * float(y @ r)
            r += (a - b) * s
        return -r


def minimize(fun, x0, riesz, cfg: OptimizerConfig = OptimizerConfig(), callback=None):
    """Minimise ``fun`` from ``x0``.

    ``fun(x)`` returns ``(f, grad)`` or ``(f, grad, info)`` with optional
    ``info["J"]``, ``info["R"]``.  Returns ``(x, trace)``.
    """
    x = np.array(x0, dtype=float)
    f, g, info = _call(fun, x)
    if not math.isfinite(f):
        raise OptimizationError("functional is not finite at the initial control")
    trace = OptimizerTrace()
    n_evals = 1
    gnorm0 = riesz.norm(g)
    f0 = f
    trace.rows.append(_row(0, f, info, gnorm0, 0.0, 0))
    if callback:
        callback(0, x, f)
    opt = LBFGS(riesz, cfg)
    status = "max_iter"

    for it in range(1, cfg.max_iter + 1):
        if gnorm0 == 0 or riesz.norm(g) <= cfg.gtol_rel * gnorm0:
            status = "gtol"
            break
        d = opt.direction(g)
        gd = float(g @ d)
        if not gd < 0:
            log.warning("iteration %d: not a descent direction, resetting memory", it)
            opt.reset()
            d = opt.direction(g)
            gd = float(g @ d)
            if not gd < 0:
                raise OptimizationError("no descent direction after memory reset")
        if opt.pairs:
            a1 = 1.0
        else:
            # first step: linear extrapolation of Ĵ >= 0 to twice its value drop
            a1 = -2.0 * f / gd if f > 0 else 1.0

        def phi(a, x=x, d=d):
            nonlocal n_evals
            n_evals += 1
            try:
                fa, ga, ia = _call(fun, x + a * d)
            except SolverError as exc:
                log.info("line search trial a=%.3e failed: %s", a, exc)
                return _Point(a, math.inf, math.nan)
            if not math.isfinite(fa):
                return _Point(a, math.inf, math.nan)
            return _Point(a, fa, float(ga @ d), ga, ia)

        pt, trials, ok = line_search(phi, f, gd, a1, cfg.c1, cfg.c2, cfg.max_ls_trials)
        if pt is None or not pt.f < f:
            log.warning("iteration %d: line search failed without progress", it)
            status = "line_search_failed"
            break
        s = pt.a * d
        y = pt.g - g
        opt.update(s, y)
        x = x + s
        f_old, f, g, info = f, pt.f, pt.g, pt.info
        trace.rows.append(_row(it, f, info, riesz.norm(g), pt.a, trials))
        if callback:
            callback(it, x, f)
        log.info("iter %3d  Jhat %.6e  step %.3e  trials %d", it, f, pt.a, trials)
        if not ok:
            log.warning("iteration %d: strong Wolfe conditions not met, returning best iterate", it)
            status = "line_search_failed"
            break
        if abs(f_old - f) <= cfg.ftol_rel * abs(f0):
            status = "ftol"
            break
    trace.status = status
    trace.n_evals = n_evals
    return x, trace
