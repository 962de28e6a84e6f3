"""Taylor remainder tests for reduced gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class TaylorResult:
    h: np.ndarray
    r0: np.ndarray  # |Ĵ(m + h dm) - Ĵ(m)|
    r1: np.ndarray  # |Ĵ(m + h dm) - Ĵ(m) - h <dĴ, dm>|
    orders0: list  # log2 ratios; None where the remainder hit roundoff
    orders1: list
    value: float
    slope: float

    @property
    def min_order(self) -> float:
        vals = [o for o in self.orders1 if o is not None]
        return min(vals) if vals else math.nan

    def report(self, label: str = "") -> str:
        lines = [f"taylor test {label}".rstrip(), f"J(m) = {self.value!r}", f"<dJ, dm> = {self.slope!r}",
                 f"{'h':>12} {'r0':>14} {'order0':>8} {'r1':>14} {'order1':>8}"]
        for i, h in enumerate(self.h):
            o0 = o1 = ""
            if i > 0:
                o0 = "roundoff" if self.orders0[i - 1] is None else f"{self.orders0[i - 1]:.4f}"
                o1 = "roundoff" if self.orders1[i - 1] is None else f"{self.orders1[i - 1]:.4f}"
            lines.append(f"{h:12.4e} {self.r0[i]:14.6e} {o0:>8} {self.r1[i]:14.6e} {o1:>8}")
        return "\n".join(lines) + "\n"


def _orders(r, floor):
    out = []
    for a, b in zip(r[:-1], r[1:]):
        if b <= floor or a <= floor:
            out.append(None)
        else:
            out.append(math.log2(a / b))
    return out


def taylor_test(evaluator, m, dm, h0: float = 1.0, levels: int = 5, negate: bool = False,
                value=None) -> TaylorResult:
    """Remainders at ``h0, h0/2, ...`` (``levels`` values) and their log2 ratios.

    ``evaluator(x)`` returns ``(Ĵ, grad[, info])``; ``value(x)`` may be given
    as a cheaper value-only callable.  ``negate`` flips the gradient (a hook
    for checking that the harness catches a wrong derivative).
    """
    if levels < 3:
        raise ValueError("need at least 3 levels")
    dm = np.asarray(dm, dtype=float)
    if not np.any(dm):
        raise ValueError("perturbation must be nonzero")
    m = np.asarray(m, dtype=float)
    out = evaluator(m)
    J0, g = out[0], np.asarray(out[1])
    if negate:
        g = -g
    value = value or (lambda x: evaluator(x)[0])
    slope = float(g @ dm)
    h = h0 * 0.5 ** np.arange(levels)
    Jh = np.array([value(m + hi * dm) for hi in h])
    r0 = np.abs(Jh - J0)
    r1 = np.abs(Jh - J0 - h * slope)
    floor = 1e-14 * abs(J0)
    return TaylorResult(h, r0, r1, _orders(r0, floor), _orders(r1, floor), float(J0), slope)


def random_direction(size: int, seed: int = 0, riesz=None, block=None) -> np.ndarray:
    """Seeded random direction normalised in the M-norm; ``block`` (a slice)
    restricts it to one part of the control."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(size)
    if block is not None:
        mask = np.zeros(size, dtype=bool)
        mask[block] = True
        d[~mask] = 0.0
    if riesz is not None:
        # smooth the coefficients: the primal representative of a random dual vector
        d = riesz(d)
        if block is not None:
            d[~mask] = 0.0
        nrm = math.sqrt(float(d @ riesz.inverse(d)))
    else:
        nrm = float(np.linalg.norm(d))
    return d / nrm
