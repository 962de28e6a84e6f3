import numpy as np
import pytest

from flow4dvar.control import RegularisationConfig
from flow4dvar.forward import FlowProblem, ModelConfig
from flow4dvar.mesh import BifurcationParams, generate_bifurcation, reconstruction_domain, unit_square
from flow4dvar.observe import Observer, even_times
from flow4dvar.reduced import ReducedFunctional
from flow4dvar.twin import generate_truth, transfer

# ~500-cell reconstruction domain used by the gradient tests
SMALL_GEOMETRY = BifurcationParams().scaled(0.5, 0.35)


@pytest.fixture(scope="session")
def channel():
    """4x4 square: inlet on the left, traction-free out2 on the right, walls elsewhere (32 cells)."""
    return unit_square(4, "walls", {"left": "inlet", "right": "out2"})


@pytest.fixture(scope="session")
def small_ext():
    return generate_bifurcation(SMALL_GEOMETRY, with_extension=True)


@pytest.fixture(scope="session")
def small_rec(small_ext):
    return reconstruction_domain(small_ext)


@pytest.fixture(scope="session")
def small_twin(small_ext, small_rec):
    """Five-step twin problem on the small bifurcation."""
    cfg = ModelConfig(dt=0.037, T=0.185)
    truth = transfer(generate_truth(small_ext, cfg), small_ext, small_rec)
    observer = Observer(small_rec)
    obs = observer.observe(truth, "instantaneous", even_times(cfg.T, cfg.dt, 5))
    problem = FlowProblem(small_rec, cfg)
    rf = ReducedFunctional(problem, obs, RegularisationConfig(1e-5, 1e-5), observer)
    return {"cfg": cfg, "truth": truth, "obs": obs, "problem": problem, "rf": rf, "observer": observer}


def smooth_control(rf, seed, amplitude=100.0):
    """Random control with H1-smooth coefficients of roughly ``amplitude`` mm/s."""
    from flow4dvar.verify import random_direction

    d = random_direction(rf.size, seed, rf.space.riesz)
    return amplitude * d / np.abs(d).max()
