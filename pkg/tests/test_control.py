import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flow4dvar.control import (Control, ControlSpace, EuclideanRiesz, RegularisationConfig, load_control,
                               save_control)
from flow4dvar.fem import ConfigurationError
from flow4dvar.forward import FlowProblem, ModelConfig
from flow4dvar.mesh import unit_square


@pytest.fixture(scope="module")
def space():
    mesh = unit_square(4, "walls", {"left": "inlet", "right": "out2"})
    return ControlSpace(FlowProblem(mesh, ModelConfig(dt=0.1, T=0.4)))


@pytest.fixture(scope="module")
def wall_free_space():
    # no walls: every Γ_D vertex carries boundary data, so constant g is exactly representable
    mesh = unit_square(4, "inlet", {"right": "out2"})
    return ControlSpace(FlowProblem(mesh, ModelConfig(dt=0.1, T=0.4)))


def _random(space, seed):
    return np.random.default_rng(seed).standard_normal(space.size)


def test_zero_control(space):
    cfg = RegularisationConfig(1.0, 1.0)
    x = np.zeros(space.size)
    assert space.regularisation_value(x, cfg) == 0.0
    assert not np.any(space.regularisation_gradient(x, cfg))


def test_constant_boundary_data_closed_form(wall_free_space):
    cs = wall_free_space
    P = cs.problem
    c = 3.0
    x = np.zeros(cs.size)
    g = x[cs.nu0:].reshape(cs.K, cs.ng)
    g[:, P.g_dofs < P.nv] = c  # x component only
    length = P.mesh.facet_lengths[P.mesh.facets_with("inlet")].sum()
    alpha = 0.7
    val = cs.regularisation_value(x, RegularisationConfig(alpha, 0.0))
    dt, T = P.cfg.dt, P.cfg.T
    expected = 0.5 * alpha * dt * (c / dt) ** 2 * length + 0.5 * alpha * T * c ** 2 * length
    assert val == pytest.approx(expected, rel=1e-12)


def test_value_matches_hessian_form(space):
    cfg = RegularisationConfig(0.3, 2.0)
    x = _random(space, 1)
    H = space.hessian(cfg.alpha, cfg.gamma)
    assert space.regularisation_value(x, cfg) == pytest.approx(0.5 * x @ (H @ x), rel=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 10), st.floats(0, 10))
def test_quadratic_homogeneity(seed, alpha, gamma):
    cs = _SPACE
    cfg = RegularisationConfig(alpha, gamma)
    x = _random(cs, seed)
    R = cs.regularisation_value(x, cfg)
    assert cs.regularisation_gradient(x, cfg) @ x == pytest.approx(2 * R, rel=1e-12, abs=1e-300)


_SPACE = ControlSpace(FlowProblem(unit_square(3, "walls", {"left": "inlet", "right": "out2"}),
                                  ModelConfig(dt=0.1, T=0.3)))


def test_gradient_matches_central_differences(space):
    cfg = RegularisationConfig(1e-2, 3.0)
    x, d = _random(space, 2), _random(space, 3)
    h = 1e-4
    fd = (space.regularisation_value(x + h * d, cfg) - space.regularisation_value(x - h * d, cfg)) / (2 * h)
    assert fd == pytest.approx(space.regularisation_gradient(x, cfg) @ d, rel=1e-7)


def test_riesz_roundtrip_and_spd(space):
    R = space.riesz
    m = _random(space, 4)
    assert np.allclose(R(R.inverse(m)), m, rtol=0, atol=1e-10 * np.abs(m).max())
    for seed in range(5):
        g = _random(space, 10 + seed)
        assert g @ R(g) > 0


def test_riesz_is_self_adjoint(space):
    R = space.riesz
    a, b = _random(space, 5), _random(space, 6)
    assert a @ R(b) == pytest.approx(b @ R(a), rel=1e-12)


def test_inner_product_is_the_unweighted_form(space):
    a, b = _random(space, 7), _random(space, 8)
    alpha, gamma = 1e-5, 1e-3
    H = space.hessian(alpha, gamma)
    # the two forms agree once the weights are divided out block by block
    ab = a @ (H @ b)
    parts = alpha * (a @ (space.boundary_form @ b)) + gamma * (a @ (space.initial_form @ b))
    assert ab == pytest.approx(parts, rel=1e-12)
    assert space.inner(a, b) == pytest.approx(a @ (space.boundary_form @ b) + a @ (space.initial_form @ b),
                                              rel=1e-12)


def test_anchor_couples_initial_trace(space):
    x = np.zeros(space.size)
    x[: space.nu0] = np.random.default_rng(9).standard_normal(space.nu0)
    cfg = RegularisationConfig(1.0, 0.0)
    # with g_0 = trace(u0) the first time difference sees u0 on Γ_D
    assert space.regularisation_value(x, cfg) > 0
    one_sided = ControlSpace(space.problem, anchor_initial_trace=False)
    assert one_sided.regularisation_value(x, cfg) == 0.0
    y = _random(space, 12)
    assert one_sided.regularisation_value(y, cfg) == pytest.approx(0.5 * y @ (one_sided.hessian(1, 0) @ y),
                                                                   rel=1e-12)


def test_layout_roundtrip(space):
    x = _random(space, 13)
    m = space.from_vector(x)
    assert not np.any(m.u0[space.problem.wall_dofs])
    assert np.array_equal(space.to_vector(m), x)
    with pytest.raises(ValueError):
        space.from_vector(x[:-1])
    with pytest.raises(ValueError):
        space.to_vector(Control(m.u0, m.g[:-1]))


def test_negative_weights_rejected():
    with pytest.raises(ConfigurationError):
        RegularisationConfig(-1.0, 0.0)


def test_euclidean_hook():
    E = EuclideanRiesz(4)
    g = np.array([1.0, -2.0, 0.5, 3.0])
    assert np.array_equal(E(g), g) and E.norm(g) == pytest.approx(np.linalg.norm(g))


def test_control_checkpoint_roundtrip(tmp_path, space):
    m = space.from_vector(_random(space, 14))
    save_control(m, tmp_path / "c.bin", "abc")
    back, meta = load_control(tmp_path / "c.bin")
    assert np.array_equal(back.u0, m.u0) and np.array_equal(back.g, m.g)
    assert meta["mesh_hash"] == "abc"
    save_control(back, tmp_path / "c2.bin", "abc")
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "c2.bin").read_bytes()
