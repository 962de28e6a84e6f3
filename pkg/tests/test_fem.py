import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from flow4dvar import fem
from flow4dvar.fem import Field, Space
from flow4dvar.mesh import Mesh, unit_square


def test_mass_total(channel):
    M = fem.assemble_mass(Space(unit_square(1), 1))
    assert M.sum() == pytest.approx(1.0, rel=1e-12)
    M = fem.assemble_mass(Space(channel, 1))
    assert M.sum() == pytest.approx(1.0, rel=1e-12)


def test_mass_row_sums_are_vertex_areas(channel):
    M = fem.assemble_mass(Space(channel, 1))
    lumped = np.zeros(channel.num_vertices)
    np.add.at(lumped, channel.cells.ravel(), np.repeat(channel.areas / 3.0, 3))
    assert np.allclose(np.asarray(M.sum(axis=1)).ravel(), lumped, rtol=1e-12)


def test_vector_mass_is_block_diagonal(channel):
    Ms = fem.assemble_mass(Space(channel, 1))
    Mv = fem.assemble_mass(Space(channel, 2))
    assert abs(Mv - sp.block_diag([Ms, Ms])).max() < 1e-15


def test_stiffness_kernel_and_energy(channel):
    K = fem.assemble_stiffness(Space(channel, 1), 1.0)
    assert np.abs(K @ np.ones(channel.num_vertices)).max() < 1e-12
    x = channel.vertices[:, 0]
    assert 0.5 * x @ (K @ x) == pytest.approx(0.5, rel=1e-12)
    w = np.linalg.eigvalsh(K.toarray())
    assert w[0] > -1e-12 and w[1] > 1e-6  # one-dimensional kernel on a connected mesh


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_stiffness_matches_cell_gradients(seed):
    m = unit_square(3)
    u = np.random.default_rng(seed).standard_normal(m.num_vertices)
    K = fem.assemble_stiffness(Space(m, 1), 2.5)
    grad = np.einsum("ca,cak->ck", u[m.cells], m.grad_basis)
    assert u @ (K @ u) == pytest.approx(2.5 * np.sum(m.areas * (grad ** 2).sum(axis=1)), rel=1e-12)


def test_symmetry(channel):
    for A in (fem.assemble_mass(Space(channel, 2)), fem.assemble_stiffness(Space(channel, 2), 1.0)):
        assert abs(A - A.T).max() < 1e-14 * abs(A).max()


def test_convection_zero_and_linear():
    m = unit_square(1)
    V = Space(m, 2)
    assert fem.assemble_convection(V, np.zeros(V.dimension)).nnz == 0
    # constant w = (a, b), u = (x, 2y): (w.∇)u = (a, 2 b); tested with v = (1, 0) and (0, 1)
    a, b = 0.7, -1.3
    w = V.interpolate(lambda x, y: (a + 0 * x, b + 0 * x))
    u = V.interpolate(lambda x, y: (x, 2 * y))
    r = fem.assemble_convection(V, w) @ u
    ones = np.ones(m.num_vertices)
    assert r[:4] @ ones == pytest.approx(a, abs=1e-14)
    assert r[4:] @ ones == pytest.approx(2 * b, abs=1e-14)


def test_convection_against_quadrature(channel):
    V = Space(channel, 2)
    rng = np.random.default_rng(3)
    w, u = rng.standard_normal(V.dimension), rng.standard_normal(V.dimension)
    nv = channel.num_vertices
    ones = np.concatenate([np.ones(nv), np.zeros(nv)])
    lhs = ones @ (fem.assemble_convection(V, w) @ u)
    # (w.∇u_x) integrated: ∇u_x constant per cell, w linear -> mean value is exact
    gx = np.einsum("ca,cak->ck", u[:nv][channel.cells], channel.grad_basis)
    wm = np.stack([w[:nv][channel.cells].mean(1), w[nv:][channel.cells].mean(1)], axis=1)
    assert lhs == pytest.approx(np.sum(channel.areas * (wm * gx).sum(1)), rel=1e-12)


def test_convection_derivative_is_jacobian(channel):
    V = Space(channel, 2)
    rng = np.random.default_rng(4)
    u, du = rng.standard_normal(V.dimension), rng.standard_normal(V.dimension)
    # d/du [C(u) u] = C(u) + D(u)
    J = fem.assemble_convection(V, u) + fem.assemble_convection_derivative(V, u)
    h = 1e-6
    fd = (fem.assemble_convection(V, u + h * du) @ (u + h * du) - fem.assemble_convection(V, u - h * du) @ (u - h * du)) / (2 * h)
    assert np.allclose(J @ du, fd, rtol=1e-7, atol=1e-9)


def test_divergence(channel):
    V, Q = Space(channel, 2), Space(channel, 1)
    B = fem.assemble_divergence(V, Q)
    u = V.interpolate(lambda x, y: (y, 0 * x))
    assert np.abs(B @ u).max() < 1e-12
    u = V.interpolate(lambda x, y: (x, y))
    Mq = fem.assemble_mass(Q)
    assert np.allclose(B @ u, 2 * Mq @ np.ones(Q.dimension), atol=1e-12)
    rng = np.random.default_rng(5)
    a, q = rng.standard_normal(V.dimension), rng.standard_normal(Q.dimension)
    assert (B @ a) @ q == pytest.approx(a @ (B.T @ q), rel=1e-12)


def test_pressure_stabilization(channel):
    Q = Space(channel, 1)
    S = fem.assemble_pressure_stabilization(Q, 1e-3)
    assert np.abs(S @ np.ones(Q.dimension)).max() < 1e-15
    assert np.linalg.eigvalsh(S.toarray()).max() < 1e-15
    # halving h (same reference cells, scaled geometry) scales the entries by 1/4
    small = channel.transformed(0.5 * np.eye(2))
    S2 = fem.assemble_pressure_stabilization(Space(small, 1), 1e-3)
    assert abs(S2 - 0.25 * S).max() < 1e-15
    with pytest.raises(fem.ConfigurationError):
        fem.assemble_pressure_stabilization(Q, 0.0)


def test_nitsche_symmetry_and_consistency(channel):
    V, Q = Space(channel, 2), Space(channel, 1)
    N = fem.assemble_nitsche_blocks(V, Q, ("inlet", "out1"), 3.5, 100.0, 0.5)
    assert abs(N.vv_new - N.vv_new.T).max() < 1e-12 * abs(N.vv_new).max()
    rng = np.random.default_rng(6)
    u = rng.standard_normal(V.dimension)
    u[V.vertex_dofs(channel.boundary_vertices("walls"))] = 0.0
    # g equal to the trace of u: symmetry and penalty terms cancel
    sym_pen = (N.vv_new + 0.5 * 3.5 * N.E) @ u  # vv_new without the consistency part
    assert np.allclose(sym_pen + N.gv @ u, 0, atol=1e-10)
    assert np.allclose(N.qv @ u + N.gq @ u, 0, atol=1e-12)


def test_nitsche_rejects_bad_parameters(channel):
    V, Q = Space(channel, 2), Space(channel, 1)
    with pytest.raises(fem.ConfigurationError):
        fem.assemble_nitsche_blocks(V, Q, ("inlet",), 3.5, 0.0, 0.5)
    with pytest.raises(fem.ConfigurationError):
        fem.assemble_nitsche_blocks(V, Q, ("inlet",), 3.5, 100.0, 0.0)


def test_boundary_dofs_walls_win(channel):
    V = Space(channel, 2)
    inlet = set(V.boundary_dofs("inlet"))
    walls = set(V.vertex_dofs(channel.boundary_vertices("walls")))
    assert inlet and not inlet & walls
    assert len(V.boundary_dofs("inlet")) == 2 * 3  # 5 inlet vertices minus the two corners


def test_quadrature_degree_four():
    m = unit_square(2)
    # int x^a y^b over the unit square = 1/((a+1)(b+1))
    for a in range(5):
        for b in range(5 - a):
            val = fem.integrate(m, lambda x, y: x ** a * y ** b)
            assert val == pytest.approx(1.0 / ((a + 1) * (b + 1)), rel=1e-12)


def test_field_validation():
    V = Space(unit_square(1), 2)
    Field(V, np.zeros(8))
    with pytest.raises(ValueError):
        Field(V, np.zeros(7))
    with pytest.raises(ValueError):
        Field(V, np.full(8, np.nan))


def test_assembly_is_deterministic(channel):
    V = Space(channel, 2)
    w = np.random.default_rng(0).standard_normal(V.dimension)
    A, B = fem.assemble_convection(V, w), fem.assemble_convection(V, w)
    assert np.array_equal(A.data, B.data) and np.array_equal(A.indices, B.indices)
