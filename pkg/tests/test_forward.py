import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from flow4dvar import fem
from flow4dvar.fem import Space
from flow4dvar.forward import (FlowProblem, FlowState, ModelConfig, SolverError, load_trajectory,
                               save_trajectory, step)
from flow4dvar.mesh import unit_square
from flow4dvar.twin import generate_truth, parabolic_profile, pulse


def _inflow(problem, peak=10.0):
    return parabolic_profile(problem.mesh, "inlet", peak, True)


def test_config_validation():
    with pytest.raises(fem.ConfigurationError):
        ModelConfig(dt=0.01, T=0.055)
    with pytest.raises(fem.ConfigurationError):
        ModelConfig(theta=0.0)
    with pytest.raises(fem.ConfigurationError):
        ModelConfig(sigma=-1.0)
    assert ModelConfig().K == 120
    assert ModelConfig().theta == 0.5


def test_zero_is_fixed_point(channel):
    P = FlowProblem(channel, ModelConfig(dt=0.1, T=0.3))
    s = step(P, FlowState(np.zeros(2 * P.nv), np.zeros(P.nv)), np.zeros(P.ng))
    assert not np.any(s.u) and not np.any(s.p)
    traj = P.solve(np.zeros(2 * P.nv), np.zeros((3, P.ng)))
    assert not np.any(traj.U) and not np.any(traj.P)


def test_stokes_step_matches_direct_solve(channel):
    cfg = ModelConfig(dt=0.05, T=0.1, convection=False)
    P = FlowProblem(channel, cfg)
    rng = np.random.default_rng(0)
    u0 = rng.standard_normal(2 * P.nv)
    u0[P.wall_dofs] = 0.0
    g1 = _inflow(P)[P.g_dofs]
    s = step(P, FlowState(u0, np.zeros(P.nv)), g1)
    # one-shot linear system assembled from the fem pieces
    V, Q = Space(channel, 2), Space(channel, 1)
    th, nu, dt = cfg.theta, cfg.nu, cfg.dt
    Mm, K = fem.assemble_mass(V), fem.assemble_stiffness(V, 1.0)
    B = fem.assemble_divergence(V, Q)
    S = fem.assemble_pressure_stabilization(Q, cfg.beta)
    facets = channel.facets_with("inlet")
    E = fem.assemble_normal_derivative(V, facets)
    G = fem.assemble_normal_pressure(V, Q, facets)
    Pen = fem.assemble_boundary_mass(V, facets, nu * cfg.sigma / channel.facet_h[facets])
    g = np.zeros(2 * P.nv)
    g[P.g_dofs] = g1
    A = sp.bmat([[Mm / dt + th * nu * K - th * nu * (E + E.T) + Pen, -B.T + G], [-B + G.T, S]]).tocsr()
    rhs = np.concatenate([Mm @ u0 / dt - (1 - th) * nu * (K @ u0) + (1 - th) * nu * (E @ u0)
                          - th * nu * (E.T @ g) + Pen @ g, G.T @ g])
    free = np.concatenate([P.free_u, 2 * P.nv + np.arange(P.nv)])
    x = spla.spsolve(A[free][:, free].tocsc(), rhs[free])
    assert np.abs(np.concatenate([s.u[P.free_u], s.p]) - x).max() <= 1e-10 * (1 + np.abs(x).max())


def test_jacobians_match_finite_differences(channel):
    P = FlowProblem(channel, ModelConfig(dt=0.05, T=0.1))
    rng = np.random.default_rng(1)
    x1 = 50 * rng.standard_normal(P.n)
    u0 = P.full_u(50 * rng.standard_normal(P.nuf))
    g1 = 50 * rng.standard_normal(P.ng)
    u1 = P.full_u(x1[: P.nuf])
    dx = rng.standard_normal(P.n)
    du = rng.standard_normal(P.nuf)
    h = 1e-5
    fd1 = (P.residual(x1 + h * dx, u0, g1) - P.residual(x1 - h * dx, u0, g1)) / (2 * h)
    assert np.allclose(P.jacobian_new(u1, u0) @ dx, fd1, rtol=1e-7, atol=1e-7 * np.abs(fd1).max())
    fd0 = (P.residual(x1, u0 + P.full_u(h * du), g1) - P.residual(x1, u0 - P.full_u(h * du), g1)) / (2 * h)
    assert np.allclose(P.jacobian_old(u1, u0) @ du, fd0, rtol=1e-7, atol=1e-7 * np.abs(fd0).max())
    dg = rng.standard_normal(P.ng)
    fdg = (P.residual(x1, u0, g1 + h * dg) - P.residual(x1, u0, g1 - h * dg)) / (2 * h)
    assert np.allclose(P.G_map @ dg, fdg, rtol=1e-7, atol=1e-9 * np.abs(fdg).max())


def test_converged_steps_satisfy_the_discrete_system(small_ext):
    traj = generate_truth(small_ext, ModelConfig(dt=0.037, T=0.185))
    from dataclasses import replace
    P = FlowProblem(small_ext, replace(ModelConfig(dt=0.037, T=0.185), outlet="out2"))
    from flow4dvar.twin import TruthConfig, truth_boundary_data
    G_tr = truth_boundary_data(P, TruthConfig())
    for k in range(traj.K):
        r = P.residual(P.state_vector(traj, k + 1), traj.U[k], G_tr[k])
        unorm = np.linalg.norm(traj.U[k + 1])
        # pressure rows: weak incompressibility
        assert np.linalg.norm(r[P.nuf:]) <= 1e-10 * (1 + unorm)
        # momentum rows: relative to the size of the time-derivative term
        scale = np.linalg.norm(P.M @ traj.U[k + 1]) / P.cfg.dt
        assert np.linalg.norm(r) <= 1e-10 * scale
        assert not np.any(traj.U[k + 1][P.wall_dofs])


def test_pulse_protocol(small_ext):
    traj = generate_truth(small_ext, ModelConfig(dt=0.037, T=0.555))
    M = fem.assemble_mass(Space(small_ext, 2))
    speed = np.sqrt(np.einsum("ki,ki->k", traj.U, (M @ traj.U.T).T))
    k = int(np.argmax(speed))
    assert 0 < k < traj.K
    assert speed[-1] < 0.8 * speed[k]
    assert 0.1 < traj.times[k] < 0.4  # the inflow pulse peaks at t = 1 - 0.5**(1/3) ≈ 0.21


def test_second_order_in_time():
    # time-dependent forcing, walls and a natural outlet; stabilisation switched
    # down so that only the theta-scheme itself is measured
    mesh = unit_square(6, "walls", {"right": "out2"})
    finals = []
    for dt in (0.04, 0.02, 0.01, 0.005):
        P = FlowProblem(mesh, ModelConfig(nu=0.5, dt=dt, T=0.4, beta=1e-8))
        f = P.V.interpolate(lambda x, y: (np.sin(np.pi * y) * np.sin(np.pi * x), np.sin(2 * np.pi * x) * y))
        base = np.zeros(P.n)
        base[: P.nuf] = (P.M @ f)[P.free_u]
        u, x = np.zeros(2 * P.nv), None
        for k in range(P.cfg.K):
            P.load = 200 * np.sin(np.pi * (k + 0.5) * dt / 0.8) ** 2 * base
            x, _ = P.solve_step(u, np.zeros(P.ng), x)
            u = P.full_u(x[: P.nuf])
        finals.append(u)
    d = [np.linalg.norm(a - b) for a, b in zip(finals[:-1], finals[1:])]
    orders = np.log2(np.array(d[:-1]) / np.array(d[1:]))
    assert orders.min() >= 1.8


def test_time_error_of_boundary_terms_vanishes_under_refinement():
    # penalty, stabilisation and pressure act at t_{k+1}, which leaves an
    # O(dt) term whose size shrinks with h
    diffs = []
    for n in (6, 12):
        mesh = unit_square(n, "walls", {"left": "inlet", "right": "out2"})
        finals = []
        for dt in (0.01, 0.005):
            P = FlowProblem(mesh, ModelConfig(dt=dt, T=0.4))
            prof = _inflow(P, 50.0)[P.g_dofs]
            G = np.sin(np.pi * P.cfg.times[1:] / 0.8)[:, None] ** 2 * prof
            finals.append(P.solve(np.zeros(2 * P.nv), G).U[-1])
        e = finals[0] - finals[1]
        rel = np.sqrt(e @ (P.M @ e) / (finals[1] @ (P.M @ finals[1])))
        diffs.append(rel)
    assert diffs[0] < 1e-5
    assert diffs[1] < 0.5 * diffs[0]


def test_boundary_fidelity_improves_with_refinement():
    errs = []
    for n in (4, 8, 16):
        mesh = unit_square(n, "walls", {"left": "inlet", "right": "out2"})
        P = FlowProblem(mesh, ModelConfig(dt=0.05, T=0.25))
        prof = _inflow(P, 20.0)
        G = np.tile(prof[P.g_dofs], (P.cfg.K, 1))
        traj = P.solve(np.zeros(2 * P.nv), G)
        facets = mesh.facets_with("inlet")
        Mb = fem.assemble_boundary_mass(P.V, facets)
        e = traj.U[-1] - prof
        e[P.wall_dofs] = 0.0
        errs.append(np.sqrt(e @ (Mb @ e)))
    assert errs[1] < 0.8 * errs[0] and errs[2] < 0.8 * errs[1]


def test_newton_failure_is_reported(channel):
    P = FlowProblem(channel, ModelConfig(dt=0.5, T=0.5, newton_max_iter=1, newton_atol=1e-14, newton_rtol=1e-16))
    g = 1e4 * np.ones((1, P.ng))
    with pytest.raises(SolverError) as err:
        P.solve(np.zeros(2 * P.nv), g)
    assert err.value.step == 1 and err.value.residual > 0


def test_stokes_hook_removes_convection(channel):
    P = FlowProblem(channel, ModelConfig(dt=0.05, T=0.05, convection=False))
    x = np.random.default_rng(2).standard_normal(P.n)
    u0 = np.zeros(2 * P.nv)
    # residual is affine in x without convection
    r0 = P.residual(np.zeros(P.n), u0, np.zeros(P.ng))
    assert np.allclose(P.residual(2 * x, u0, np.zeros(P.ng)) - r0,
                       2 * (P.residual(x, u0, np.zeros(P.ng)) - r0))


def test_trajectory_checkpoint_roundtrip(tmp_path, channel):
    P = FlowProblem(channel, ModelConfig(dt=0.05, T=0.15))
    G = np.tile(_inflow(P)[P.g_dofs], (3, 1))
    traj = P.solve(np.zeros(2 * P.nv), G)
    save_trajectory(traj, tmp_path / "t.bin")
    back = load_trajectory(tmp_path / "t.bin")
    assert np.array_equal(back.U, traj.U) and np.array_equal(back.P, traj.P)
    assert back.dt == traj.dt and back.mesh_hash == channel.hash
    save_trajectory(back, tmp_path / "t2.bin")
    assert (tmp_path / "t.bin").read_bytes() == (tmp_path / "t2.bin").read_bytes()


def test_pulse_shape():
    assert pulse(0.0) == pytest.approx(0.0, abs=1e-15)
    t_peak = 1 - 0.5 ** (1 / 3)
    assert pulse(t_peak) == pytest.approx(1.0)
