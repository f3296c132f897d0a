import numpy as np
import pytest

from mmparareal.errors import ConfigurationError, SolverDivergenceError
from mmparareal.grid import Mesh, MeshConfig, State, build_mesh, build_periodic_mesh
from mmparareal.solver import (Propagator, SolverParams, cell_velocities,
                               divergence, initial_state, kinetic_energy,
                               project, propagate, step, uniform_stream,
                               viscosity_from_reynolds)

from conftest import RE100_NU, random_state


def taylor_green(n, length=2 * np.pi):
    mesh = build_periodic_mesh(n, n, length, length)
    h = length / n
    xf = np.arange(n + 1) * h
    yc = (np.arange(n) + 0.5) * h
    u = np.sin(xf)[None, :] * np.cos(yc)[:, None]
    v = -np.cos(yc)[None, :] * np.sin(xf)[:, None]
    ux, uy = cell_velocities(mesh, u, v)
    return State(mesh, ux, uy, mesh.zeros(), u, v, 0.0)


def taylor_green_rate_error(n=64, nu=0.01, dt=0.01, t_end=1.0):
    """Relative deviation of the kinetic-energy decay rate from 4 nu k^2/2."""
    s0 = taylor_green(n)
    prop = Propagator(s0.mesh, SolverParams(nu=nu, dt=dt))
    s1 = prop.propagate(s0, 0.0, t_end)
    rate = -np.log(kinetic_energy(s1) / kinetic_energy(s0)) / t_end
    return rate / (4 * nu) - 1.0


def uniform_drift(steps=1000, dt=0.1):
    mesh = Mesh(64, 32, 32.0, 16.0)
    s0 = uniform_stream(mesh, 1.0)
    prop = Propagator(mesh, SolverParams(nu=RE100_NU, dt=dt))
    s = s0
    for _ in range(steps):
        s = prop.step(s)
    return max(np.abs(s.u - s0.u).max(), np.abs(s.v).max(), np.abs(s.ux - s0.ux).max())


@pytest.mark.parametrize("kw", [dict(nu=0.0, dt=0.1), dict(nu=0.1, dt=0.0),
                                dict(nu=0.1, dt=0.1, pressure_tol=0.0),
                                dict(nu=0.1, dt=0.1, upwind=1.5),
                                dict(nu=0.1, dt=0.1, pressure_solver="jacobi")])
def test_params_validation(kw):
    with pytest.raises(ConfigurationError):
        SolverParams(**kw)


def test_viscosity_from_reynolds():
    assert viscosity_from_reynolds(100) == 0.02
    assert viscosity_from_reynolds(1000) == 0.002


def test_uniform_stream_is_a_fixed_point():
    assert uniform_drift(steps=200) <= 1e-13


def test_taylor_green_decay_rate():
    assert abs(taylor_green_rate_error()) < 0.02


def test_taylor_green_initial_field_is_solenoidal():
    assert np.abs(divergence(taylor_green(32))).max() < 1e-12


def test_step_count_and_zero_interval(tiny_pair):
    prop = Propagator(tiny_pair.coarse, SolverParams(nu=RE100_NU, dt=0.1))
    assert prop.n_steps(0.0, 20.0) == 200
    s = initial_state(tiny_pair.coarse)
    assert prop.propagate(s, 3.0, 3.0) is s
    odd = Propagator(tiny_pair.coarse, SolverParams(nu=RE100_NU, dt=0.3))
    with pytest.raises(ConfigurationError):
        odd.n_steps(0.0, 1.0)


def test_propagate_counts_steps(tiny_pair):
    seen = []
    prop = Propagator(tiny_pair.fine, SolverParams(nu=RE100_NU, dt=0.05))
    out = prop.propagate(initial_state(tiny_pair.fine), 1.0, 2.0, seen.append)
    assert len(seen) == 20
    assert out.t == 2.0


def test_propagation_is_deterministic(tiny_pair):
    params = SolverParams(nu=RE100_NU, dt=0.05)
    s0 = initial_state(tiny_pair.fine)
    a = propagate(s0, 0.0, 1.0, params)
    b = Propagator(tiny_pair.fine, params).propagate(s0, 0.0, 1.0)
    assert a.bitwise_equal(b)


def test_step_enforces_boundary_conditions_and_continuity(desk_pair):
    mesh = desk_pair.fine
    params = SolverParams(nu=RE100_NU, dt=0.05)
    s = initial_state(mesh)
    for _ in range(20):
        s = step(s, params)
    assert np.abs(divergence(s)[mesh.fluid]).max() <= params.pressure_tol
    assert (s.u[mesh.u_fixed] == 0).all() and (s.v[mesh.v_fixed] == 0).all()
    assert (s.u[:, 0] == 1.0).all()
    assert (s.v[0] == 0).all() and (s.v[-1] == 0).all()
    # outflow balances inflow
    assert s.u[:, -1].sum() == pytest.approx(s.u[:, 0].sum(), rel=1e-10)
    assert np.isfinite(s.p).all()


def test_divergence_of_uniform_stream_is_zero():
    mesh = Mesh(64, 32, 32.0, 16.0)
    assert np.abs(divergence(uniform_stream(mesh))).max() < 1e-14


def test_projection_with_both_pressure_solvers(desk_pair, rng):
    s = random_state(desk_pair.coarse, rng)
    s.u[:, 0] = 1.0
    for method in ("direct", "cg"):
        prop = Propagator(desk_pair.coarse,
                          SolverParams(nu=RE100_NU, dt=0.1, pressure_solver=method))
        u, v, _ = prop.pressure.project(s.u, s.v, 0.1)
        assert np.abs(divergence((u, v), desk_pair.coarse)).max() <= 1e-8
    assert np.abs(divergence(project(s))).max() <= 1e-8


def test_early_time_mirror_symmetry():
    mesh = build_mesh(MeshConfig())
    params = SolverParams(nu=RE100_NU, dt=0.05)
    s = initial_state(mesh, perturbation=0.0)
    rows = mesh.mirror_index()
    for _ in range(10):
        s = step(s, params)
        assert np.abs(s.ux - s.ux[rows]).max() <= 1e-10
        assert np.abs(s.uy + s.uy[rows]).max() <= 1e-10
        assert np.abs(s.p - s.p[rows]).max() <= 1e-10


def test_nan_raises_divergence_error(tiny_pair):
    s = initial_state(tiny_pair.fine)
    s.ux[3, 3] = s.u[3, 3] = np.nan
    with pytest.raises(SolverDivergenceError):
        step(s, SolverParams(nu=RE100_NU, dt=0.05))


def test_initial_state_has_kick_and_is_projected(desk_pair):
    s = initial_state(desk_pair.fine)
    assert np.abs(s.v).max() > 5e-4
    assert np.abs(divergence(s)).max() <= 1e-8
    quiet = initial_state(desk_pair.fine, perturbation=0.0)
    assert np.abs(s.v - quiet.v).max() > 5e-4
    rows = desk_pair.fine.mirror_index()
    assert np.abs(quiet.ux - quiet.ux[rows]).max() < 1e-12


@pytest.mark.slow
def test_full_resolution_is_stable():
    mesh = build_mesh(MeshConfig(nx=256, ny=128))
    prop = Propagator(mesh, SolverParams(nu=RE100_NU, dt=0.05))
    s = prop.propagate(initial_state(mesh), 0.0, 200.0)
    assert s.is_finite()
