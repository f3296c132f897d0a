import numpy as np
import pytest

from mmparareal.grid import MeshConfig, State, build_mesh_pair
from mmparareal.solver import Propagator, SolverParams, initial_state

RE100_NU = 0.02
TINY = MeshConfig(nx=32, ny=16)


def random_state(mesh, rng, t=0.0):
    """Arbitrary cell and face values, zero inside the mask."""
    fluid = mesh.fluid

    def cells():
        return rng.standard_normal((mesh.ny, mesh.nx)) * fluid

    u = rng.standard_normal((mesh.ny, mesh.nx + 1))
    v = rng.standard_normal((mesh.ny + 1, mesh.nx))
    u[mesh.u_fixed] = 0.0
    v[mesh.v_fixed] = 0.0
    return State(mesh, cells(), cells(), cells(), u, v, t)


@pytest.fixture(scope="session")
def desk_pair():
    return build_mesh_pair(MeshConfig())


@pytest.fixture(scope="session")
def tiny_pair():
    return build_mesh_pair(TINY)


@pytest.fixture(scope="session")
def re100_snapshots(desk_pair):
    """Serial Re=100 fine and coarse states at t=20 on the desk meshes."""
    fine = Propagator(desk_pair.fine, SolverParams(nu=RE100_NU, dt=0.05))
    coarse = Propagator(desk_pair.coarse, SolverParams(nu=RE100_NU, dt=0.1))
    f = fine.propagate(initial_state(desk_pair.fine), 0.0, 20.0)
    g = coarse.propagate(initial_state(desk_pair.coarse), 0.0, 20.0)
    return g, f


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
