"""Channel geometry, masked cylinder and field storage on a MAC grid.

Grid layout (row-major, bottom row first)::

    p, Ux, Uy [j, i]   cell centres   x=(i+1/2)dx, y=(j+1/2)dy   shape (ny, nx)
    u [j, i]           x-faces        x=i dx,      y=(j+1/2)dy   shape (ny, nx+1)
    v [j, i]           y-faces        x=(i+1/2)dx, y=j dy        shape (ny+1, nx)

The cylinder is a stair-step mask: a cell is SOLID when its centre lies inside
(or on) the circle.  Every face touching a SOLID cell carries zero velocity.
"""

import functools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "MeshConfig", "Mesh", "MeshPair", "SurfaceFaces", "State",
    "build_mesh", "build_mesh_pair", "build_periodic_mesh", "classify_cells",
    "cfl_number", "VARIABLES",
]

# Cell-centred prognostic variables, in report order.
VARIABLES = ("Ux", "Uy", "p")


@dataclass(frozen=True)
class MeshConfig:
    length: float = 32.0
    height: float = 16.0
    cyl_x: float = 8.0
    cyl_y: float = 8.0
    radius: float = 1.0
    nx: int = 128
    ny: int = 64
    coarsening: int = 2

    def validate(self):
        if self.length <= 0 or self.height <= 0:
            raise ConfigurationError("channel length and height must be positive")
        if self.radius <= 0:
            raise ConfigurationError("cylinder radius must be positive")
        clearance = min(self.cyl_x, self.length - self.cyl_x,
                        self.cyl_y, self.height - self.cyl_y)
        if not self.radius < clearance:
            raise ConfigurationError(
                f"cylinder (centre ({self.cyl_x}, {self.cyl_y}), radius "
                f"{self.radius}) does not fit strictly inside the channel")
        if self.coarsening < 2:
            raise ConfigurationError("coarsening factor must be >= 2")
        if self.nx <= 0 or self.ny <= 0:
            raise ConfigurationError("cell counts must be positive")
        if self.nx % self.coarsening or self.ny % self.coarsening:
            raise ConfigurationError(
                f"cell counts ({self.nx}, {self.ny}) are not divisible by the "
                f"coarsening factor {self.coarsening}")

    @property
    def diameter(self):
        return 2.0 * self.radius


class SurfaceFaces(NamedTuple):
    """Fluid/solid interfaces of the stair-step cylinder.

    ``j, i`` index the FLUID cell owning the face; ``normal`` is the outward
    body normal (pointing into that cell); ``area`` is the face length per unit
    depth and ``distance`` the centre-to-face distance used for wall gradients.
    """
    j: np.ndarray
    i: np.ndarray
    normal: np.ndarray
    area: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.j)

    @property
    def total_area(self):
        return float(self.area.sum())


def classify_cells(nx, ny, dx, dy, center, radius):
    """Return the SOLID mask and the cylinder surface faces.

    A cell is SOLID iff ``(x - cx)^2 + (y - cy)^2 <= radius^2`` at its centre.
    """
    cx, cy = center
    # offsets computed in index space keep the mask mirror-symmetric
    ox = (np.arange(nx) + 0.5 - cx / dx) * dx
    oy = (np.arange(ny) + 0.5 - cy / dy) * dy
    solid = oy[:, None] ** 2 + ox[None, :] ** 2 <= radius * radius

    fluid = ~solid
    js, is_, normals, areas, dists = [], [], [], [], []
    # (dj, di) points from the fluid cell towards the solid neighbour
    for dj, di, area, dist in ((0, -1, dy, dx / 2), (0, 1, dy, dx / 2),
                               (-1, 0, dx, dy / 2), (1, 0, dx, dy / 2)):
        nb = np.zeros_like(solid)
        src = solid[max(dj, 0):ny + min(dj, 0), max(di, 0):nx + min(di, 0)]
        nb[max(-dj, 0):ny + min(-dj, 0), max(-di, 0):nx + min(-di, 0)] = src
        jj, ii = np.nonzero(fluid & nb)
        js.append(jj)
        is_.append(ii)
        normals.append(np.tile([-di, -dj], (len(jj), 1)).astype(float))
        areas.append(np.full(len(jj), area))
        dists.append(np.full(len(jj), dist))
    surface = SurfaceFaces(np.concatenate(js), np.concatenate(is_),
                           np.concatenate(normals).reshape(-1, 2),
                           np.concatenate(areas), np.concatenate(dists))
    return solid, surface


def _readonly(a):
    a.setflags(write=False)
    return a


class Mesh:
    """One uniform Cartesian level of the channel, immutable after creation."""

    def __init__(self, nx, ny, length, height, center=None, radius=None,
                 periodic=False):
        self.nx, self.ny = int(nx), int(ny)
        self.length, self.height = float(length), float(height)
        self.dx = self.length / self.nx
        self.dy = self.height / self.ny
        self.periodic = periodic
        self.center = center
        self.radius = radius
        self.x = _readonly((np.arange(self.nx) + 0.5) * self.dx)
        self.y = _readonly((np.arange(self.ny) + 0.5) * self.dy)

        if center is None:
            solid = np.zeros((self.ny, self.nx), dtype=bool)
            empty = np.zeros(0)
            surface = SurfaceFaces(empty.astype(int), empty.astype(int),
                                   np.zeros((0, 2)), empty, empty)
        else:
            solid, surface = classify_cells(self.nx, self.ny, self.dx,
                                            self.dy, center, radius)
            ring = np.concatenate([solid[0], solid[-1], solid[:, 0], solid[:, -1]])
            if ring.any():
                raise ConfigurationError(
                    "cylinder mask touches the domain boundary at this resolution")
        self.solid = _readonly(solid)
        self.fluid = _readonly(~solid)
        self.surface = surface

        u_fixed = np.zeros((self.ny, self.nx + 1), dtype=bool)
        u_fixed[:, :-1] |= solid
        u_fixed[:, 1:] |= solid
        v_fixed = np.zeros((self.ny + 1, self.nx), dtype=bool)
        v_fixed[:-1, :] |= solid
        v_fixed[1:, :] |= solid
        self.u_fixed = _readonly(u_fixed)
        self.v_fixed = _readonly(v_fixed)

    def __repr__(self):
        kind = "periodic" if self.periodic else "channel"
        return (f"Mesh({kind}, {self.nx}x{self.ny}, dx={self.dx:g}, "
                f"solid={int(self.solid.sum())})")

    @property
    def n_cells(self):
        return self.nx * self.ny

    @property
    def cell_area(self):
        return self.dx * self.dy

    def zeros(self):
        return np.zeros((self.ny, self.nx))

    def mirror_index(self):
        """Row permutation reflecting cell rows about the channel centreline."""
        return np.arange(self.ny)[::-1]


class MeshPair:
    """Fine mesh and its ``factor``-times coarser parent."""

    def __init__(self, fine, coarse, factor):
        if fine.nx != coarse.nx * factor or fine.ny != coarse.ny * factor:
            raise ConfigurationError("meshes are not nested by the given factor")
        self.fine, self.coarse, self.factor = fine, coarse, factor

    def parent(self, j, i):
        """Coarse parent of fine cell ``(j, i)``."""
        return j // self.factor, i // self.factor

    def parent_map(self):
        """Flat coarse index of every fine cell, shape (fine.ny, fine.nx)."""
        jj, ii = np.indices((self.fine.ny, self.fine.nx))
        return (jj // self.factor) * self.coarse.nx + ii // self.factor

    def check(self, fine_state=None, coarse_state=None):
        if fine_state is not None and fine_state.mesh is not self.fine:
            raise ConfigurationError("state does not live on the fine mesh of this pair")
        if coarse_state is not None and coarse_state.mesh is not self.coarse:
            raise ConfigurationError("state does not live on the coarse mesh of this pair")


def build_mesh(config, level=0):
    """Mesh of ``config`` coarsened ``level`` times.

    Meshes are immutable, so equal configurations share one instance.
    """
    return _cached_mesh(config, int(level))


@functools.lru_cache(maxsize=64)
def _cached_mesh(config, level):
    config.validate()
    c = config.coarsening ** level
    return Mesh(config.nx // c, config.ny // c, config.length, config.height,
                center=(config.cyl_x, config.cyl_y), radius=config.radius)


@functools.lru_cache(maxsize=64)
def build_mesh_pair(config):
    config.validate()
    return MeshPair(build_mesh(config, 0), build_mesh(config, 1), config.coarsening)


def build_periodic_mesh(nx, ny, length, height):
    """Doubly periodic box without obstacle (solver verification only)."""
    return Mesh(nx, ny, length, height, periodic=True)


@dataclass(eq=False)
class State:
    """Full flow state on one mesh level at time ``t``.

    ``ux, uy, p`` are the cell-centred variables exchanged between levels;
    ``u, v`` are the face-normal velocities, i.e. the face fluxes divided by
    the face length.
    """
    mesh: Mesh
    ux: np.ndarray
    uy: np.ndarray
    p: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    _arrays = ("ux", "uy", "p", "u", "v")

    @property
    def phi(self):
        """Face fluxes per unit depth: ``(u * dy, v * dx)``."""
        return self.u * self.mesh.dy, self.v * self.mesh.dx

    def cell_fields(self):
        return {"Ux": self.ux, "Uy": self.uy, "p": self.p}

    def copy(self, **changes):
        kw = {name: getattr(self, name).copy() for name in self._arrays}
        kw.update(changes)
        return State(self.mesh, t=kw.pop("t", self.t), **kw)

    def _combine(self, other, op):
        if other.mesh is not self.mesh:
            raise ConfigurationError("cannot combine states on different meshes")
        kw = {name: op(getattr(self, name), getattr(other, name))
              for name in self._arrays}
        return State(self.mesh, t=self.t, **kw)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def is_finite(self):
        return all(np.isfinite(getattr(self, n)).all() for n in self._arrays)

    def bitwise_equal(self, other):
        return (self.mesh is other.mesh and self.t == other.t and
                all(np.array_equal(getattr(self, n), getattr(other, n))
                    for n in self._arrays))

    @classmethod
    def zeros(cls, mesh, t=0.0):
        return cls(mesh, mesh.zeros(), mesh.zeros(), mesh.zeros(),
                   np.zeros((mesh.ny, mesh.nx + 1)),
                   np.zeros((mesh.ny + 1, mesh.nx)), t)


def cfl_number(state, dt):
    """Largest per-cell ``|u| dt/dx + |v| dt/dy`` using the bounding faces."""
    m = state.mesh
    au = np.abs(state.u)
    av = np.abs(state.v)
    cu = np.maximum(au[:, :-1], au[:, 1:])
    cv = np.maximum(av[:-1, :], av[1:, :])
    return float(np.max(cu * dt / m.dx + cv * dt / m.dy))
