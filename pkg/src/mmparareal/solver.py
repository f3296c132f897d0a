"""Incompressible Navier-Stokes time stepping on one MAC grid level.

One step of size ``dt``:

1. explicit convection, central fluxes with an optional upwind blend,
   evaluated at the old state and at a projected Heun predictor, averaged;
2. backward-Euler diffusion, solved in increment form
   ``(I/dt - nu L) du = nu L u^n - N``;
3. pressure projection: ``L_p p = div(u*) / dt`` and ``u = u* - dt grad p``.

Boundary conditions (channel mode): uniform inflow ``u_inf`` at x=0,
zero-gradient outflow with ``p = 0`` at x=L, symmetry planes at y=0 and y=H,
no-slip on every face touching a SOLID cell.  A doubly periodic mode without
obstacle exists for verification runs.

The implicit operators are factorised once per propagator and thread; all
operations are deterministic, so repeated calls agree bitwise.
"""

import functools
import threading
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu

from .errors import (ConfigurationError, PressureConvergenceError,
                     SolverDivergenceError)
from .grid import State

__all__ = [
    "SolverParams", "Propagator", "PressureSolver", "step", "propagate",
    "divergence", "initial_state", "uniform_stream", "kinetic_energy",
    "project", "viscosity_from_reynolds", "cell_velocities",
]

UNKNOWN, FIXED, MIRROR = 0, 1, 2
STEP_TOL = 1e-9


def viscosity_from_reynolds(re, u_inf=1.0, diameter=2.0):
    return u_inf * diameter / re


@dataclass(frozen=True)
class SolverParams:
    nu: float
    dt: float
    u_inf: float = 1.0
    pressure_tol: float = 1e-8
    max_pressure_iters: int = 5000
    upwind: float = 0.0
    pressure_solver: str = "direct"

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigurationError(f"viscosity must be positive, got {self.nu}")
        if not self.dt > 0:
            raise ConfigurationError(f"time step must be positive, got {self.dt}")
        if not self.pressure_tol > 0:
            raise ConfigurationError("pressure tolerance must be positive")
        if not 0.0 <= self.upwind <= 1.0:
            raise ConfigurationError("upwind blend must lie in [0, 1]")
        if self.pressure_solver not in ("direct", "cg"):
            raise ConfigurationError(
                f"unknown pressure solver {self.pressure_solver!r}")


def _assemble_laplacian(kind, dx, dy, sides):
    """Five-point Laplacian rows for the UNKNOWN nodes of ``kind``.

    Returns a CSR matrix of shape (n_unknown, kind.size) acting on the full
    node vector, so FIXED neighbour values enter through the product.  MIRROR
    neighbours (zero-gradient copies of the node itself) are skipped.  Sides
    outside the array follow ``sides[name]``: 'neumann', 'wall' (ghost equals
    minus the node) or 'periodic'.
    """
    ny, nx = kind.shape
    index = np.arange(ny * nx).reshape(ny, nx)
    jj, ii = np.nonzero(kind == UNKNOWN)
    n = len(jj)
    rows_all = np.arange(n)
    diag = np.zeros(n)
    rows, cols, vals = [], [], []
    for name, dj, di, h2 in (("west", 0, -1, dx * dx), ("east", 0, 1, dx * dx),
                             ("south", -1, 0, dy * dy), ("north", 1, 0, dy * dy)):
        nj, ni = jj + dj, ii + di
        inside = (nj >= 0) & (nj < ny) & (ni >= 0) & (ni < nx)
        side = sides[name]
        if side == "periodic":
            nj, ni = nj % ny, ni % nx
            inside = np.ones(n, dtype=bool)
        sel = inside.copy()
        sel[inside] = kind[nj[inside], ni[inside]] != MIRROR
        rows.append(rows_all[sel])
        cols.append(index[nj[sel], ni[sel]])
        vals.append(np.full(sel.sum(), 1.0 / h2))
        diag[sel] -= 1.0 / h2
        if side == "wall":
            diag[~inside] -= 2.0 / h2
    rows.append(rows_all)
    cols.append(index[jj, ii])
    vals.append(diag)
    lap = sp.csr_matrix((np.concatenate(vals),
                         (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n, ny * nx))
    return lap, (jj, ii)


class _ThreadLocalLU:
    """Sparse LU factor built lazily once per thread."""

    def __init__(self, matrix):
        self.matrix = matrix.tocsc()
        self._local = threading.local()

    def solve(self, rhs):
        lu = getattr(self._local, "lu", None)
        if lu is None:
            lu = self._local.lu = splu(self.matrix)
        return lu.solve(rhs)


def divergence(state_or_faces, mesh=None):
    """Per-cell net outflow divided by cell area (1/s); zero in SOLID cells."""
    if mesh is None:
        mesh = state_or_faces.mesh
        u, v = state_or_faces.u, state_or_faces.v
    else:
        u, v = state_or_faces
    div = (u[:, 1:] - u[:, :-1]) / mesh.dx + (v[1:, :] - v[:-1, :]) / mesh.dy
    div[mesh.solid] = 0.0
    return div


def cell_velocities(mesh, u, v):
    return 0.5 * (u[:, :-1] + u[:, 1:]), 0.5 * (v[:-1, :] + v[1:, :])


class PressureSolver:
    """Projection onto discretely divergence-free face velocities.

    Unknowns are the FLUID cells.  Faces with prescribed velocity (inlet,
    symmetry planes, faces touching the cylinder) are Neumann boundaries for
    the pressure; the outlet face carries ``p = 0``.
    """

    def __init__(self, mesh, tol=1e-8, max_iters=5000, method="direct"):
        self.mesh = mesh
        self.tol = tol
        self.max_iters = max_iters
        self.method = method
        nx = mesh.nx
        kind = np.where(mesh.solid, FIXED, UNKNOWN)
        if mesh.periodic:
            kind[0, 0] = FIXED   # pins the constant null space: p[0, 0] = 0
            sides = dict.fromkeys(("west", "east", "south", "north"), "periodic")
        else:
            sides = {"west": "neumann", "east": "wall",
                     "south": "neumann", "north": "neumann"}
        lap, (jj, ii) = _assemble_laplacian(kind, mesh.dx, mesh.dy, sides)
        # solid neighbours are Neumann: drop their couplings and diagonal share
        lap = self._neumann_at_fixed(lap, kind, mesh, sides)
        flat = jj * nx + ii
        self.cells = (jj, ii)
        self.matrix = lap[:, flat].tocsr()
        self._lu = _ThreadLocalLU(self.matrix) if method == "direct" else None

        u_open = ~mesh.u_fixed.copy()
        v_open = ~mesh.v_fixed.copy()
        if mesh.periodic:
            u_open[:, -1] = False   # duplicate of column 0
            v_open[-1, :] = False
        else:
            u_open[:, 0] = False    # inlet
            v_open[0, :] = False    # symmetry planes
            v_open[-1, :] = False
        self.u_open = u_open
        self.v_open = v_open

    @staticmethod
    def _neumann_at_fixed(lap, kind, mesh, sides):
        ny, nx = kind.shape
        fixed_cols = np.zeros(ny * nx, dtype=bool)
        fixed_cols[(kind == FIXED).ravel()] = True
        if mesh.periodic:
            # the pinned cell is a genuine Dirichlet neighbour, keep it
            fixed_cols[0] = False
        coo = lap.tocoo()
        drop = fixed_cols[coo.col]
        # each dropped coupling also removes its share from the diagonal
        fix = np.bincount(coo.row[drop], weights=coo.data[drop],
                          minlength=lap.shape[0])
        keep = ~drop
        rows = np.concatenate([coo.row[keep], np.arange(lap.shape[0])])
        jj, ii = np.nonzero(kind == UNKNOWN)
        cols = np.concatenate([coo.col[keep], jj * nx + ii])
        data = np.concatenate([coo.data[keep], fix])
        return sp.csr_matrix((data, (rows, cols)), shape=lap.shape)

    def solve(self, rhs_cells, dt=1.0):
        """Solve ``L_p p = rhs`` over FLUID cells; returns a (ny, nx) array.

        ``dt`` scales the iterative tolerance so that the projected divergence
        ``dt * residual`` stays below ``tol / 2``.
        """
        b = rhs_cells[self.cells]
        if self.method == "direct":
            x = self._lu.solve(b)
        else:
            atol = 0.5 * self.tol / dt
            x, info = cg(-self.matrix, -b, rtol=0.0, atol=atol,
                         maxiter=self.max_iters)
            if info != 0:
                res = float(np.linalg.norm(self.matrix @ x - b))
                raise PressureConvergenceError(
                    f"pressure CG did not converge in {self.max_iters} iterations", res)
        p = np.zeros((self.mesh.ny, self.mesh.nx))
        p[self.cells] = x
        return p

    def project(self, u, v, dt=1.0):
        """Return divergence-free copies of ``u, v`` and the pressure."""
        m = self.mesh
        p = self.solve(divergence((u, v), m) / dt, dt)
        u = u.copy()
        v = v.copy()
        if m.periodic:
            gx = (p - np.roll(p, 1, axis=1)) / m.dx
            gy = (p - np.roll(p, 1, axis=0)) / m.dy
            u[:, :-1] -= dt * np.where(self.u_open[:, :-1], gx, 0.0)
            v[:-1, :] -= dt * np.where(self.v_open[:-1, :], gy, 0.0)
            u[:, -1] = u[:, 0]
            v[-1, :] = v[0, :]
        else:
            gx = np.zeros_like(u)
            gx[:, 1:-1] = (p[:, 1:] - p[:, :-1]) / m.dx
            gx[:, -1] = (0.0 - p[:, -1]) / (0.5 * m.dx)
            gy = np.zeros_like(v)
            gy[1:-1, :] = (p[1:, :] - p[:-1, :]) / m.dy
            u -= dt * np.where(self.u_open, gx, 0.0)
            v -= dt * np.where(self.v_open, gy, 0.0)
        return u, v, p


@functools.lru_cache(maxsize=None)
def _pressure_solver(mesh, tol=1e-8, max_iters=5000, method="direct"):
    return PressureSolver(mesh, tol, max_iters, method)


def project(state, tol=1e-8):
    """Project the face velocities of ``state``; cell fields are untouched."""
    u, v, _ = _pressure_solver(state.mesh, tol).project(state.u, state.v)
    return state.copy(u=u, v=v)


class Propagator:
    """Serial time integrator bound to one mesh and one parameter set."""

    def __init__(self, mesh, params, role="FINE"):
        self.mesh = mesh
        self.params = params
        self.role = role
        m = mesh
        ny, nx = m.ny, m.nx

        if m.periodic:
            ukind = np.full((ny, nx), UNKNOWN)
            vkind = np.full((ny, nx), UNKNOWN)
            usides = vsides = dict.fromkeys(("west", "east", "south", "north"),
                                            "periodic")
        else:
            ukind = np.where(m.u_fixed, FIXED, UNKNOWN)
            ukind[:, 0] = FIXED
            ukind[:, -1] = MIRROR
            vkind = np.where(m.v_fixed, FIXED, UNKNOWN)
            vkind[0, :] = FIXED
            vkind[-1, :] = FIXED
            usides = {"west": "neumann", "east": "neumann",
                      "south": "neumann", "north": "neumann"}
            vsides = {"west": "wall", "east": "neumann",
                      "south": "neumann", "north": "neumann"}

        self._lap_u, self._uidx = _assemble_laplacian(ukind, m.dx, m.dy, usides)
        self._lap_v, self._vidx = _assemble_laplacian(vkind, m.dx, m.dy, vsides)
        self._helm_u = _ThreadLocalLU(self._helmholtz(self._lap_u, ukind))
        self._helm_v = _ThreadLocalLU(self._helmholtz(self._lap_v, vkind))
        self.pressure = PressureSolver(m, params.pressure_tol,
                                       params.max_pressure_iters,
                                       params.pressure_solver)

    def __repr__(self):
        return f"Propagator({self.role}, {self.mesh!r}, dt={self.params.dt})"

    def _helmholtz(self, lap, kind):
        flat = np.flatnonzero(kind.ravel() == UNKNOWN)
        n = len(flat)
        return (sp.identity(n, format="csr") / self.params.dt
                - self.params.nu * lap[:, flat])

    # -- explicit convection -------------------------------------------------

    def _pad(self, u, v):
        m = self.mesh
        ny, nx = m.ny, m.nx
        U = np.empty((ny + 2, nx + 3))
        U[1:-1, 1:-1] = u
        V = np.empty((ny + 3, nx + 2))
        V[1:-1, 1:-1] = v
        if m.periodic:
            U[1:-1, 0] = u[:, nx - 1]
            U[1:-1, -1] = u[:, 1]
            U[0] = U[ny]
            U[-1] = U[1]
            V[1:-1, 0] = v[:, nx - 1]
            V[1:-1, -1] = v[:, 0]
            V[0] = V[ny]
            V[-1] = V[2]
        else:
            U[1:-1, 0] = u[:, 0]
            U[1:-1, -1] = u[:, -1]
            U[0] = U[1]
            U[-1] = U[-2]
            V[1:-1, 0] = -v[:, 0]
            V[1:-1, -1] = v[:, -1]
            V[0] = V[1]
            V[-1] = V[-2]
        return U, V

    def _convection(self, u, v):
        m = self.mesh
        ny, nx = m.ny, m.nx
        g = self.params.upwind
        U, V = self._pad(u, v)

        def flux(w, a, b):
            # convecting velocity w carries the blend of a (upstream for w>0) and b
            q = 0.5 * (a + b)
            if g:
                q = (1.0 - g) * q + g * np.where(w > 0, a, b)
            return w * q

        Uc = U[1:-1, 1:-1]
        ue = 0.5 * (Uc + U[1:-1, 2:])
        uw = 0.5 * (U[1:-1, :-2] + Uc)
        vn = 0.5 * (V[2:ny + 2, 0:nx + 1] + V[2:ny + 2, 1:nx + 2])
        vs = 0.5 * (V[1:ny + 1, 0:nx + 1] + V[1:ny + 1, 1:nx + 2])
        nu_ = ((flux(ue, Uc, U[1:-1, 2:]) - flux(uw, U[1:-1, :-2], Uc)) / m.dx
               + (flux(vn, Uc, U[2:, 1:-1]) - flux(vs, U[:-2, 1:-1], Uc)) / m.dy)

        Vc = V[1:-1, 1:-1]
        ue = 0.5 * (U[0:ny + 1, 2:nx + 2] + U[1:ny + 2, 2:nx + 2])
        uw = 0.5 * (U[0:ny + 1, 1:nx + 1] + U[1:ny + 2, 1:nx + 1])
        vn = 0.5 * (Vc + V[2:, 1:-1])
        vs = 0.5 * (V[:-2, 1:-1] + Vc)
        nv_ = ((flux(ue, Vc, V[1:-1, 2:]) - flux(uw, V[1:-1, :-2], Vc)) / m.dx
               + (flux(vn, Vc, V[2:, 1:-1]) - flux(vs, V[:-2, 1:-1], Vc)) / m.dy)
        return nu_, nv_

    # -- stepping --------------------------------------------------------------

    def _nodes(self, u, v):
        if self.mesh.periodic:
            return u[:, :-1].ravel(), v[:-1, :].ravel()
        return u.ravel(), v.ravel()

    def _sync(self, u, v):
        if self.mesh.periodic:
            u[:, -1] = u[:, 0]
            v[-1, :] = v[0, :]
        else:
            u[:, -1] = u[:, -2]

    def step(self, state):
        dt, nu = self.params.dt, self.params.nu
        uj, ui = self._uidx
        vj, vi = self._vidx
        u0, v0 = state.u, state.v

        nu0, nv0 = self._convection(u0, v0)
        u1 = u0.copy()
        v1 = v0.copy()
        u1[uj, ui] -= dt * nu0[uj, ui]
        v1[vj, vi] -= dt * nv0[vj, vi]
        self._sync(u1, v1)
        u1, v1, _ = self.pressure.project(u1, v1, dt)
        nu1, nv1 = self._convection(u1, v1)

        un, vn = self._nodes(u0, v0)
        ru = nu * (self._lap_u @ un) - 0.5 * (nu0[uj, ui] + nu1[uj, ui])
        rv = nu * (self._lap_v @ vn) - 0.5 * (nv0[vj, vi] + nv1[vj, vi])
        us = u0.copy()
        vs = v0.copy()
        us[uj, ui] += self._helm_u.solve(ru)
        vs[vj, vi] += self._helm_v.solve(rv)
        self._sync(us, vs)

        u, v, p = self.pressure.project(us, vs, dt)
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise SolverDivergenceError(
                f"non-finite velocity after step at t={state.t + dt:g}")
        resid = float(np.max(np.abs(divergence((u, v), self.mesh)), initial=0.0))
        if resid > self.params.pressure_tol:
            raise PressureConvergenceError(
                f"divergence {resid:.3e} exceeds tolerance after projection", resid)
        ux, uy = cell_velocities(self.mesh, u, v)
        return State(self.mesh, ux, uy, p, u, v, state.t + dt)

    def n_steps(self, t0, t1):
        span = t1 - t0
        n = round(span / self.params.dt)
        if n < 0 or abs(n * self.params.dt - span) > STEP_TOL * max(1.0, abs(span)):
            raise ConfigurationError(
                f"interval [{t0}, {t1}] is not a whole number of steps of "
                f"{self.params.dt}")
        return n

    def propagate(self, state, t0, t1, observer=None):
        """Apply ``step`` exactly ``round((t1 - t0)/dt)`` times.

        ``observer(state)`` is called after every step.
        """
        n = self.n_steps(t0, t1)
        if n == 0:
            return state
        state = state.copy(t=t0)
        for k in range(n):
            state = self.step(state)
            if k == n - 1:
                state.t = t1
            if observer is not None:
                observer(state)
        return state


@functools.lru_cache(maxsize=32)
def _cached_propagator(mesh, params):
    return Propagator(mesh, params)


def step(state, params):
    return _cached_propagator(state.mesh, params).step(state)


def propagate(state, t0, t1, params, observer=None):
    return _cached_propagator(state.mesh, params).propagate(state, t0, t1, observer)


def uniform_stream(mesh, u_inf=1.0, t=0.0):
    """``u = u_inf`` on every open face, ``v = 0``, ``p = 0``."""
    u = np.full((mesh.ny, mesh.nx + 1), float(u_inf))
    u[mesh.u_fixed] = 0.0
    v = np.zeros((mesh.ny + 1, mesh.nx))
    ux, uy = cell_velocities(mesh, u, v)
    return State(mesh, ux, uy, mesh.zeros(), u, v, t)


def initial_state(mesh, u_inf=1.0, perturbation=1e-3):
    """Projected uniform stream with a transverse kick behind the cylinder.

    The kick sets ``v = perturbation * u_inf`` on one column of interior
    y-faces just downstream of the cylinder and seeds vortex shedding
    deterministically.
    """
    state = uniform_stream(mesh, u_inf)
    u, v = state.u, state.v
    if perturbation and mesh.center is not None:
        cx = mesh.center[0] + mesh.radius
        col = int(np.searchsorted(mesh.x, cx, side="right"))
        if col < mesh.nx:
            rows = np.arange(1, mesh.ny)
            keep = ~mesh.v_fixed[rows, col]
            v[rows[keep], col] = perturbation * u_inf
    if not mesh.periodic:
        u, v, _ = _pressure_solver(mesh).project(u, v)
    ux, uy = cell_velocities(mesh, u, v)
    return State(mesh, ux, uy, mesh.zeros(), u, v, 0.0)


def kinetic_energy(state):
    """``0.5 * sum(u^2 + v^2) dx dy`` over distinct faces."""
    m = state.mesh
    u, v = state.u, state.v
    if m.periodic:
        u, v = u[:, :-1], v[:-1, :]
    return 0.5 * m.dx * m.dy * float(np.sum(u * u) + np.sum(v * v))
