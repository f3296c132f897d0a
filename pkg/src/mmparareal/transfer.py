"""Inter-grid transfer between the nested coarse and fine levels.

Restriction R (fine -> coarse), lifting L (coarse -> fine) and the FAS-form
matching ``P(U_hat, F) = F + (L(U_hat) - L(R(F)))`` act on the cell-centred
variables Ux, Uy and p.  Face velocities are never mapped: after every
transfer they are rebuilt from the cell velocities (``reconstruct_fluxes``),
which in general breaks discrete continuity unless PROJECTED mode is used.

Three schemes:

NN  nearest neighbour.  R takes the nearest FLUID child (ties broken
    lower-left first), L injects the parent value.
IN  linear.  R samples the fine field bilinearly at the coarse centre, L
    interpolates bilinearly from the four surrounding coarse centres with
    constant extrapolation at the domain boundary.
CP  inverse-distance weighting over the children (R) or over the surrounding
    coarse centres (L).

SOLID cells never enter a stencil; the remaining weights are renormalised.
"""

import enum
import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError
from .grid import VARIABLES, State
from .solver import project

__all__ = [
    "TransferScheme", "FluxMode", "Transfer", "ConsistencyReport",
    "restrict", "lift", "match_states", "reconstruct_fluxes",
    "consistency_audit", "relative_max_error", "scalar_ratio_matching",
]


class TransferScheme(enum.Enum):
    NN = "NN"
    IN = "IN"
    CP = "CP"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ConfigurationError(f"unknown transfer scheme {value!r}") from None


class FluxMode(enum.Enum):
    AVERAGE = "average"
    PROJECTED = "projected"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown flux mode {value!r}") from None


def _normalised(rows, cols, w, shape):
    rows, cols, w = map(np.asarray, (rows, cols, w))
    total = np.bincount(rows, weights=w, minlength=shape[0])
    w = w / total[rows]
    return sp.csr_matrix((w, (rows, cols)), shape=shape)


def _child_order(factor):
    """Children offsets (dj, di) sorted by distance to the parent centre,
    then lower-left first."""
    off = np.arange(factor) + 0.5 - 0.5 * factor
    cand = [(off[dj] ** 2 + off[di] ** 2, dj, di)
            for dj in range(factor) for di in range(factor)]
    return [(dj, di) for _, dj, di in sorted(cand)]


def _restriction_matrix(pair, scheme):
    fine, coarse, c = pair.fine, pair.coarse, pair.factor
    order = _child_order(c)
    off = np.arange(c) + 0.5 - 0.5 * c
    d2 = {(dj, di): (off[di] * fine.dx) ** 2 + (off[dj] * fine.dy) ** 2
          for dj, di in order}
    nearest = [o for o in order if np.isclose(d2[o], d2[order[0]])]
    rows, cols, w = [], [], []
    for J, I in zip(*np.nonzero(coarse.fluid)):
        row = J * coarse.nx + I

        def child(o):
            return J * c + o[0], I * c + o[1]

        fluid_children = [o for o in order if fine.fluid[child(o)]]
        if scheme is TransferScheme.NN:
            stencil, weights = fluid_children[:1], [1.0]
        elif scheme is TransferScheme.IN:
            stencil = [o for o in nearest if fine.fluid[child(o)]] or fluid_children[:1]
            weights = [1.0] * len(stencil)
        else:
            stencil = fluid_children
            weights = [1.0 / np.sqrt(d2[o]) for o in stencil]
        for o, wt in zip(stencil, weights):
            j, i = child(o)
            rows.append(row)
            cols.append(j * fine.nx + i)
            w.append(wt)
    return _normalised(rows, cols, w, (coarse.n_cells, fine.n_cells))


def _nearest_fluid_coarse(pair, j, i):
    """Nearest FLUID coarse cell to fine cell (j, i), lower-left on ties."""
    fine, coarse, c = pair.fine, pair.coarse, pair.factor
    J0, I0 = j // c, i // c
    if coarse.fluid[J0, I0]:
        return J0, I0
    x, y = fine.x[i], fine.y[j]
    best = None
    for r in range(1, max(coarse.nx, coarse.ny)):
        for J in range(max(J0 - r, 0), min(J0 + r, coarse.ny - 1) + 1):
            for I in range(max(I0 - r, 0), min(I0 + r, coarse.nx - 1) + 1):
                if coarse.fluid[J, I]:
                    key = ((coarse.x[I] - x) ** 2 + (coarse.y[J] - y) ** 2, J, I)
                    best = key if best is None or key < best else best
        if best is not None:
            return best[1], best[2]
    raise ConfigurationError("coarse mesh has no FLUID cells")


def _lifting_matrix(pair, scheme):
    fine, coarse = pair.fine, pair.coarse
    rows, cols, w = [], [], []
    # fractional coarse index of every fine centre
    sx = fine.x / coarse.dx - 0.5
    sy = fine.y / coarse.dy - 0.5
    for j, i in zip(*np.nonzero(fine.fluid)):
        row = j * fine.nx + i
        stencil, weights = [], []
        if scheme is not TransferScheme.NN:
            I0, J0 = int(np.floor(sx[i])), int(np.floor(sy[j]))
            ax, ay = sx[i] - I0, sy[j] - J0
            for dJ, dI in ((0, 0), (0, 1), (1, 0), (1, 1)):
                J, I = J0 + dJ, I0 + dI
                if scheme is TransferScheme.IN:
                    wt = (ax if dI else 1 - ax) * (ay if dJ else 1 - ay)
                    J = min(max(J, 0), coarse.ny - 1)
                    I = min(max(I, 0), coarse.nx - 1)
                else:
                    if not (0 <= J < coarse.ny and 0 <= I < coarse.nx):
                        continue
                    d = np.hypot(coarse.x[I] - fine.x[i], coarse.y[J] - fine.y[j])
                    wt = 1.0 / d
                if wt > 0 and coarse.fluid[J, I]:
                    stencil.append(J * coarse.nx + I)
                    weights.append(wt)
        if not stencil:
            J, I = _nearest_fluid_coarse(pair, j, i)
            stencil, weights = [J * coarse.nx + I], [1.0]
        rows.extend([row] * len(stencil))
        cols.extend(stencil)
        w.extend(weights)
    return _normalised(rows, cols, w, (fine.n_cells, coarse.n_cells))


@functools.lru_cache(maxsize=None)
def _operators(pair, scheme):
    return _restriction_matrix(pair, scheme), _lifting_matrix(pair, scheme)


def reconstruct_fluxes(state, mode=FluxMode.AVERAGE, u_inf=1.0):
    """Rebuild face velocities from the cell velocities of ``state``.

    AVERAGE takes the mean of the two adjacent cell values (inflow and
    no-slip faces keep their boundary values, outflow faces copy the last
    cell); PROJECTED additionally projects the result onto discretely
    divergence-free faces.
    """
    mode = FluxMode.parse(mode)
    m = state.mesh
    ux, uy = state.ux, state.uy
    u = np.empty((m.ny, m.nx + 1))
    v = np.empty((m.ny + 1, m.nx))
    u[:, 1:-1] = 0.5 * (ux[:, :-1] + ux[:, 1:])
    v[1:-1, :] = 0.5 * (uy[:-1, :] + uy[1:, :])
    if m.periodic:
        u[:, 0] = u[:, -1] = 0.5 * (ux[:, -1] + ux[:, 0])
        v[0, :] = v[-1, :] = 0.5 * (uy[-1, :] + uy[0, :])
    else:
        u[:, 0] = u_inf
        u[:, -1] = ux[:, -1]
        v[0, :] = v[-1, :] = 0.0
    u[m.u_fixed] = 0.0
    v[m.v_fixed] = 0.0
    out = State(m, ux.copy(), uy.copy(), state.p.copy(), u, v, state.t)
    if mode is FluxMode.PROJECTED:
        out = project(out)
    return out


def relative_max_error(a, b, mask):
    """``max|a - b| / max|a|`` over ``mask``; absolute when ``a`` vanishes.

    Returns ``(error, is_absolute)``.
    """
    diff = float(np.max(np.abs(a - b)[mask], initial=0.0))
    scale = float(np.max(np.abs(a)[mask], initial=0.0))
    if scale == 0.0:
        return diff, True
    return diff / scale, False


class Transfer:
    """R, L and P for one nested mesh pair and one scheme."""

    def __init__(self, pair, scheme=TransferScheme.NN, flux_mode=FluxMode.AVERAGE,
                 u_inf=1.0):
        self.pair = pair
        self.scheme = TransferScheme.parse(scheme)
        self.flux_mode = FluxMode.parse(flux_mode)
        self.u_inf = u_inf
        self._R, self._L = _operators(pair, self.scheme)

    # -- cell fields ----------------------------------------------------------

    def restrict_field(self, values):
        c = self.pair.coarse
        return (self._R @ np.ravel(values)).reshape(c.ny, c.nx)

    def lift_field(self, values):
        f = self.pair.fine
        return (self._L @ np.ravel(values)).reshape(f.ny, f.nx)

    def match_field(self, coarse_values, fine_values):
        correction = self.lift_field(coarse_values) - self.lift_field(
            self.restrict_field(fine_values))
        return fine_values + correction

    # -- states ---------------------------------------------------------------

    def _build(self, mesh, fields, t):
        s = State(mesh, fields[0], fields[1], fields[2],
                  np.zeros((mesh.ny, mesh.nx + 1)), np.zeros((mesh.ny + 1, mesh.nx)), t)
        return reconstruct_fluxes(s, self.flux_mode, self.u_inf)

    def restrict(self, fine):
        self.pair.check(fine_state=fine)
        return self._build(self.pair.coarse,
                           [self.restrict_field(a) for a in (fine.ux, fine.uy, fine.p)],
                           fine.t)

    def lift(self, coarse):
        self.pair.check(coarse_state=coarse)
        return self._build(self.pair.fine,
                           [self.lift_field(a) for a in (coarse.ux, coarse.uy, coarse.p)],
                           coarse.t)

    def match(self, u_hat, f):
        """``f + (L(u_hat) - L(R(f)))`` on every field, faces included.

        The lifted states carry reconstructed faces, so the correction added
        to the fine faces is the reconstruction of the lifted cell correction;
        when ``u_hat == R(f)`` the result equals ``f`` bitwise.
        """
        self.pair.check(fine_state=f, coarse_state=u_hat)
        out = f + (self.lift(u_hat) - self.lift(self.restrict(f)))
        out.t = f.t
        return out


def restrict(fine, pair, scheme=TransferScheme.NN, **kw):
    return Transfer(pair, scheme, **kw).restrict(fine)


def lift(coarse, pair, scheme=TransferScheme.NN, **kw):
    return Transfer(pair, scheme, **kw).lift(coarse)


def match_states(u_hat, f, pair, scheme=TransferScheme.NN, **kw):
    return Transfer(pair, scheme, **kw).match(u_hat, f)


@dataclass
class ConsistencyReport:
    """Relative max-norm defects of the three consistency requirements."""
    scheme: TransferScheme
    err_RL: dict = field(default_factory=dict)
    err_LR: dict = field(default_factory=dict)
    err_RP: dict = field(default_factory=dict)
    absolute: set = field(default_factory=set)

    def rows(self):
        for var in VARIABLES:
            yield (self.scheme.value, var, self.err_RL[var], self.err_LR[var],
                   self.err_RP[var])


CSV_HEADER = ("scheme", "variable", "err_RL", "err_LR", "err_RP")


def consistency_audit(g, f, transfer):
    """Evaluate ``G - R(L(G))``, ``F - L(R(F))`` and ``G - R(P(G, F))``.

    ``g`` and ``f`` are coarse and fine snapshots at the same time.
    """
    pair = transfer.pair
    pair.check(fine_state=f, coarse_state=g)
    report = ConsistencyReport(transfer.scheme)
    cmask, fmask = pair.coarse.fluid, pair.fine.fluid
    for var in VARIABLES:
        gv = g.cell_fields()[var]
        fv = f.cell_fields()[var]
        rl = transfer.restrict_field(transfer.lift_field(gv))
        lr = transfer.lift_field(transfer.restrict_field(fv))
        rp = transfer.restrict_field(transfer.match_field(gv, fv))
        for store, a, b, mask, tag in ((report.err_RL, gv, rl, cmask, "RL"),
                                       (report.err_LR, fv, lr, fmask, "LR"),
                                       (report.err_RP, gv, rp, cmask, "RP")):
            err, absolute = relative_max_error(a, b, mask)
            store[var] = err
            if absolute:
                report.absolute.add((tag, var))
    return report


def scalar_ratio_matching(u_hat, f):
    """Ratio-form matching for a scalar macro value and a micro vector.

    ``P(u_hat, f) = u_hat * f / R(f)`` with R the mean; only meaningful for a
    scalar macro state.
    """
    f = np.asarray(f, dtype=float)
    return u_hat * f / f.mean()
