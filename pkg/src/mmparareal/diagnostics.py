"""Cylinder forces, lift coefficient and shedding frequency."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import periodogram

from .errors import ConfigurationError

__all__ = [
    "ForceSample", "CoeffParams", "SheddingEstimate", "surface_forces",
    "lift_coefficient", "drag_coefficient", "strouhal", "series_error",
    "ForceRecorder", "write_force_csv", "read_force_csv",
]


@dataclass(frozen=True)
class ForceSample:
    t: float
    f_D: float
    f_L: float


@dataclass(frozen=True)
class CoeffParams:
    rho: float = 1.0
    diameter: float = 2.0
    u_inf: float = 1.0
    a_ref: float | None = None
    conventional: bool = False

    def __post_init__(self):
        for name in ("rho", "diameter", "u_inf"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.a_ref is not None and not self.a_ref > 0:
            raise ConfigurationError("a_ref must be positive")

    @property
    def reference_area(self):
        # per unit depth
        return self.diameter if self.a_ref is None else self.a_ref


@dataclass(frozen=True)
class SheddingEstimate:
    frequency: float
    strouhal: float
    periods: float


def surface_forces(state, nu):
    """Pressure and viscous force on the stair-step cylinder, per unit depth.

    Each fluid/solid face contributes ``-p n A`` plus the wall shear
    ``nu * u_t / d * A`` along the face, with ``u_t`` the tangential
    cell-centre velocity of the owning fluid cell at distance ``d``.
    """
    surf = state.mesh.surface
    if len(surf) == 0:
        raise ConfigurationError("mesh has no cylinder surface faces")
    p = state.p[surf.j, surf.i]
    pressure = -(p * surf.area)[:, None] * surf.normal
    along_x = surf.normal[:, 0] != 0
    # x-facing faces shear in y with Uy, y-facing faces shear in x with Ux
    shear = np.zeros_like(pressure)
    shear[along_x, 1] = state.uy[surf.j, surf.i][along_x]
    shear[~along_x, 0] = state.ux[surf.j, surf.i][~along_x]
    shear *= (nu * surf.area / surf.distance)[:, None]
    total = (pressure + shear).sum(axis=0)
    return ForceSample(float(state.t), float(total[0]), float(total[1]))


def lift_coefficient(f_L, params=CoeffParams()):
    """``2 f_L / (rho D U^2 A_ref)``; without D when ``params.conventional``."""
    denom = params.rho * params.u_inf ** 2 * params.reference_area
    if not params.conventional:
        denom *= params.diameter
    return 2.0 * f_L / denom


def drag_coefficient(f_D, params=CoeffParams()):
    return lift_coefficient(f_D, params)


def strouhal(series, diameter, u_inf, t_min=None, min_periods=5.0,
             peak_ratio=10.0):
    """Dominant lift frequency as a Strouhal number ``f D / u_inf``.

    Only samples with ``t >= t_min`` (default: second half of the series) are
    used.  Returns ``None`` when the periodogram has no peak standing
    ``peak_ratio`` times above its median, and raises ``ValueError`` when the
    window holds fewer than ``min_periods`` periods of the detected frequency.
    """
    t = np.array([s.t for s in series])
    f = np.array([s.f_L for s in series])
    if len(t) < 8:
        raise ValueError("force series too short for a spectral estimate")
    if t_min is None:
        t_min = 0.5 * (t[0] + t[-1])
    keep = t >= t_min
    t, f = t[keep], f[keep]
    if len(t) < 8:
        raise ValueError("too few samples after the spin-up cutoff")
    dt = np.diff(t)
    if np.ptp(dt) > 1e-6 * dt.mean():
        raise ValueError("strouhal needs uniformly sampled forces")
    if np.ptp(f) <= 1e-12 * np.abs(f).max():
        return None
    freq, power = periodogram(f, fs=1.0 / dt.mean(), detrend="constant")
    freq, power = freq[1:], power[1:]
    k = int(np.argmax(power))
    if not power[k] > 0 or power[k] < peak_ratio * np.median(power):
        return None
    peak = freq[k]
    if 0 < k < len(power) - 1:
        # vertex of the parabola through the three bins around the peak
        a, b, c = power[k - 1], power[k], power[k + 1]
        denom = a - 2 * b + c
        if denom != 0:
            peak += 0.5 * (a - c) / denom * (freq[1] - freq[0])
    window = t[-1] - t[0] + dt.mean()
    periods = peak * window
    if periods < min_periods:
        raise ValueError(f"window covers only {periods:.1f} shedding periods")
    return SheddingEstimate(float(peak), float(peak * diameter / u_inf), float(periods))


def series_error(candidate, reference, params=CoeffParams(), window=None):
    """Relative max deviation of C_L, ``max|c - r| / max|r|``.

    The candidate is linearly resampled onto the reference instants inside
    the overlap of both series (optionally clipped to ``window=(t0, t1)``).
    """
    tc = np.array([s.t for s in candidate])
    tr = np.array([s.t for s in reference])
    if len(tc) == 0 or len(tr) == 0:
        raise ValueError("empty force series")
    lo, hi = max(tc[0], tr[0]), min(tc[-1], tr[-1])
    if window is not None:
        lo, hi = max(lo, window[0]), min(hi, window[1])
    keep = (tr >= lo - 1e-12) & (tr <= hi + 1e-12)
    if not keep.any():
        raise ValueError("force series do not overlap")
    cl_r = lift_coefficient(np.array([s.f_L for s in reference]), params)[keep]
    cl_c = lift_coefficient(np.array([s.f_L for s in candidate]), params)
    cl_c = np.interp(tr[keep], tc, cl_c)
    scale = np.max(np.abs(cl_r))
    err = np.max(np.abs(cl_c - cl_r))
    return float(err / scale) if scale > 0 else float(err)


class ForceRecorder:
    """Step observer collecting one ForceSample per solver step."""

    def __init__(self, nu):
        self.nu = nu
        self.samples = []

    def __call__(self, state):
        self.samples.append(surface_forces(state, self.nu))


def write_force_csv(path, samples, params=CoeffParams()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "f_D", "f_L", "C_D", "C_L"])
        for s in samples:
            w.writerow([repr(s.t), repr(s.f_D), repr(s.f_L),
                        repr(float(drag_coefficient(s.f_D, params))),
                        repr(float(lift_coefficient(s.f_L, params)))])
    return path


def read_force_csv(path):
    with Path(path).open() as fh:
        return [ForceSample(float(r["t"]), float(r["f_D"]), float(r["f_L"]))
                for r in csv.DictReader(fh)]
