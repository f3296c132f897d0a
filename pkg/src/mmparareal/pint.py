"""Classic and micro-macro Parareal over equal time slices.

Notation: ``U^k_n`` is the fine (micro) state at slice boundary ``t_n`` after
iteration ``k``; ``Uh^k_n`` its coarse (macro) counterpart.  Iteration 0 is a
serial coarse sweep; micro states are obtained by lifting.  Iteration k >= 1::

    F_n          = F(U^{k-1}_n)                          all slices, concurrent
    Uh^k_{n+1}   = R(F_n) + (G(Uh^k_n) - G(Uh^{k-1}_n))  serial
    U^k_{n+1}    = F_n + (L(Uh^k_{n+1}) - L(R(F_n)))     per slice

Classic Parareal is the special case ``R = L = Id`` with the coarse propagator
on the fine mesh, where the last line reduces to ``U = Uh``.  Written this way
every update is exact in floating point whenever the coarse correction
vanishes, so converged slices reproduce the serial fine solution bitwise.
"""

import concurrent.futures
import csv
import enum
import time
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational
from pathlib import Path

import numpy as np

from .diagnostics import ForceRecorder
from .errors import (ConfigurationError, ParallelDivergenceError,
                     SliceFailure, SolverError)
from .fdump import write_state
from .grid import VARIABLES, MeshConfig, build_mesh, build_mesh_pair
from .solver import STEP_TOL, Propagator, SolverParams, initial_state
from .transfer import FluxMode, Transfer, TransferScheme, relative_max_error

__all__ = [
    "Algorithm", "StopMode", "FlowProblem", "PintConfig", "TimingRecord",
    "PintReport", "SerialTrajectory", "run_serial_reference", "run_parareal",
    "run_micro_macro", "run", "error_norm", "speedup_estimate",
    "measured_ratio", "default_iterations", "write_report", "build_levels",
]

DIVERGENCE_FACTOR = 1e3


class Algorithm(enum.Enum):
    CLASSIC = "classic"
    MICRO_MACRO = "micromacro"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "")
        for a in cls:
            if a.value == key:
                return a
        raise ConfigurationError(f"unknown algorithm {value!r}")


class StopMode(enum.Enum):
    REPORT = "report"  # error against the serial fine reference
    LIVE = "live"      # error between successive iterates


@dataclass(frozen=True)
class FlowProblem:
    """Everything the propagators need apart from the time step."""
    mesh: MeshConfig = MeshConfig()
    nu: float = 0.02
    u_inf: float = 1.0
    upwind: float = 0.0
    perturbation: float = 1e-3
    pressure_tol: float = 1e-8
    pressure_solver: str = "direct"

    def solver_params(self, dt):
        return SolverParams(nu=self.nu, dt=dt, u_inf=self.u_inf,
                            pressure_tol=self.pressure_tol, upwind=self.upwind,
                            pressure_solver=self.pressure_solver)


def default_iterations(n_t):
    """Half the slice count; five slices run up to the second-last iterate."""
    if n_t == 5:
        return 3
    return max(1, n_t // 2)


def _whole_steps(span, dt):
    n = round(span / dt)
    return n >= 1 and abs(n * dt - span) <= STEP_TOL * max(1.0, span)


@dataclass(frozen=True)
class PintConfig:
    T: float
    n_t: int
    dt_fine: float
    dt_coarse: float
    K: int | None = None
    scheme: TransferScheme = TransferScheme.NN
    algorithm: Algorithm = Algorithm.MICRO_MACRO
    flux_mode: FluxMode = FluxMode.AVERAGE
    tol: float = 1e-6
    stop_mode: StopMode = StopMode.REPORT
    workers: int = 1
    problem: FlowProblem = FlowProblem()
    record_forces: bool = True
    keep_states: bool = False

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "scheme", TransferScheme.parse(self.scheme))
        set_(self, "algorithm", Algorithm.parse(self.algorithm))
        set_(self, "flux_mode", FluxMode.parse(self.flux_mode))
        set_(self, "stop_mode", StopMode(self.stop_mode))
        if self.K is None:
            set_(self, "K", default_iterations(self.n_t))
        self.validate()

    def validate(self):
        if self.n_t < 2:
            raise ConfigurationError("n_t must be at least 2")
        if not self.T >= 0:
            raise ConfigurationError("T must be non-negative")
        if not (self.dt_fine > 0 and self.dt_coarse > 0):
            raise ConfigurationError("time steps must be positive")
        for name, dt in (("dt_fine", self.dt_fine), ("dt_coarse", self.dt_coarse)):
            if self.T > 0 and not _whole_steps(self.slice_length, dt):
                raise ConfigurationError(
                    f"slice length {self.slice_length} is not a multiple of "
                    f"{name} = {dt}")
        if not 1 <= self.K <= self.n_t - 1:
            raise ConfigurationError(f"K must lie in [1, {self.n_t - 1}], got {self.K}")
        if not self.tol >= 0:
            raise ConfigurationError("tol must be non-negative")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")

    @property
    def slice_length(self):
        return self.T / self.n_t

    def boundary(self, n):
        return self.T * n / self.n_t

    @property
    def m_theoretical(self):
        """``m_S * m_T``: cell-count ratio times step-count ratio per slice."""
        steps = round(self.slice_length / self.dt_fine)
        coarse_steps = round(self.slice_length / self.dt_coarse)
        m_t = Fraction(steps, coarse_steps)
        if self.algorithm is Algorithm.CLASSIC:
            return m_t
        return self.problem.mesh.coarsening ** 2 * m_t


@dataclass(frozen=True)
class TimingRecord:
    phase: str   # "coarse" or "fine"
    slice: int
    k: int
    seconds: float


@dataclass
class SerialTrajectory:
    states: list
    forces: list = field(default_factory=list)

    @property
    def final(self):
        return self.states[-1]


@dataclass
class PintReport:
    config: PintConfig
    errors: list = field(default_factory=list)       # per k: {var: err}
    absolute: list = field(default_factory=list)     # per k: set of vars
    timings: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)    # (k, n) -> directory
    states: dict = field(default_factory=dict)      # (k, n) -> State
    forces: dict = field(default_factory=dict)      # k -> last-slice series
    coarse_forces: list = field(default_factory=list)   # iteration-0 sweep
    converged: bool = False
    reference: SerialTrajectory | None = None
    levels: tuple = ()   # fine propagator, coarse propagator, transfer

    @property
    def iterations(self):
        return len(self.errors) - 1

    @property
    def m_theoretical(self):
        return self.config.m_theoretical

    @property
    def m_measured(self):
        return measured_ratio(self.timings)

    def speedup(self, k):
        return speedup_estimate(self.m_measured, k, self.config.n_t)

    def final_state(self, k=None):
        k = self.iterations if k is None else k
        return self.states[(k, self.config.n_t)]


def error_norm(u, ref):
    """Per-variable relative max error over FLUID cells.

    Returns ``(errors, absolute)`` where ``absolute`` holds the variables for
    which the reference vanishes and the plain max norm was used.
    """
    if u.mesh is not ref.mesh:
        raise ConfigurationError("error_norm needs states on the same mesh")
    mask = ref.mesh.fluid
    errors, absolute = {}, set()
    for var in VARIABLES:
        err, is_abs = relative_max_error(ref.cell_fields()[var],
                                         u.cell_fields()[var], mask)
        errors[var] = err
        if is_abs:
            absolute.add(var)
    return errors, absolute


def speedup_estimate(m, k, n_t):
    """``min(m / (k + 1), n_t / k)``, exact for rational ``m``."""
    if k < 1:
        raise ValueError("speedup estimate needs at least one iteration (k >= 1)")
    if not m > 0 or n_t < 1:
        raise ValueError("m must be positive and n_t at least 1")
    if isinstance(m, Rational):
        return min(Fraction(m) / (k + 1), Fraction(n_t, k))
    return min(m / (k + 1), n_t / k)


def measured_ratio(timings):
    """Mean fine wall time over mean coarse wall time per slice."""
    fine = [t.seconds for t in timings if t.phase == "fine"]
    coarse = [t.seconds for t in timings if t.phase == "coarse"]
    if not fine or not coarse:
        raise ValueError("need at least one fine and one coarse timing")
    mean_coarse = sum(coarse) / len(coarse)
    if mean_coarse <= 0:
        raise ValueError("coarse propagation time is zero")
    return (sum(fine) / len(fine)) / mean_coarse


class _Identity:
    """Transfer stand-in for classic Parareal on a single mesh."""

    def restrict(self, s):
        return s

    lift = restrict

    def match(self, u_hat, f):
        return u_hat


def build_levels(config):
    """``(fine propagator, coarse propagator, transfer)`` for ``config``."""
    prob = config.problem
    fine_params = prob.solver_params(config.dt_fine)
    coarse_params = prob.solver_params(config.dt_coarse)
    if config.algorithm is Algorithm.CLASSIC:
        mesh = build_mesh(prob.mesh)
        return (Propagator(mesh, fine_params, "FINE"),
                Propagator(mesh, coarse_params, "COARSE"), _Identity())
    pair = build_mesh_pair(prob.mesh)
    return (Propagator(pair.fine, fine_params, "FINE"),
            Propagator(pair.coarse, coarse_params, "COARSE"),
            Transfer(pair, config.scheme, config.flux_mode, prob.u_inf))


def _recorder(config, mesh):
    if config.record_forces and len(mesh.surface):
        return ForceRecorder(config.problem.nu)
    return None


def run_serial_reference(config, fine=None):
    """Serial fine trajectory with snapshots at every slice boundary."""
    if fine is None:
        fine = build_levels(config)[0]
    state = initial_state(fine.mesh, config.problem.u_inf, config.problem.perturbation)
    traj = SerialTrajectory([state])
    if config.T == 0:
        return traj
    rec = _recorder(config, fine.mesh)
    for n in range(config.n_t):
        state = fine.propagate(state, config.boundary(n), config.boundary(n + 1), rec)
        traj.states.append(state)
    if rec is not None:
        traj.forces = rec.samples
    return traj


def _fine_task(fine, state, t0, t1, recorder):
    start = time.perf_counter()
    out = fine.propagate(state, t0, t1, recorder)
    return out, time.perf_counter() - start


def _iterate(config, out_dir=None, reference=None):
    config.validate()
    if config.T == 0:
        raise ConfigurationError("Parareal needs a positive end time")
    fine, coarse, transfer = build_levels(config)
    if reference is None and config.stop_mode is StopMode.REPORT:
        reference = run_serial_reference(config, fine)
    report = PintReport(config, reference=reference, levels=(fine, coarse, transfer))
    n_t = config.n_t
    tb = config.boundary
    u0 = initial_state(fine.mesh, config.problem.u_inf, config.problem.perturbation)

    def coarse_step(state, n, k, recorder=None):
        start = time.perf_counter()
        try:
            out = coarse.propagate(state, tb(n), tb(n + 1), recorder)
        except SolverError as exc:
            raise SliceFailure(n, k, exc) from exc
        report.timings.append(TimingRecord("coarse", n, k, time.perf_counter() - start))
        return out

    def record(k, micro):
        for n, s in enumerate(micro):
            if config.keep_states or n == n_t:
                report.states[(k, n)] = s
            if out_dir is not None:
                d = Path(out_dir) / "slices" / f"k{k}" / f"t{n}"
                write_state(d, s)
                report.snapshots[(k, n)] = d

    def measure(k, micro, previous):
        if config.stop_mode is StopMode.REPORT:
            return error_norm(micro[-1], reference.final)
        if previous is None:
            return {v: float("nan") for v in VARIABLES}, set()
        return error_norm(micro[-1], previous[-1])

    # iteration 0: serial coarse sweep, then lifting
    macro = [transfer.restrict(u0)]
    g_old = []
    coarse_rec = _recorder(config, coarse.mesh)
    for n in range(n_t):
        g = coarse_step(macro[n], n, 0, coarse_rec)
        g_old.append(g)
        macro.append(g)
    if coarse_rec is not None:
        report.coarse_forces = coarse_rec.samples
    micro = [u0] + [transfer.lift(s) for s in macro[1:]]
    record(0, micro)
    errs, absolute = measure(0, micro, None)
    report.errors.append(errs)
    report.absolute.append(absolute)
    initial_error = None if config.stop_mode is StopMode.LIVE else max(errs.values())
    if initial_error is not None and initial_error <= config.tol:
        report.converged = True
        return report

    workers = min(config.workers, n_t)
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        for k in range(1, config.K + 1):
            # slices before k-1 are converged; their fine results are reused
            first = k - 1
            recorders = {n: (_recorder(config, fine.mesh) if n == n_t - 1 else None)
                         for n in range(first, n_t)}
            futures = {n: pool.submit(_fine_task, fine, micro[n], tb(n), tb(n + 1),
                                      recorders[n])
                       for n in range(first, n_t)}
            fine_out = {}
            failure = None
            for n in range(first, n_t):
                try:
                    fine_out[n], seconds = futures[n].result()
                except SolverError as exc:
                    failure = failure or SliceFailure(n, k, exc)
                    continue
                report.timings.append(TimingRecord("fine", n, k, seconds))
            if failure is not None:
                raise failure
            if recorders[n_t - 1] is not None:
                report.forces[k] = recorders[n_t - 1].samples

            new_micro = micro[:first + 1]
            new_macro = macro[:first + 1]
            for n in range(first, n_t):
                g_new = coarse_step(new_macro[n], n, k)
                restricted = transfer.restrict(fine_out[n])
                u_hat = restricted + (g_new - g_old[n])
                u_hat.t = tb(n + 1)
                g_old[n] = g_new
                new_macro.append(u_hat)
                new_micro.append(transfer.match(u_hat, fine_out[n]))
            previous, micro, macro = micro, new_micro, new_macro
            record(k, micro)

            errs, absolute = measure(k, micro, previous)
            report.errors.append(errs)
            report.absolute.append(absolute)
            worst = max(errs.values())
            if initial_error is None:
                initial_error = worst
            if not np.isfinite(worst) or (
                    initial_error > 0 and worst > DIVERGENCE_FACTOR * initial_error):
                raise ParallelDivergenceError(
                    f"iteration {k}: error {worst:.3e} exceeds "
                    f"{DIVERGENCE_FACTOR:g} x initial error {initial_error:.3e}")
            if worst <= config.tol:
                report.converged = True
                break
    return report


def run_parareal(config, out_dir=None, reference=None):
    """Classic Parareal: coarse and fine propagators share the fine mesh."""
    if config.algorithm is not Algorithm.CLASSIC:
        raise ConfigurationError("run_parareal needs algorithm=classic")
    return _iterate(config, out_dir, reference)


def run_micro_macro(config, out_dir=None, reference=None):
    """Micro-macro Parareal on the nested mesh pair."""
    if config.algorithm is not Algorithm.MICRO_MACRO:
        raise ConfigurationError("run_micro_macro needs algorithm=micromacro")
    return _iterate(config, out_dir, reference)


def run(config, out_dir=None, reference=None):
    if config.algorithm is Algorithm.CLASSIC:
        return run_parareal(config, out_dir, reference)
    return run_micro_macro(config, out_dir, reference)


def _fmt(x):
    if isinstance(x, Fraction):
        return str(x) if x.denominator != 1 else str(x.numerator)
    return repr(float(x))


def write_report(report, out_dir):
    """Write errors.csv, timings.csv and speedup.csv; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    paths["errors"] = out / "errors.csv"
    with paths["errors"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "var", "err"])
        for k, errs in enumerate(report.errors):
            for var in VARIABLES:
                if np.isfinite(errs[var]):
                    w.writerow([k, var, repr(errs[var])])
    paths["timings"] = out / "timings.csv"
    with paths["timings"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "slice", "k", "seconds"])
        for t in sorted(report.timings, key=lambda r: (r.k, r.phase, r.slice)):
            w.writerow([t.phase, t.slice, t.k, repr(t.seconds)])
    paths["speedup"] = out / "speedup.csv"
    with paths["speedup"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "m_theoretical", "m_measured", "S"])
        try:
            m_meas = report.m_measured
        except ValueError:
            m_meas = None
        for k in range(1, report.iterations + 1):
            s = "" if m_meas is None else _fmt(report.speedup(k))
            w.writerow([k, _fmt(report.m_theoretical),
                        "" if m_meas is None else _fmt(m_meas), s])
    return paths

