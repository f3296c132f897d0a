"""Experiment harness: ``mmparareal {mesh,run,audit,report}``.

Configuration files are flat ``key = value`` text; ``#`` starts a comment.
Every key of ``ExperimentConfig`` may appear at most once.  Command-line flags
override the file.  Outputs go to ``--out``, else ``$MMP_OUT_DIR/<label>``,
else ``runs/<label>``.
"""

import argparse
import csv
import dataclasses
import datetime
import hashlib
import json
import os
import platform
import re
import sys
import time
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .diagnostics import (CoeffParams, ForceRecorder, drag_coefficient,
                          lift_coefficient, read_force_csv, strouhal,
                          write_force_csv)
from .errors import (AggregationError, ConfigurationError,
                     ParallelDivergenceError, SliceFailure, SolverError)
from .fdump import read_state, write_field, write_state
from .grid import VARIABLES, MeshConfig, build_mesh_pair
from .pint import Algorithm, FlowProblem, PintConfig, StopMode, run, write_report
from .solver import Propagator, initial_state, viscosity_from_reynolds
from .transfer import (CSV_HEADER, FluxMode, Transfer, TransferScheme,
                       consistency_audit)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_DIVERGENCE = 4
EXIT_AGGREGATION = 5

# upwind blend switched on automatically above this Reynolds number
AUTO_UPWIND_RE = 400
AUTO_UPWIND = 0.1


@dataclass
class ExperimentConfig:
    label: str = "run"
    mode: str = "parareal"          # parareal | serial
    # geometry
    length: float = 32.0
    height: float = 16.0
    cyl_x: float = 8.0
    cyl_y: float = 8.0
    radius: float = 1.0
    nx: int = 128
    ny: int = 64
    coarsening: int = 2
    # physics
    re: float | None = None
    nu: float | None = None
    u_inf: float = 1.0
    rho: float = 1.0
    upwind: float | None = None
    perturbation: float = 1e-3
    pressure_tol: float = 1e-8
    pressure_solver: str = "direct"
    # time parallelism
    t_end: float = 60.0
    n_t: int = 5
    k_max: int | None = None
    dt_fine: float = 0.05
    dt_coarse: float = 0.1
    algorithm: str = "micromacro"
    same_mesh: bool = False
    scheme: str = "NN"
    flux: str = "average"
    tol: float = 1e-6
    stop: str = "report"
    workers: int = 1
    # diagnostics and output
    a_ref: float | None = None
    conventional_coeffs: bool = False
    audit_time: float | None = None
    write_slices: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.re is not None and self.nu is not None:
            raise ConfigurationError("specify exactly one of 're' and 'nu'")
        if self.re is None and self.nu is None:
            self.re = 100.0
        if self.re is not None and not self.re > 0:
            raise ConfigurationError("re must be positive")
        if self.mode not in ("parareal", "serial"):
            raise ConfigurationError(f"mode must be 'parareal' or 'serial', got {self.mode!r}")
        if self.stop not in ("report", "live"):
            raise ConfigurationError(f"stop must be 'report' or 'live', got {self.stop!r}")
        self.scheme = TransferScheme.parse(self.scheme).value
        self.flux = FluxMode.parse(self.flux).value
        self.algorithm = Algorithm.parse(self.algorithm).value
        if self.same_mesh and self.algorithm != Algorithm.CLASSIC.value:
            raise ConfigurationError(
                "same_mesh requires the classic algorithm; micro-macro needs two levels")
        self.mesh_config().validate()
        self.coeff_params()
        self.problem().solver_params(self.dt_fine)
        if self.mode == "parareal":
            self.pint_config()

    @property
    def diameter(self):
        return 2.0 * self.radius

    @property
    def viscosity(self):
        if self.nu is not None:
            return self.nu
        return viscosity_from_reynolds(self.re, self.u_inf, self.diameter)

    @property
    def reynolds(self):
        if self.re is not None:
            return self.re
        return self.u_inf * self.diameter / self.nu

    @property
    def upwind_blend(self):
        if self.upwind is not None:
            return self.upwind
        return AUTO_UPWIND if self.reynolds > AUTO_UPWIND_RE else 0.0

    def mesh_config(self):
        return MeshConfig(self.length, self.height, self.cyl_x, self.cyl_y,
                          self.radius, self.nx, self.ny, self.coarsening)

    def problem(self):
        return FlowProblem(self.mesh_config(), self.viscosity, self.u_inf,
                           self.upwind_blend, self.perturbation,
                           self.pressure_tol, self.pressure_solver)

    def coeff_params(self):
        return CoeffParams(self.rho, self.diameter, self.u_inf, self.a_ref,
                           self.conventional_coeffs)

    def pint_config(self, **overrides):
        kw = dict(T=self.t_end, n_t=self.n_t, dt_fine=self.dt_fine,
                  dt_coarse=self.dt_coarse, K=self.k_max, scheme=self.scheme,
                  algorithm=self.algorithm, flux_mode=self.flux, tol=self.tol,
                  stop_mode=StopMode(self.stop), workers=self.workers,
                  problem=self.problem())
        kw.update(overrides)
        return PintConfig(**kw)

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _field_type(key):
    kind = _FIELDS[key].type
    args = [a for a in typing.get_args(kind) if a is not type(None)]
    return (args[0], True) if args else (kind, False)


def _convert(key, text, line):
    kind, optional = _field_type(key)
    if optional and text.lower() == "none":
        return None
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
    else:
        try:
            return kind(text)
        except ValueError:
            pass
    raise ConfigurationError(f"{key}: cannot read {text!r} as {kind.__name__}", line)


def parse_config_text(text):
    values, seen = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, _, value = (s.strip() for s in line.partition("="))
        key = key.lower()
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigurationError(f"duplicate key {key!r} (first on line {seen[key]})", lineno)
        seen[key] = lineno
        values[key] = _convert(key, value, lineno)
    try:
        return ExperimentConfig(**values)
    except ConfigurationError as exc:
        # blame the last line naming a key mentioned in the message
        msg = str(exc)
        lines = [n for k, n in seen.items() if re.search(rf"\b{k}\b", msg)]
        if exc.line is None and lines:
            raise ConfigurationError(msg, max(lines)) from None
        raise


def parse_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_config_text(path.read_text())


def serialize_config(config):
    lines = []
    for name, value in config.to_dict().items():
        if value is None:
            continue
        lines.append(f"{name} = {value!r}" if isinstance(value, float) else
                     f"{name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(config):
    return hashlib.sha256(serialize_config(config).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    label: str
    config_hash: str
    started: str
    finished: str = ""
    files: list = dataclasses.field(default_factory=list)
    versions: dict = dataclasses.field(default_factory=dict)
    config: dict = dataclasses.field(default_factory=dict)

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")
        return path

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _versions():
    return {"mmparareal": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


class _Outputs:
    """Tracks written artifacts for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def add(self, *paths):
        for p in paths:
            rel = Path(p).resolve().relative_to(self.root.resolve()).as_posix()
            if rel not in self.files:
                self.files.append(rel)


def cmd_mesh(config, out):
    pair = build_mesh_pair(config.mesh_config())
    summary = {}
    for level, mesh in (("fine", pair.fine), ("coarse", pair.coarse)):
        summary[level] = {
            "nx": mesh.nx, "ny": mesh.ny, "dx": mesh.dx, "dy": mesh.dy,
            "solid_cells": int(mesh.solid.sum()),
            "surface_faces": len(mesh.surface),
            "wetted_length": mesh.surface.total_area,
        }
        out.add(write_field(out.root / f"mask_{level}.fdump", "solid",
                            mesh.solid.astype(float), 0.0))
    path = out.root / "mesh.json"
    path.write_text(json.dumps(summary, indent=2) + "\n")
    out.add(path)
    for level, s in summary.items():
        print(f"{level:6s} {s['nx']}x{s['ny']}  dx={s['dx']:g}  "
              f"solid={s['solid_cells']}  surface faces={s['surface_faces']}")
    return summary


def _force_summary(samples, config):
    params = config.coeff_params()
    info = {}
    if not samples:
        return info
    tail = [s for s in samples if s.t >= 0.5 * samples[-1].t]
    cd = drag_coefficient(np.array([s.f_D for s in tail]), params)
    cl = lift_coefficient(np.array([s.f_L for s in tail]), params)
    info["C_D_mean"] = float(cd.mean())
    info["C_L_amplitude"] = float(0.5 * np.ptp(cl))
    try:
        est = strouhal(samples, config.diameter, config.u_inf)
    except ValueError as exc:
        info["strouhal_note"] = str(exc)
    else:
        info["strouhal"] = None if est is None else est.strouhal
        if est is not None:
            info["shedding_periods"] = est.periods
    return info


def cmd_run(config, out):
    params = config.coeff_params()
    summary = {"reynolds": config.reynolds, "nu": config.viscosity,
               "upwind": config.upwind_blend}
    if config.mode == "serial":
        pair = build_mesh_pair(config.mesh_config())
        fine = Propagator(pair.fine, config.problem().solver_params(config.dt_fine))
        rec = ForceRecorder(config.viscosity)
        state = initial_state(pair.fine, config.u_inf, config.perturbation)
        state = fine.propagate(state, 0.0, config.t_end, rec)
        out.add(write_force_csv(out.root / "forces.csv", rec.samples, params))
        out.add(*write_state(out.root / "final", state))
        summary.update(_force_summary(rec.samples, config))
    else:
        pc = config.pint_config()
        report = run(pc, out.root if config.write_slices else None)
        out.add(*write_report(report, out.root).values())
        for d in report.snapshots.values():
            out.add(*sorted(d.glob("*.fdump")))
        if report.reference is not None and report.reference.forces:
            out.add(write_force_csv(out.root / "forces_reference.csv",
                                    report.reference.forces, params))
            summary.update(_force_summary(report.reference.forces, config))
        if report.coarse_forces:
            out.add(write_force_csv(out.root / "forces_coarse.csv",
                                    report.coarse_forces, params))
        for k, samples in sorted(report.forces.items()):
            out.add(write_force_csv(out.root / f"forces_k{k}.csv", samples, params))
        summary.update({
            "iterations": report.iterations, "K": pc.K,
            "converged": report.converged,
            "final_errors": report.errors[-1],
            "absolute_norm": sorted(report.absolute[-1]),
            "m_theoretical": str(report.m_theoretical),
            "m_measured": report.m_measured if report.iterations else None,
        })
    path = out.root / "summary.json"
    path.write_text(json.dumps(summary, indent=2) + "\n")
    out.add(path)
    return summary


def _snapshot(config, prop, out_dir, t):
    """Serial state at ``t``, reusing a stored snapshot when present."""
    try:
        state = read_state(out_dir, prop.mesh)
    except (OSError, ValueError):
        state = None
    if state is not None and state.t == t:
        return state
    state = initial_state(prop.mesh, config.u_inf, config.perturbation)
    state = prop.propagate(state, 0.0, t)
    write_state(out_dir, state)
    return state


def cmd_audit(config, out):
    pair = build_mesh_pair(config.mesh_config())
    t = config.t_end if config.audit_time is None else config.audit_time
    prob = config.problem()
    f = _snapshot(config, Propagator(pair.fine, prob.solver_params(config.dt_fine)),
                  out.root / "snapshots" / "fine", t)
    g = _snapshot(config, Propagator(pair.coarse, prob.solver_params(config.dt_coarse)),
                  out.root / "snapshots" / "coarse", t)
    out.add(*sorted((out.root / "snapshots").rglob("*.fdump")))
    path = out.root / "audit.csv"
    reports = []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for scheme in TransferScheme:
            rep = consistency_audit(g, f, Transfer(pair, scheme, config.flux, config.u_inf))
            reports.append(rep)
            for row in rep.rows():
                w.writerow([row[0], row[1]] + [f"{x:.6e}" for x in row[2:]])
    out.add(path)
    for rep in reports:
        for s, var, rl, lr, rp in rep.rows():
            print(f"{s:3s} {var:3s}  RL {rl:.2e}  LR {lr:.2e}  RP {rp:.2e}")
    return reports


def _read_errors(path):
    table = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            table.setdefault(int(row["k"]), {})[row["var"]] = float(row["err"])
    return table


def cmd_report(run_dirs, out):
    """Merge completed runs into error-vs-k tables and C_L overlays."""
    if not run_dirs:
        raise AggregationError("no run directories given")
    runs = []
    for d in run_dirs:
        d = Path(d)
        try:
            manifest = RunManifest.read(d / "manifest.json")
            errors = _read_errors(d / "errors.csv")
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise AggregationError(f"{d}: not a completed parareal run ({exc})") from None
        runs.append((d, manifest, errors))
    t_ends = {m.config.get("t_end") for _, m, _ in runs}
    if len(t_ends) != 1:
        raise AggregationError(f"runs have different end times {sorted(t_ends)}")

    names = []
    for d, m, _ in runs:
        name = d.resolve().name
        while name in names:
            name += "_"
        names.append(name)
    k_all = sorted({k for _, _, e in runs for k in e})
    for var in VARIABLES:
        path = out.root / f"convergence_{var}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k"] + names)
            for k in k_all:
                w.writerow([k] + [repr(e[k][var]) if k in e and var in e[k] else ""
                                  for _, _, e in runs])
        out.add(path)

    for name, (d, m, _) in zip(names, runs):
        series = {}
        ref = d / "forces_reference.csv"
        if ref.exists():
            series["reference"] = read_force_csv(ref)
        for p in sorted(d.glob("forces_k*.csv"), key=lambda p: int(p.stem[8:])):
            series[p.stem[7:]] = read_force_csv(p)
        if not series:
            continue
        n_t = m.config.get("n_t")
        t0 = m.config["t_end"] * (n_t - 1) / n_t
        params = ExperimentConfig(**{k: v for k, v in m.config.items()
                                     if k in _FIELDS}).coeff_params()
        path = out.root / f"lift_last_slice_{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "t", "C_L"])
            for label, samples in series.items():
                for s in samples:
                    if s.t >= t0 - 1e-9:
                        w.writerow([label, repr(s.t),
                                    repr(float(lift_coefficient(s.f_L, params)))])
        out.add(path)
    print(f"merged {len(runs)} run(s) into {out.root}")
    return names


def _output_dir(args, label):
    if args.out:
        return Path(args.out)
    root = os.environ.get("MMP_OUT_DIR")
    return Path(root) / label if root else Path("runs") / label


def build_parser():
    p = argparse.ArgumentParser(
        prog="mmparareal",
        description="Micro-macro Parareal for channel flow past a cylinder.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="key = value configuration file")
        sp.add_argument("--out", help="output directory")

    for name, help_ in (("mesh", "write the mesh and mask summary"),
                        ("run", "serial or Parareal run per configuration"),
                        ("audit", "transfer-operator consistency tables")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--algorithm", choices=["classic", "micromacro"])
        sp.add_argument("--same-mesh", action="store_true",
                        help="coarse and fine propagators share the fine mesh")
        sp.add_argument("--scheme", choices=["nn", "in", "cp"])
        sp.add_argument("--flux", choices=["average", "projected"])
    sp = sub.add_parser("report", help="aggregate completed runs")
    sp.add_argument("runs", nargs="+", type=Path)
    sp.add_argument("--out", help="output directory")
    return p


def _load(args):
    config = parse_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.algorithm:
        overrides["algorithm"] = args.algorithm
    if args.same_mesh:
        overrides["same_mesh"] = True
        overrides.setdefault("algorithm", "classic")
    if args.scheme:
        overrides["scheme"] = args.scheme
    if args.flux:
        overrides["flux"] = args.flux
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            out = _Outputs(_output_dir(args, "report"))
            manifest = RunManifest("report", "report", "", _now(), versions=_versions(),
                                   config={"runs": [str(r) for r in args.runs]})
            cmd_report(args.runs, out)
        else:
            config = _load(args)
            out = _Outputs(_output_dir(args, config.label))
            manifest = RunManifest(args.command, config.label, config_hash(config),
                                   _now(), versions=_versions(), config=config.to_dict())
            (out.root / "config.txt").write_text(serialize_config(config))
            out.add(out.root / "config.txt")
            start = time.perf_counter()
            {"mesh": cmd_mesh, "run": cmd_run, "audit": cmd_audit}[args.command](config, out)
            print(f"{args.command} finished in {time.perf_counter() - start:.1f} s -> {out.root}")
        manifest.finished = _now()
        manifest.files = out.files
        manifest.write(out.root)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, SliceFailure) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ParallelDivergenceError as exc:
        print(f"parareal diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except AggregationError as exc:
        print(f"cannot aggregate: {exc}", file=sys.stderr)
        return EXIT_AGGREGATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
