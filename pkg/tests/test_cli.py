import csv
import dataclasses
import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mmparareal.cli as cli
from mmparareal.cli import (EXIT_AGGREGATION, EXIT_CONFIG, EXIT_DIVERGENCE,
                            EXIT_OK, EXIT_SOLVER, ExperimentConfig, main,
                            parse_config, parse_config_text, serialize_config)
from mmparareal.errors import (ConfigurationError, ParallelDivergenceError,
                               SliceFailure, SolverDivergenceError)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TINY_CFG = CONFIGS / "desk" / "tiny_exactness.cfg"


def write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_table_row_config(tmp_path):
    cfg = parse_config(write(tmp_path, "re = 100\ndt_fine = 0.05\ndt_coarse = 0.1\n"
                                       "n_t = 5\nscheme = NN\nt_end = 200\n"))
    assert cfg.reynolds == 100 and cfg.viscosity == 0.02
    assert cfg.pint_config().K == 3
    assert cfg.pint_config().m_theoretical == 8
    assert cfg.upwind_blend == 0.0


def test_empty_file_gives_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, "# nothing here\n\n"))
    assert cfg == ExperimentConfig()
    assert cfg.re == 100.0 and (cfg.nx, cfg.ny, cfg.t_end) == (128, 64, 60.0)


@pytest.mark.parametrize("text, line", [
    ("re = 100\nnu = 0.02\n", 2),
    ("n_t = 5\nspeed = 3\n", 2),
    ("nx = lots\n", 1),
    ("re = 100\n\nre = 200\n", 3),
    ("just words\n", 1),
    ("scheme = spline\n", 1),
    ("t_end = 10\ndt_fine = 0.3\n", 2),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigurationError) as info:
        parse_config_text(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_missing_file():
    with pytest.raises(ConfigurationError):
        parse_config("/nonexistent/run.cfg")


def test_automatic_upwind_and_viscosity():
    assert ExperimentConfig(re=1000, dt_fine=0.02, dt_coarse=0.025).upwind_blend == 0.1
    assert ExperimentConfig(re=400, dt_fine=0.02, dt_coarse=0.05).upwind_blend == 0.0
    cfg = ExperimentConfig(nu=0.01)
    assert cfg.reynolds == 200 and cfg.re is None


@settings(max_examples=25, deadline=None)
@given(re=st.sampled_from([100.0, 200.0, 1000.0]), n_t=st.sampled_from([5, 10, 20]),
       scheme=st.sampled_from(["NN", "IN", "CP"]), flux=st.sampled_from(["average", "projected"]),
       workers=st.integers(1, 8), label=st.from_regex(r"[a-z][a-z0-9_]{0,10}", fullmatch=True))
def test_config_round_trip(re, n_t, scheme, flux, workers, label):
    cfg = ExperimentConfig(re=re, n_t=n_t, scheme=scheme, flux=flux, workers=workers,
                           label=label, t_end=200.0)
    again = parse_config_text(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


@pytest.mark.parametrize("path", sorted(CONFIGS.rglob("*.cfg")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    parse_config(path)


def test_mesh_command(tmp_path, capsys):
    assert main(["mesh", "--out", str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / "mesh.json").read_text())
    assert summary["fine"]["solid_cells"] == 52
    assert summary["coarse"]["nx"] == 64
    assert "solid=52" in capsys.readouterr().out


def test_run_writes_complete_manifest(tmp_path):
    out = tmp_path / "r"
    assert main(["run", "--config", str(TINY_CFG), "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["nx"] == 32 and len(manifest["config_hash"]) == 64
    for rel in manifest["files"]:
        assert (out / rel).stat().st_size > 0
    names = set(manifest["files"])
    for required in ("errors.csv", "timings.csv", "speedup.csv", "forces_reference.csv",
                     "forces_k1.csv", "summary.json", "config.txt",
                     "slices/k0/t0/Ux.fdump"):
        assert required in names
    assert parse_config(out / "config.txt") == parse_config(TINY_CFG)


def test_five_slice_run_has_at_most_four_iterations(tmp_path):
    cfg = write(tmp_path, TINY_CFG.read_text().replace("n_t = 4", "n_t = 5")
                .replace("t_end = 4", "t_end = 5").replace("k_max = 3", "k_max = none"))
    out = tmp_path / "r"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    with (out / "errors.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    ks = {int(r["k"]) for r in rows if r["var"] == "Ux"}
    assert len(ks) <= 4 and max(ks) == 3


def test_classic_same_mesh_uses_time_step_ratio(tmp_path):
    out = tmp_path / "c"
    assert main(["run", "--config", str(TINY_CFG), "--algorithm", "classic",
                 "--same-mesh", "--out", str(out)]) == EXIT_OK
    with (out / "speedup.csv").open() as fh:
        assert {r["m_theoretical"] for r in csv.DictReader(fh)} == {"2"}


def test_same_mesh_conflicts_with_micro_macro():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(algorithm="micromacro", same_mesh=True)


def test_csvs_independent_of_worker_count(tmp_path):
    outs = []
    for w in (1, 8):
        out = tmp_path / f"w{w}"
        assert main(["run", "--config", str(TINY_CFG), "--workers", str(w),
                     "--out", str(out)]) == EXIT_OK
        outs.append(out)
    for name in ("errors.csv", "forces_reference.csv", "forces_k1.csv", "forces_k3.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MMP_OUT_DIR", str(tmp_path))
    assert main(["mesh", "--config", str(TINY_CFG)]) == EXIT_OK
    assert (tmp_path / "tiny" / "mesh.json").exists()


def test_serial_mode(tmp_path):
    cfg = write(tmp_path, "mode = serial\nnx = 32\nny = 16\nt_end = 2\n")
    out = tmp_path / "s"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert len((out / "forces.csv").read_text().splitlines()) == 41
    assert (out / "final" / "p.fdump").exists()


def test_audit_command(tmp_path):
    cfg = write(tmp_path, "nx = 32\nny = 16\nt_end = 2\n")
    out = tmp_path / "a"
    assert main(["audit", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    with (out / "audit.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["scheme", "variable", "err_RL", "err_LR", "err_RP"]
    assert len(rows) == 9
    nn = [r for r in rows if r["scheme"] == "NN"]
    assert all(float(r["err_RL"]) == 0.0 for r in nn)
    # second invocation reuses the stored snapshots
    before = (out / "snapshots" / "fine" / "p.fdump").stat().st_mtime_ns
    assert main(["audit", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert (out / "snapshots" / "fine" / "p.fdump").stat().st_mtime_ns == before


def test_exit_codes(tmp_path, monkeypatch):
    bad = write(tmp_path, "re = 1\nnu = 1\n", "bad.cfg")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "b")]) == EXIT_CONFIG

    def raiser(exc):
        def fake(*args, **kwargs):
            raise exc
        return fake

    monkeypatch.setattr(cli, "run", raiser(SliceFailure(1, 2, SolverDivergenceError("nan"))))
    assert main(["run", "--config", str(TINY_CFG), "--out", str(tmp_path / "x")]) == EXIT_SOLVER
    monkeypatch.setattr(cli, "run", raiser(ParallelDivergenceError("growth")))
    assert main(["run", "--config", str(TINY_CFG), "--out", str(tmp_path / "y")]) == EXIT_DIVERGENCE


def _tiny_run(tmp_path, name, **changes):
    cfg = dataclasses.replace(parse_config(TINY_CFG), **changes)
    path = write(tmp_path, serialize_config(cfg), f"{name}.cfg")
    out = tmp_path / name
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
    return out


def test_report_merges_runs(tmp_path):
    runs = [_tiny_run(tmp_path, "nt2", n_t=2, k_max=1),
            _tiny_run(tmp_path, "nt4", n_t=4, k_max=3)]
    out = tmp_path / "rep"
    assert main(["report", *map(str, runs), "--out", str(out)]) == EXIT_OK
    with (out / "convergence_p.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "nt2", "nt4"]
    assert len(rows) == 5 and rows[-1][1] == ""
    overlay = (out / "lift_last_slice_nt4.csv").read_text().splitlines()
    assert overlay[0] == "series,t,C_L"
    assert {line.split(",")[0] for line in overlay[1:]} >= {"reference", "k1", "k3"}

    single = tmp_path / "rep1"
    assert main(["report", str(runs[0]), "--out", str(single)]) == EXIT_OK


def test_report_rejects_different_end_times(tmp_path):
    a = _tiny_run(tmp_path, "a")
    b = _tiny_run(tmp_path, "b", t_end=2.0, n_t=2, k_max=1)
    assert main(["report", str(a), str(b), "--out", str(tmp_path / "r")]) == EXIT_AGGREGATION
    assert main(["report", str(tmp_path / "missing"), "--out",
                 str(tmp_path / "r2")]) == EXIT_AGGREGATION
