"""CLI contracts: parsing, validation-first behavior, exit codes, artifacts."""

import csv
import json
import os

import pytest

from skipscale.cli import (
    EXIT_CHECK_FAILED,
    EXIT_CONFIG,
    EXIT_OK,
    main,
    parse_and_validate,
)
from skipscale.config import ConfigError, schema_help


MINI_EXPERIMENT = """
[experiment]
name = mini
kind = oscillation
[model]
m = 8
l = 2
n = 2
[policies]
policies = unit
[training]
steps = 12
batch = 4
seeds = 0
[schedule]
t = 50
[logging]
log_interval = 10
window = 5
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# ---------------------------------------------------------------------------
# parse_and_validate
# ---------------------------------------------------------------------------

def test_parse_experiment_with_seed_override(tmp_path):
    path = write_cfg(tmp_path, MINI_EXPERIMENT)
    cli = parse_and_validate(["experiment", "--config", path, "--seed", "7"])
    assert cli.command == "experiment"
    assert cli.seed_override == 7
    assert cli.effective.seeds == (7,)


def test_missing_config_file_exits_3(tmp_path, capsys):
    missing = str(tmp_path / "nope.cfg")
    code = main(["experiment", "--config", missing])
    assert code == EXIT_CONFIG
    assert missing in capsys.readouterr().err


def test_override_precedence_and_manifest_echo(tmp_path):
    path = write_cfg(tmp_path, MINI_EXPERIMENT)
    out = str(tmp_path / "out")
    code = main(["experiment", "--config", path, "--override", "model.N=3",
                 "--out", out])
    assert code == EXIT_OK
    run_dir = os.path.join(out, "mini")
    with open(os.path.join(run_dir, "manifest.json")) as f:
        manifest = json.load(f)
    assert manifest["config"]["N"] == 3


def test_unknown_key_is_an_error(tmp_path):
    path = write_cfg(tmp_path, MINI_EXPERIMENT + "\n[model]\nwidth = 9\n")
    with pytest.raises(ConfigError):
        parse_and_validate(["experiment", "--config", path])


def test_unknown_section_is_an_error(tmp_path):
    path = write_cfg(tmp_path, MINI_EXPERIMENT + "\n[mystery]\nx = 1\n")
    assert main(["experiment", "--config", path]) == EXIT_CONFIG


def test_bad_override_shape(tmp_path):
    path = write_cfg(tmp_path, MINI_EXPERIMENT)
    assert main(["experiment", "--config", path, "--override", "steps=2"]) == EXIT_CONFIG


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc_info:
        parse_and_validate(["no-such-command"])
    assert exc_info.value.code == 2


def test_help_prints_schema(capsys):
    with pytest.raises(SystemExit) as exc_info:
        parse_and_validate(["--help"])
    assert exc_info.value.code == 0
    out = capsys.readouterr().out
    assert "[experiment]" in out and "[check]" in out
    assert "kappa_grid" in out
    assert schema_help() in out


def test_theory_check_single_kappa_rejected_before_compute(tmp_path):
    text = """
[check]
kind = hidden-norm
kappa_grid = 0.7
[model]
m = 8
n = 2
"""
    path = write_cfg(tmp_path, text, "theory.cfg")
    out = str(tmp_path / "out")
    code = main(["theory-check", "--config", path, "--out", out])
    assert code == EXIT_CONFIG
    assert not os.path.exists(out)  # validation failed before any writes


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def test_math_check_writes_csv_and_exits_zero(tmp_path, capsys):
    out = str(tmp_path / "mc")
    code = main(["math-check", "--out", out, "--override", "mathcheck.samples=20000"])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert "pass" in printed
    with open(os.path.join(out, "math-check", "checks.csv")) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["name", "analytic", "empirical", "samples", "rel_err", "pass"]
    assert len(rows) > 8
    assert all(r[-1] == "True" for r in rows[1:])


def test_experiment_rerun_gets_suffixed_directory(tmp_path):
    path = write_cfg(tmp_path, MINI_EXPERIMENT)
    out = str(tmp_path / "out")
    assert main(["experiment", "--config", path, "--out", out]) == EXIT_OK
    marker = os.path.join(out, "mini", "manifest.json")
    original = open(marker).read()
    assert main(["experiment", "--config", path, "--out", out]) == EXIT_OK
    assert open(marker).read() == original  # untouched
    assert os.path.isdir(os.path.join(out, "mini.1"))


def test_theory_check_robustness_small(tmp_path):
    text = """
[check]
kind = robustness
probes = 16
ascent_steps = 30
eps_grid = 0.0, 0.1
[model]
m = 16
l = 2
n = 3
"""
    path = write_cfg(tmp_path, text, "rob.cfg")
    out = str(tmp_path / "rob-out")
    code = main(["theory-check", "--config", path, "--out", out])
    assert code == EXIT_OK
    rows_path = os.path.join(out, "theory-robustness", "rows.csv")
    with open(rows_path) as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["eps"] == "0.0"
    assert float(rows[0]["max_deviation"]) == 0.0


def test_theory_check_noise_small(tmp_path):
    text = """
[check]
kind = noise
probes = 16
sigma_grid = 0.0, 0.2
[model]
m = 16
l = 2
n = 2
"""
    path = write_cfg(tmp_path, text, "noise.cfg")
    out = str(tmp_path / "noise-out")
    assert main(["theory-check", "--config", path, "--out", out]) == EXIT_OK


def test_theory_check_threshold_failure_exits_one(tmp_path):
    text = """
[check]
kind = hidden-norm
seeds = 3
probes = 8
kappa_grid = 1.0, 0.7, 0.4
min_r_squared = 0.999999
[model]
m = 8
l = 2
n = 2
"""
    path = write_cfg(tmp_path, text, "strict.cfg")
    out = str(tmp_path / "strict-out")
    assert main(["theory-check", "--config", path, "--out", out]) == EXIT_CHECK_FAILED


def test_inspect_checkpoint(tmp_path, capsys):
    from skipscale.checkpoint import save_checkpoint
    from skipscale.rng import Rng
    from skipscale.scaling import GeometricScaling
    from skipscale.unet import init_unet

    model = init_unet(8, 2, 2, GeometricScaling(0.7), Rng(1, 1))
    ckpt = str(tmp_path / "model.npz")
    save_checkpoint(model, ckpt)
    assert main(["inspect", ckpt]) == EXIT_OK
    out = capsys.readouterr().out
    assert "m=8 l=2 N=2" in out
    assert "geometric" in out
    assert "parameters=640" in out  # 10 matrices of 64 entries


def test_inspect_missing_checkpoint(tmp_path):
    assert main(["inspect", str(tmp_path / "missing.npz")]) == EXIT_CONFIG


def test_inspect_corrupt_checkpoint_is_runtime_error(tmp_path):
    from skipscale.cli import EXIT_RUNTIME

    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"this is not a checkpoint")
    assert main(["inspect", str(bad)]) == EXIT_RUNTIME


def test_plot_renders_svgs(tmp_path):
    path = write_cfg(tmp_path, MINI_EXPERIMENT)
    out = str(tmp_path / "out")
    assert main(["experiment", "--config", path, "--out", out]) == EXIT_OK
    run_dir = os.path.join(out, "mini")
    assert main(["plot", run_dir]) == EXIT_OK
    files = os.listdir(run_dir)
    assert "loss.svg" in files
    assert any(f.endswith("_features.svg") for f in files)
    svg = open(os.path.join(run_dir, "loss.svg")).read()
    assert svg.startswith("<svg") and "polyline" in svg


def test_plot_missing_dir(tmp_path):
    assert main(["plot", str(tmp_path / "nope")]) == EXIT_CONFIG


def test_out_dir_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("SKIPSCALE_OUT", str(tmp_path / "envout"))
    path = write_cfg(tmp_path, MINI_EXPERIMENT)
    assert main(["experiment", "--config", path]) == EXIT_OK
    assert os.path.isdir(os.path.join(str(tmp_path / "envout"), "mini"))


def test_unsafe_kappa_flag_enables_sweep(tmp_path):
    text = """
[experiment]
name = sweep
kind = kappa-sweep
[model]
m = 8
l = 2
n = 2
[training]
steps = 10
batch = 4
seeds = 0
[schedule]
t = 50
[scenario]
kappa_grid = 0.9, 1.2
"""
    path = write_cfg(tmp_path, text, "sweep.cfg")
    out = str(tmp_path / "sweep-out")
    assert main(["experiment", "--config", path, "--out", out]) == EXIT_CONFIG
    assert main(["experiment", "--config", path, "--out", out,
                 "--unsafe-kappa"]) == EXIT_OK


def test_experiment_kinds_write_reports(tmp_path):
    base = """
[experiment]
name = {name}
kind = {kind}
[model]
m = 8
l = 2
n = 2
[policies]
policies = {policies}
[training]
steps = 20
batch = 4
seeds = 0
[schedule]
t = 50
[logging]
log_interval = 10
window = 5
{extra}
"""
    cases = [
        ("m0", "m0-tracking", "unit", "checkpoint_interval = 10\n"),
        ("dir", "direction", "geometric:0.5, reverse-geometric:0.5",
         "checkpoint_interval = 20\n"),
        ("conv", "convergence", "unit",
         "\n[scenario]\nloss_threshold = 1e18\n"),
    ]
    for name, kind, policies, extra in cases:
        if kind in ("m0-tracking", "direction"):
            extra = extra  # logging-section keys continue the section above
        text = base.format(name=name, kind=kind, policies=policies, extra=extra)
        path = write_cfg(tmp_path, text, f"{name}.cfg")
        out = str(tmp_path / f"{name}-out")
        assert main(["experiment", "--config", path, "--out", out]) == EXIT_OK, kind
        report_path = os.path.join(out, name, "report.json")
        assert os.path.exists(report_path), kind
        json.load(open(report_path))


def test_repo_configs_parse():
    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    for name in ("oscillation.cfg", "direction.cfg", "kappa_sweep.cfg"):
        cfg_path = os.path.join(here, "configs", name)
        if name == "kappa_sweep.cfg":
            cli = parse_and_validate(["experiment", "--config", cfg_path,
                                      "--unsafe-kappa"])
        else:
            cli = parse_and_validate(["experiment", "--config", cfg_path])
        assert cli.effective.m == 64
    cli = parse_and_validate(["theory-check", "--config",
                              os.path.join(here, "configs", "theory_hidden_norm.cfg")])
    assert cli.effective.kind == "hidden-norm"
