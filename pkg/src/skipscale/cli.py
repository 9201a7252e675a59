"""Command-line entry point.

Commands: experiment, theory-check, math-check, inspect, plot.
Exit codes are stable API: 0 success, 1 check failure, 2 usage error,
3 config validation error, 4 runtime failure.  Validation runs before any
work: no files are written and no model is allocated until the effective
config passes its schema.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import (
    ConfigError,
    MathCheckConfig,
    TheoryCheckConfig,
    load_experiment_config,
    load_mathcheck_config,
    load_theory_config,
    schema_help,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4

OUT_DIR_ENV = "SKIPSCALE_OUT"


@dataclass
class CliConfig:
    command: str
    config_path: Optional[str] = None
    overrides: list[str] = field(default_factory=list)
    out_dir: Optional[str] = None
    seed_override: Optional[int] = None
    jobs: int = 1
    unsafe_kappa: bool = False
    target: Optional[str] = None  # checkpoint path or run dir
    effective: object = None      # validated command config


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skipscale",
        description="Numerical laboratory for skip-connection coefficient scaling.",
        epilog=schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config: bool):
        p.add_argument("--config", required=needs_config, help="INI config file")
        p.add_argument("--override", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="replace the seed list")
        p.add_argument("--out", default=None,
                       help=f"output directory (default: ${OUT_DIR_ENV} or ./runs)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--unsafe-kappa", action="store_true",
                       help="allow coefficient base values above 1")

    common(sub.add_parser("experiment", help="run a training experiment"), True)
    common(sub.add_parser("theory-check", help="run a bound verifier"), True)
    mc = sub.add_parser("math-check", help="run the distributional check suite")
    common(mc, False)
    ins = sub.add_parser("inspect", help="describe a model checkpoint")
    ins.add_argument("checkpoint", help="path to a .npz checkpoint")
    pl = sub.add_parser("plot", help="render SVG charts for a run directory")
    pl.add_argument("run_dir", help="experiment output directory")
    return parser


def parse_and_validate(argv: list[str]) -> CliConfig:
    """Parse argv and fully validate the chosen command's config.

    Raises ConfigError for anything schema-related; argparse handles usage
    errors itself (exit code 2).
    """
    args = _build_parser().parse_args(argv)
    cli = CliConfig(command=args.command)
    if args.command in ("experiment", "theory-check", "math-check"):
        cli.config_path = args.config
        cli.overrides = list(args.override)
        cli.seed_override = args.seed
        cli.jobs = max(1, args.jobs)
        cli.unsafe_kappa = bool(args.unsafe_kappa)
        cli.out_dir = args.out or os.environ.get(OUT_DIR_ENV) or "runs"
    if args.command == "experiment":
        cfg = load_experiment_config(args.config, cli.overrides, validate=False)
        if cli.seed_override is not None:
            cfg.seeds = (cli.seed_override,)
        if cli.unsafe_kappa:
            cfg.unsafe_kappa = True
        cfg.jobs = cli.jobs
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cli.effective = cfg
    elif args.command == "theory-check":
        tcfg = load_theory_config(args.config, cli.overrides)
        if cli.seed_override is not None:
            tcfg.seed = cli.seed_override
        cli.effective = tcfg
    elif args.command == "math-check":
        mcfg = load_mathcheck_config(args.config, cli.overrides)
        if cli.seed_override is not None:
            mcfg.seed = cli.seed_override
        cli.effective = mcfg
    elif args.command == "inspect":
        cli.target = args.checkpoint
    elif args.command == "plot":
        cli.target = args.run_dir
    return cli


def _run_experiment(cli: CliConfig) -> int:
    from .experiments import (
        convergence_from_records,
        run_cells,
        run_direction_experiment,
        run_kappa_sweep,
        run_m0_tracking,
        write_outputs,
    )

    cfg = cli.effective
    base = os.path.join(cli.out_dir, cfg.name)
    if cfg.kind in ("oscillation", "m0-tracking", "direction", "kappa-sweep", "convergence"):
        if cfg.kind == "kappa-sweep":
            report = run_kappa_sweep(cfg)
            records = report.records
        elif cfg.kind == "direction":
            report = run_direction_experiment(cfg)
            records = report.records
        elif cfg.kind == "m0-tracking":
            report = run_m0_tracking(cfg)
            records = report.records
        else:
            records = run_cells(cfg)
            report = None
            if cfg.kind == "convergence":
                report = convergence_from_records(records, cfg.loss_threshold,
                                                  tuple(cfg.policies))
        out = write_outputs(cfg, records, base)
        if report is not None:
            with open(os.path.join(out, "report.json"), "w") as f:
                json.dump(_report_json(report), f, indent=2, sort_keys=True, default=str)
        print(f"wrote {out}")
        diverged = sum(r.diverged for r in records)
        print(f"cells={len(records)} diverged={diverged}")
        return EXIT_OK
    raise ConfigError(f"unknown experiment kind {cfg.kind!r}")


def _stringify_keys(value):
    if isinstance(value, dict):
        return {
            "/".join(map(str, k)) if isinstance(k, tuple) else str(k):
                _stringify_keys(v)
            for k, v in value.items()
        }
    if isinstance(value, (list, tuple)):
        return [_stringify_keys(v) for v in value]
    return value


def _report_json(report) -> dict:
    from dataclasses import asdict, is_dataclass

    if is_dataclass(report):
        d = asdict(report)
        d.pop("records", None)
        return _stringify_keys(d)
    return _stringify_keys(dict(report))


def _run_theory_check(cli: CliConfig) -> int:
    from .diffusion import make_linear_schedule
    from .rng import Rng
    from .scaling import GeometricScaling
    from .theory import (
        check_gradient_norm_scaling,
        check_hidden_norm_scaling,
        check_robustness_bound,
        estimate_M0_L0,
        noise_injection_probe,
    )
    from .unet import init_unet
    from .experiments import fresh_run_dir

    tcfg: TheoryCheckConfig = cli.effective
    sched = make_linear_schedule(tcfg.schedule_T, tcfg.beta_start, tcfg.beta_end)
    rng = Rng(tcfg.seed, 1)
    out = fresh_run_dir(os.path.join(cli.out_dir, f"theory-{tcfg.kind}"))
    ok = True
    if tcfg.kind in ("hidden-norm", "gradient-norm"):
        fn = check_hidden_norm_scaling if tcfg.kind == "hidden-norm" else check_gradient_norm_scaling
        report = fn(tcfg.bound_config(), sched, rng)
        report.write_csv(os.path.join(out, "rows.csv"))
        summary = report.summary()
        if tcfg.min_r_squared is not None and report.r_squared < tcfg.min_r_squared:
            ok = False
            summary += f"\nFAIL: r_squared {report.r_squared!r} < {tcfg.min_r_squared}"
        if tcfg.min_spearman is not None and (report.spearman_rho or -1) < tcfg.min_spearman:
            ok = False
            summary += f"\nFAIL: spearman {report.spearman_rho!r} < {tcfg.min_spearman}"
    elif tcfg.kind == "robustness":
        model = init_unet(tcfg.m, tcfg.l, tcfg.N, GeometricScaling(0.7), rng.child(1))
        points = rng.child(2).standard_normal((tcfg.m, tcfg.probes))
        est = estimate_M0_L0(model, tcfg.probes, tcfg.ascent_steps, rng.child(3),
                             base_points=points)
        report = check_robustness_bound(model, est, list(tcfg.eps_grid), tcfg.probes,
                                        rng.child(4), base_points=points)
        summary = report.summary()
        ok = all(row["satisfied"] for row in report.per_eps)
        with open(os.path.join(out, "rows.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(report.per_eps[0].keys()))
            w.writeheader()
            w.writerows(report.per_eps)
    else:  # noise
        model = init_unet(tcfg.m, tcfg.l, tcfg.N, GeometricScaling(0.7), rng.child(1))
        report = noise_injection_probe(model, sched, list(tcfg.sigma_grid), tcfg.probes,
                                       rng.child(2))
        infl = [row["inflation"] for row in report.per_sigma]
        ok = all(b >= a - 1e-9 for a, b in zip(infl, infl[1:]))
        summary = "\n".join(
            f"sigma={row['sigma']}: mean_loss={row['mean_loss']!r} "
            f"inflation={row['inflation']!r}" for row in report.per_sigma
        )
        with open(os.path.join(out, "rows.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(report.per_sigma[0].keys()))
            w.writeheader()
            w.writerows(report.per_sigma)
    with open(os.path.join(out, "summary.txt"), "w") as f:
        f.write(summary + "\n")
    print(summary)
    print(f"wrote {out}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _run_mathcheck(cli: CliConfig) -> int:
    from .experiments import fresh_run_dir
    from .mathcheck import run_mathcheck_suite, suite_to_csv
    from .rng import Rng

    mcfg: MathCheckConfig = cli.effective
    rows = run_mathcheck_suite(Rng(mcfg.seed, 1), samples=mcfg.samples)
    out = fresh_run_dir(os.path.join(cli.out_dir, "math-check"))
    suite_to_csv(rows, os.path.join(out, "checks.csv"))
    for r in rows:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.name}: analytic={r.analytic!r} empirical={r.empirical!r} "
              f"rel_err={r.rel_err:.3e}")
    print(f"wrote {out}")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_CHECK_FAILED


def _run_inspect(cli: CliConfig) -> int:
    from .checkpoint import load_checkpoint

    if not os.path.exists(cli.target):
        raise ConfigError(f"checkpoint not found: {cli.target}")
    model = load_checkpoint(cli.target)
    params = model.parameters()
    total = sum(p.data.size for _, p in params)
    print(f"checkpoint: {cli.target}")
    print(f"m={model.m} l={model.l} N={model.N}")
    print(f"policy: {json.dumps(model.policy.describe(), sort_keys=True)}")
    print(f"matrices={len(params)} parameters={total}")
    norms = sorted((float(np.linalg.norm(p.data)), name) for name, p in params)
    print(f"smallest |W|_F: {norms[0][1]} = {norms[0][0]:.6g}")
    print(f"largest  |W|_F: {norms[-1][1]} = {norms[-1][0]:.6g}")
    return EXIT_OK


def _run_plot(cli: CliConfig) -> int:
    from .plotting import write_line_chart

    run_dir = cli.target
    if not os.path.isdir(run_dir):
        raise ConfigError(f"run directory not found: {run_dir}")
    csv_files = sorted(
        f for f in os.listdir(run_dir) if f.startswith("run_") and f.endswith(".csv")
    )
    if not csv_files:
        raise ConfigError(f"no run_*.csv files in {run_dir}")
    loss_series: dict[str, list] = {}
    for fname in csv_files:
        label = fname[len("run_"):-len(".csv")]
        steps, losses, norm_series = [], [], {}
        with open(os.path.join(run_dir, fname)) as f:
            for row in csv.DictReader(f):
                steps.append(float(row["step"]))
                losses.append(float(row["loss_ema"]))
                for key, val in row.items():
                    if key.startswith("h_norm_"):
                        norm_series.setdefault(key, []).append(float(val))
        loss_series[label] = list(zip(steps, losses))
        write_line_chart(
            os.path.join(run_dir, fname.replace(".csv", "_features.svg")),
            {k: list(zip(steps, v)) for k, v in norm_series.items()},
            title=f"feature norms: {label}", x_label="step", y_label="|h_i|",
        )
    write_line_chart(
        os.path.join(run_dir, "loss.svg"), loss_series,
        title="smoothed training loss", x_label="step", y_label="loss (ema)", log_y=True,
    )
    print(f"wrote charts to {run_dir}")
    return EXIT_OK


def dispatch(cli: CliConfig) -> int:
    handlers = {
        "experiment": _run_experiment,
        "theory-check": _run_theory_check,
        "math-check": _run_mathcheck,
        "inspect": _run_inspect,
        "plot": _run_plot,
    }
    return handlers[cli.command](cli)


def main(argv: Optional[list[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cli = parse_and_validate(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return dispatch(cli)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to a stable exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
