"""Seeded end-to-end experiment scenarios over (policy, seed) grids.

Every cell trains its own model on synthetic uniform data with streams derived
from (seed, policy), so cells are independent of scheduling: a worker pool of
any size produces byte-identical CSVs to a serial run.  Logged traces feed the
scenario reports: sliding-window feature-norm oscillation, smoothed-loss
threshold crossings, forward-vs-reverse ladder comparison, base-value sweeps
with divergence accounting, and operator-norm growth at checkpoints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from typing import Optional

import numpy as np

from . import __version__
from .autodiff import InvalidArgumentError
from .diffusion import make_linear_schedule, uniform_source
from .optim import make_optimizer
from .rng import Rng
from .scaling import policy_from_spec, stability_sum
from .theory import estimate_M0_L0
from .unet import TrainingDivergence, init_unet, train_step

RNG_SCHEME = "philox-seed-stream-v1"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    kind: str = "oscillation"  # oscillation | convergence | direction | kappa-sweep | m0-tracking
    m: int = 64
    l: int = 2
    N: int = 12
    policies: tuple = ("unit",)
    steps: int = 3000
    batch: int = 16
    lr: float = 2e-4
    optimizer: str = "adamw"
    beta1: float = 0.99
    beta2: float = 0.999
    weight_decay: float = 0.03
    seeds: tuple = (0, 1, 2, 3, 4)
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    log_interval: int = 10
    window: int = 50
    ema_decay: float = 0.99
    checkpoint_interval: int = 0  # 0 disables operator-norm tracking
    m0_probes: int = 8
    m0_ascent_steps: int = 20
    loss_threshold: Optional[float] = None
    kappa_grid: tuple = ()
    unsafe_kappa: bool = False
    ls_channels: int = 16
    ls_ratio: int = 16
    jobs: int = 1
    out_dir: Optional[str] = None

    def validate(self) -> None:
        if not self.policies:
            raise InvalidArgumentError("at least one policy is required")
        if not self.seeds:
            raise InvalidArgumentError("at least one seed is required")
        min_steps = 0 if self.kind == "m0-tracking" else 1
        if self.steps < min_steps:
            raise InvalidArgumentError(f"steps must be >= {min_steps} for kind {self.kind}")
        if self.batch < 1 or self.log_interval < 1 or self.window < 1:
            raise InvalidArgumentError("batch, log_interval, window must be >= 1")
        if self.kind == "convergence" and self.loss_threshold is None:
            raise InvalidArgumentError("convergence experiments must declare loss_threshold")
        if self.kind == "direction":
            kinds = [p.split(":")[0] for p in self.policies]
            if "geometric" not in kinds or "reverse-geometric" not in kinds:
                raise InvalidArgumentError(
                    "direction experiments need geometric and reverse-geometric policies"
                )
            fwd = {p for p in self.policies if p.startswith("geometric:")}
            rev = {p.split(":", 1)[1] for p in self.policies if p.startswith("reverse-geometric:")}
            if not any(p.split(":", 1)[1] in rev for p in fwd):
                raise InvalidArgumentError("forward and reverse ladders must share a base value")
        if self.kind == "kappa-sweep":
            if not self.kappa_grid:
                raise InvalidArgumentError("kappa-sweep needs a kappa_grid")
            if any(k > 1.0 for k in self.kappa_grid) and not self.unsafe_kappa:
                raise InvalidArgumentError("kappa > 1 in the grid requires unsafe_kappa")
        if self.checkpoint_interval:
            if self.steps % self.checkpoint_interval != 0:
                raise InvalidArgumentError("checkpoint_interval must divide steps")
        for spec in self.policies:
            policy_from_spec(spec, rng=Rng(0, 0), unsafe=self.unsafe_kappa,
                             channels=self.ls_channels, r=self.ls_ratio,
                             connections=self.N)

    def canonical_dict(self) -> dict:
        """Experiment-defining fields only: execution knobs (worker count,
        output location) do not change what gets computed."""
        d = asdict(self)
        d.pop("jobs", None)
        d.pop("out_dir", None)
        return d

    def config_hash(self) -> str:
        payload = json.dumps(self.canonical_dict(), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    policy: str
    seed: int
    config_hash: str
    rows: list[dict] = field(default_factory=list)
    diverged: bool = False
    divergence_step: Optional[int] = None
    oscillation_score: Optional[float] = None
    final_loss_ema: Optional[float] = None
    m0_trajectory: list[tuple[int, float]] = field(default_factory=list)
    wall_time_s: float = 0.0


def oscillation_score(rows: list[dict], N: int, window: int) -> Optional[float]:
    """Sliding-window standard deviation of each per-level feature-norm trace,
    averaged over window positions and levels."""
    if not rows:
        return None
    traces = np.array([[row[f"h_norm_{i}"] for i in range(N)] for row in rows])
    w = min(window, traces.shape[0])
    scores = []
    for start in range(traces.shape[0] - w + 1):
        scores.append(traces[start : start + w].std(axis=0, ddof=0))
    return float(np.mean(scores))


def run_training_cell(cfg: ExperimentConfig, policy_spec: str, seed: int) -> RunRecord:
    """Train one (policy, seed) cell and log the trace rows.

    Streams depend on the seed only, not the policy: cells sharing a seed see
    identical initial weights, batches, and noise draws, so across-policy
    comparisons are paired and the policy is the only moving part.
    """
    started = time.perf_counter()
    init_rng = Rng(seed, 1)
    data_rng = Rng(seed, 2)
    step_rng = Rng(seed, 3)
    m0_rng = Rng(seed, 4)

    policy = policy_from_spec(policy_spec, rng=init_rng, unsafe=cfg.unsafe_kappa,
                              channels=cfg.ls_channels, r=cfg.ls_ratio,
                              connections=cfg.N)
    model = init_unet(cfg.m, cfg.l, cfg.N, policy, init_rng)
    sched = make_linear_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end)
    data = uniform_source(cfg.m)
    opt = make_optimizer(cfg.optimizer, cfg.lr, betas=(cfg.beta1, cfg.beta2),
                         weight_decay=cfg.weight_decay)

    record = RunRecord(policy=policy_spec, seed=seed, config_hash=cfg.config_hash())

    def checkpoint(step: int) -> Optional[float]:
        est = estimate_M0_L0(model, cfg.m0_probes, cfg.m0_ascent_steps,
                             m0_rng.child(step))
        record.m0_trajectory.append((step, est.M0))
        return est.M0

    if cfg.checkpoint_interval:
        checkpoint(0)
    ema = None
    for step in range(1, cfg.steps + 1):
        batch = data.sample(cfg.batch, data_rng)
        try:
            report = train_step(model, batch, sched, opt, step_rng)
        except TrainingDivergence as exc:
            record.diverged = True
            record.divergence_step = step
            record.rows.append(_row(step, float("inf"), float("inf"), exc.report.feature_norms,
                                    float("nan"), None, cfg.N))
            break
        ema = report.loss if ema is None else cfg.ema_decay * ema + (1 - cfg.ema_decay) * report.loss
        m0_val = None
        if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            m0_val = checkpoint(step)
        if step % cfg.log_interval == 0 or step == cfg.steps or m0_val is not None:
            max_grad = max(report.grad_norms.values()) if report.grad_norms else 0.0
            record.rows.append(_row(step, report.loss, ema, report.feature_norms,
                                    max_grad, m0_val, cfg.N))
    record.oscillation_score = oscillation_score(record.rows, cfg.N, cfg.window)
    record.final_loss_ema = float("inf") if record.diverged else (
        record.rows[-1]["loss_ema"] if record.rows else None
    )
    record.wall_time_s = time.perf_counter() - started
    return record


def _row(step, loss, ema, feature_norms, max_grad, m0_val, N) -> dict:
    row = {"step": step, "loss": loss, "loss_ema": ema}
    for i in range(N):
        row[f"h_norm_{i}"] = feature_norms[i] if i < len(feature_norms) else float("nan")
    row["max_grad_norm"] = max_grad
    row["m0_if_checkpoint"] = "" if m0_val is None else m0_val
    return row


def _cell_worker(args) -> RunRecord:
    cfg_dict, policy_spec, seed = args
    cfg = ExperimentConfig(**cfg_dict)
    return run_training_cell(cfg, policy_spec, seed)


def run_cells(cfg: ExperimentConfig) -> list[RunRecord]:
    """All (policy, seed) cells, serial or in a process pool; output order and
    content are independent of the pool size."""
    cfg.validate()
    cells = [(p, s) for p in cfg.policies for s in cfg.seeds]
    if cfg.jobs <= 1 or len(cells) == 1:
        records = [run_training_cell(cfg, p, s) for p, s in cells]
    else:
        cfg_dict = asdict(cfg)
        cfg_dict["policies"] = tuple(cfg_dict["policies"])
        cfg_dict["seeds"] = tuple(cfg_dict["seeds"])
        cfg_dict["kappa_grid"] = tuple(cfg_dict["kappa_grid"])
        with get_context("spawn").Pool(min(cfg.jobs, len(cells))) as pool:
            records = pool.map(_cell_worker, [(cfg_dict, p, s) for p, s in cells])
    return records


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def _sanitize(name: str) -> str:
    return name.replace(":", "_").replace("/", "_")


def fresh_run_dir(base: str) -> str:
    """Never reuse an existing directory: append a numeric suffix instead."""
    path = base
    counter = 1
    while os.path.exists(path):
        path = f"{base}.{counter}"
        counter += 1
    os.makedirs(path)
    return path


def csv_field(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_outputs(cfg: ExperimentConfig, records: list[RunRecord],
                  out_dir: Optional[str] = None) -> str:
    out = fresh_run_dir(out_dir or cfg.out_dir)
    manifest = {
        "config": cfg.canonical_dict(),
        "config_hash": cfg.config_hash(),
        "rng_scheme": RNG_SCHEME,
        "version": __version__,
    }
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2, default=list)
    fields = ["step", "loss", "loss_ema"] + [f"h_norm_{i}" for i in range(cfg.N)] + \
        ["max_grad_norm", "m0_if_checkpoint"]
    for rec in sorted(records, key=lambda r: (r.policy, r.seed)):
        fname = f"run_{_sanitize(rec.policy)}_seed{rec.seed}.csv"
        with open(os.path.join(out, fname), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(fields)
            for row in rec.rows:
                w.writerow([csv_field(row[k]) for k in fields])
    with open(os.path.join(out, "summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["policy", "seed", "diverged", "divergence_step",
                    "oscillation_score", "final_loss_ema", "config_hash"])
        for rec in sorted(records, key=lambda r: (r.policy, r.seed)):
            w.writerow([
                rec.policy, rec.seed, rec.diverged,
                "" if rec.divergence_step is None else rec.divergence_step,
                csv_field(rec.oscillation_score if rec.oscillation_score is not None else ""),
                csv_field(rec.final_loss_ema if rec.final_loss_ema is not None else ""),
                rec.config_hash,
            ])
    return out


# ---------------------------------------------------------------------------
# Scenario wrappers
# ---------------------------------------------------------------------------

def run_oscillation_experiment(cfg: ExperimentConfig) -> list[RunRecord]:
    """Train each (policy, seed) cell and score feature-norm oscillation."""
    return run_cells(cfg)


@dataclass
class ConvergenceReport:
    threshold: float
    steps_to_threshold: dict  # policy -> median steps (inf if never crossed)
    per_cell: list[dict]
    ratios_vs_first: dict


def steps_to_threshold(record: RunRecord, threshold: float) -> float:
    for row in record.rows:
        if row["loss_ema"] <= threshold:
            return float(row["step"])
    return math.inf


def convergence_from_records(records: list[RunRecord], threshold: float,
                             policies: tuple) -> ConvergenceReport:
    per_cell = [
        {"policy": r.policy, "seed": r.seed,
         "steps": steps_to_threshold(r, threshold)}
        for r in records
    ]
    medians = {}
    for p in policies:
        vals = [c["steps"] for c in per_cell if c["policy"] == p]
        medians[p] = float(np.median(vals))
    first = policies[0]
    ratios = {
        p: (medians[p] / medians[first] if medians[first] not in (0.0, math.inf) else math.inf)
        for p in policies
    }
    return ConvergenceReport(threshold=threshold, steps_to_threshold=medians,
                             per_cell=per_cell, ratios_vs_first=ratios)


def run_convergence_experiment(cfg: ExperimentConfig) -> ConvergenceReport:
    """Median steps for the smoothed loss to cross cfg.loss_threshold."""
    if cfg.loss_threshold is None:
        raise InvalidArgumentError("convergence experiments must declare loss_threshold")
    records = run_cells(cfg)
    return convergence_from_records(records, cfg.loss_threshold, tuple(cfg.policies))


@dataclass
class DirectionReport:
    forward_policy: str
    reverse_policy: str
    forward_final: list[float]
    reverse_final: list[float]
    forward_median: float
    reverse_median: float
    bound_terms: dict  # policy -> {M0, S}
    records: list[RunRecord]


def run_direction_experiment(cfg: ExperimentConfig) -> DirectionReport:
    """Forward ladder vs the same ladder reversed, plus the analytic
    amplification sums for the measured operator norms."""
    records = run_cells(cfg)
    fwd = next(p for p in cfg.policies if p.startswith("geometric:"))
    rev = next(p for p in cfg.policies if p.startswith("reverse-geometric:"))
    kappa = float(fwd.split(":", 1)[1])
    fwd_final = sorted(r.final_loss_ema for r in records if r.policy == fwd)
    rev_final = sorted(r.final_loss_ema for r in records if r.policy == rev)

    from .scaling import geometric_coefficients, reverse_geometric_coefficients

    bound_terms = {}
    for spec, coeff_fn in ((fwd, geometric_coefficients), (rev, reverse_geometric_coefficients)):
        cell = next((r for r in records if r.policy == spec and not r.diverged), None)
        # without checkpointing (or with every cell diverged) there is no
        # measured operator norm to evaluate the sums at
        m0 = float("nan")
        if cell is not None and cell.m0_trajectory:
            m0 = cell.m0_trajectory[-1][1]
        bound_terms[spec] = {
            "M0": m0,
            "S": stability_sum(coeff_fn(kappa, cfg.N, unsafe=True), m0)
            if np.isfinite(m0) else float("nan"),
        }
    return DirectionReport(
        forward_policy=fwd,
        reverse_policy=rev,
        forward_final=fwd_final,
        reverse_final=rev_final,
        forward_median=float(np.median(fwd_final)),
        reverse_median=float(np.median(rev_final)),
        bound_terms=bound_terms,
        records=records,
    )


@dataclass
class SweepReport:
    per_kappa: dict  # kappa -> {final_losses, median_final, divergence_count}
    records: list[RunRecord]


def run_kappa_sweep(cfg: ExperimentConfig) -> SweepReport:
    """Geometric-ladder sweep over base values; values above 1 are allowed
    only under the unsafe flag and typically degrade or diverge."""
    cfg.validate()
    sweep_cfg = ExperimentConfig(**{**asdict(cfg), "policies": tuple(
        f"geometric:{k}" for k in cfg.kappa_grid
    ), "kind": "oscillation"})
    records = run_cells(sweep_cfg)
    per_kappa = {}
    for k in cfg.kappa_grid:
        spec = f"geometric:{k}"
        cells = [r for r in records if r.policy == spec]
        finals = [r.final_loss_ema for r in cells]
        per_kappa[float(k)] = {
            "final_losses": finals,
            "median_final": float(np.median(finals)),
            "divergence_count": sum(r.diverged for r in cells),
        }
    return SweepReport(per_kappa=per_kappa, records=records)


@dataclass
class M0Report:
    trajectories: dict  # (policy, seed) -> list of (step, M0)
    records: list[RunRecord]


def run_m0_tracking(cfg: ExperimentConfig) -> M0Report:
    """Track the max composite operator norm at every checkpoint."""
    if not cfg.checkpoint_interval:
        raise InvalidArgumentError("m0 tracking needs a checkpoint_interval")
    records = run_cells(cfg)
    return M0Report(
        trajectories={(r.policy, r.seed): list(r.m0_trajectory) for r in records},
        records=records,
    )
