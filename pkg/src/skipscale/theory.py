"""Empirical verifiers for the norm, gradient, and robustness predictions.

Each check builds freshly initialized models over a grid of skip-coefficient
base values (the same child streams are reused across grid points, so a grid
cell differs from its neighbor only through the coefficients: a paired design
that removes most realization noise), measures the quantity the corresponding
bound controls, and reports a fitted scaling law or per-probe comparison.
Thresholds live in the test suite, not here; reports carry the raw rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import InvalidArgumentError, Tape, Tensor, scalar_mul, sub, sum_of_squares
from .diffusion import DiffusionSchedule, diffuse_batch, uniform_source
from .rng import Rng
from .scaling import GeometricScaling, LearnableScaling, geometric_square_sum, stability_sum
from .unet import UNetModel, init_unet, unet_forward


class EstimationError(RuntimeError):
    """Operator-norm estimation hit non-finite activations."""


@dataclass
class BoundCheckConfig:
    m: int = 64
    l: int = 2
    N: int = 12
    seeds: int = 20
    rho: float = 0.5          # confidence slack knob; kept for report metadata
    probes: int = 64
    kappa_grid: tuple = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)


@dataclass
class ScalingLawReport:
    x_values: list[float]
    y_values: list[float]
    fitted_slope: float
    fitted_intercept: float
    r_squared: float
    spearman_rho: Optional[float] = None
    monotone: Optional[bool] = None
    weak_power: bool = False
    rows: list[dict] = field(default_factory=list)  # one per (kappa, seed)
    notes: str = ""

    def write_csv(self, path: str) -> None:
        import csv

        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(self.rows[0].keys()))
            w.writeheader()
            w.writerows(self.rows)

    def summary(self) -> str:
        lines = [
            f"points={len(self.x_values)} slope={self.fitted_slope!r} "
            f"intercept={self.fitted_intercept!r} r2={self.r_squared!r}"
        ]
        if self.spearman_rho is not None:
            lines.append(f"spearman={self.spearman_rho!r} monotone={self.monotone}")
        if self.weak_power:
            lines.append("WARNING: predictor nearly constant (weak power)")
        if self.notes:
            lines.append(self.notes)
        return "\n".join(lines)


def _fit_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    yhat = A @ coef
    ss_res = float(((y - yhat) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return float(coef[0]), float(coef[1]), r2


def spearman_rank_corr(x, y) -> float:
    rx = np.argsort(np.argsort(np.asarray(x, dtype=float)))
    ry = np.argsort(np.argsort(np.asarray(y, dtype=float)))
    c = np.corrcoef(rx, ry)
    return float(c[0, 1])


def _validate_grid(cfg: BoundCheckConfig) -> None:
    if len(cfg.kappa_grid) < 3:
        raise InvalidArgumentError("kappa_grid needs at least 3 values")
    if len(set(cfg.kappa_grid)) == 1:
        raise InvalidArgumentError("kappa_grid is degenerate: all values equal")
    if cfg.probes < 1 or cfg.seeds < 1:
        raise InvalidArgumentError("probes and seeds must be >= 1")


def _probe_inputs(cfg: BoundCheckConfig, sched: DiffusionSchedule, rng: Rng, seed_idx: int):
    """Diffused probe batch for one seed; identical across grid cells."""
    pr = rng.child(100_000 + seed_idx)
    data = uniform_source(cfg.m)
    x0 = data.sample(cfg.probes, pr)
    ts = pr.integers(1, sched.T + 1, cfg.probes)
    return diffuse_batch(x0, ts, sched, pr)


def check_hidden_norm_scaling(
    cfg: BoundCheckConfig, sched: DiffusionSchedule, rng: Rng
) -> ScalingLawReport:
    """Regress the output-feature squared norm on ||x_t||^2 * sum of squared
    skip coefficients across the kappa grid."""
    _validate_grid(cfg)
    rows = []
    x_pts, y_pts = [], []
    for kappa in cfg.kappa_grid:
        h0_all, xt_all = [], []
        for s in range(cfg.seeds):
            model = init_unet(cfg.m, cfg.l, cfg.N, GeometricScaling(kappa), rng.child(s))
            x_t, _ = _probe_inputs(cfg, sched, rng, s)
            trace = unet_forward(model, Tensor(x_t))
            h0_sq = np.einsum("ij,ij->j", trace.output.data, trace.output.data)
            xt_sq = np.einsum("ij,ij->j", x_t, x_t)
            h0_all.append(h0_sq)
            xt_all.append(xt_sq)
            rows.append(
                {
                    "kappa": kappa,
                    "seed": s,
                    "median_h0_sq": float(np.median(h0_sq)),
                    "median_xt_sq": float(np.median(xt_sq)),
                }
            )
        coeff_mass = geometric_square_sum(kappa, cfg.N)
        y_pts.append(float(np.median(np.concatenate(h0_all))))
        x_pts.append(float(np.median(np.concatenate(xt_all))) * coeff_mass)
    weak = cfg.N == 1
    if weak:
        # single connection: the coefficient mass is constant, so fall back to
        # regressing against the per-seed ||x_t||^2 medians alone
        x_pts = [r["median_xt_sq"] for r in rows]
        y_pts = [r["median_h0_sq"] for r in rows]
    slope, intercept, r2 = _fit_line(np.array(x_pts), np.array(y_pts))
    return ScalingLawReport(
        x_values=list(map(float, x_pts)),
        y_values=list(map(float, y_pts)),
        fitted_slope=slope,
        fitted_intercept=intercept,
        r_squared=r2,
        weak_power=weak,
        rows=rows,
    )


def check_gradient_norm_scaling(
    cfg: BoundCheckConfig, sched: DiffusionSchedule, rng: Rng
) -> ScalingLawReport:
    """Measure the max per-matrix gradient norm at initialization across the
    kappa grid; report rank agreement with the coefficient mass and the fit
    against loss * ||x_t||^2 * coefficient mass."""
    _validate_grid(cfg)
    rows = []
    y_med, pred_med, mass = [], [], []
    for kappa in cfg.kappa_grid:
        max_sq, losses, xt_meds = [], [], []
        for s in range(cfg.seeds):
            model = init_unet(cfg.m, cfg.l, cfg.N, GeometricScaling(kappa), rng.child(s))
            x_t, eps = _probe_inputs(cfg, sched, rng, s)
            with Tape() as tape:
                trace = unet_forward(model, Tensor(x_t))
                loss = scalar_mul(
                    sum_of_squares(sub(trace.output, Tensor(eps))), 1.0 / cfg.probes
                )
                tape.backward(loss)
            g2 = max(
                float(np.vdot(p.grad, p.grad))
                for _, p in model.parameters()
                if p.grad is not None
            )
            max_sq.append(g2)
            losses.append(loss.item())
            xt_meds.append(float(np.median(np.einsum("ij,ij->j", x_t, x_t))))
            rows.append({"kappa": kappa, "seed": s, "max_grad_sq": g2, "loss": loss.item()})
        coeff_mass = geometric_square_sum(kappa, cfg.N)
        mass.append(coeff_mass)
        y_med.append(float(np.median(max_sq)))
        pred_med.append(float(np.median(losses)) * float(np.median(xt_meds)) * coeff_mass)
    slope, intercept, r2 = _fit_line(np.array(pred_med), np.array(y_med))
    rho = spearman_rank_corr(mass, y_med)
    order = np.argsort(mass)
    monotone = bool(np.all(np.diff(np.array(y_med)[order]) >= 0))
    return ScalingLawReport(
        x_values=list(map(float, pred_med)),
        y_values=list(map(float, y_med)),
        fitted_slope=slope,
        fitted_intercept=intercept,
        r_squared=r2,
        spearman_rho=rho,
        monotone=monotone,
        rows=rows,
    )


# ---------------------------------------------------------------------------
# Local operator-norm estimation
# ---------------------------------------------------------------------------

def _block_jacobian_factors(weights: list, x: np.ndarray) -> tuple[list, np.ndarray]:
    """Forward through one block caching relu masks; returns (factors, output).

    factors is the list [W_1, D_1, W_2, D_2, ..., W_l] describing the local
    Jacobian product for the linear region containing x.
    """
    factors: list = []
    h = x
    for w in weights[:-1]:
        z = w.data @ h
        mask = z > 0.0
        factors.append(w.data)
        factors.append(mask)
        h = np.where(mask, z, 0.0)
    factors.append(weights[-1].data)
    out = weights[-1].data @ h
    return factors, out


def _apply_chain(factors: list, v: np.ndarray) -> np.ndarray:
    for f in factors:
        v = f @ v if f.ndim == 2 else np.where(f, v, 0.0)
    return v


def _apply_chain_t(factors: list, v: np.ndarray) -> np.ndarray:
    for f in reversed(factors):
        v = f.T @ v if f.ndim == 2 else np.where(f, v, 0.0)
    return v


def _local_operator_norm(factor_lists: list[list], v0: np.ndarray, steps: int) -> float:
    """Largest singular value of the chained local Jacobian by power ascent."""
    v = v0 / np.linalg.norm(v0)
    sigma = 0.0
    for _ in range(steps):
        jv = v
        for factors in factor_lists:
            jv = _apply_chain(factors, jv)
        sigma = float(np.linalg.norm(jv))
        if sigma == 0.0:
            return 0.0
        u = jv
        for factors in reversed(factor_lists):
            u = _apply_chain_t(factors, u)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return sigma
        v = u / nu
    return sigma


@dataclass
class LipschitzEstimate:
    M0: float
    L0: float
    per_block: list[float]
    method: str = "empirical-local"


def estimate_M0_L0(
    model: UNetModel,
    probes: int,
    ascent_steps: int,
    rng: Rng,
    base_points: Optional[np.ndarray] = None,
) -> LipschitzEstimate:
    """Estimate the largest local operator norm of each encoder/decoder
    composite (decoder applied to encoder output) and of the middle block.

    At each random base point the relu activation pattern freezes the network
    into a linear map; power ascent on that map's Jacobian gives its exact
    local operator norm, and the estimate is the max over base points.  These
    are local quantities: a lower bound on the global Lipschitz constant.
    """
    if probes < 8 and base_points is None:
        raise InvalidArgumentError("need at least 8 probes for a usable estimate")
    if base_points is None:
        base_points = rng.standard_normal((model.m, probes))
    if not np.isfinite(base_points).all():
        raise EstimationError("non-finite probe points")
    n_pts = base_points.shape[1]
    per_block = []
    for i in range(model.N):
        best = 0.0
        for p in range(n_pts):
            x = base_points[:, p]
            enc_factors, enc_out = _block_jacobian_factors(model.encoders[i].weights, x)
            if not np.isfinite(enc_out).all():
                raise EstimationError(f"non-finite activations in encoder {i + 1}")
            dec_factors, _ = _block_jacobian_factors(model.decoders[i].weights, enc_out)
            v0 = rng.standard_normal(model.m)
            sig = _local_operator_norm([enc_factors, dec_factors], v0, ascent_steps)
            best = max(best, sig)
        per_block.append(best)
    l0 = 0.0
    for p in range(n_pts):
        x = base_points[:, p]
        factors, out = _block_jacobian_factors(model.middle.weights, x)
        if not np.isfinite(out).all():
            raise EstimationError("non-finite activations in middle block")
        v0 = rng.standard_normal(model.m)
        l0 = max(l0, _local_operator_norm([factors], v0, ascent_steps))
    return LipschitzEstimate(M0=max(per_block), L0=l0, per_block=per_block)


@dataclass
class RobustnessReport:
    per_eps: list[dict]  # eps, max_deviation, bound, satisfied, frac_within
    kappas: list[float]
    M0: float
    L0: float

    def summary(self) -> str:
        lines = [f"M0={self.M0!r} L0={self.L0!r}"]
        for row in self.per_eps:
            lines.append(
                f"eps={row['eps']}: max_dev={row['max_deviation']!r} "
                f"bound={row['bound']!r} within={row['frac_within']:.3f}"
            )
        return "\n".join(lines)


def robustness_bound_value(kappas: list[float], M0: float, L0: float) -> float:
    """Perturbation amplification bound: sum_i kappa_i M0^i + M0^N L0."""
    return stability_sum(kappas, M0) + M0 ** len(kappas) * L0


def check_robustness_bound(
    model: UNetModel,
    est: LipschitzEstimate,
    eps_grid: list[float],
    probes: int,
    rng: Rng,
    base_points: Optional[np.ndarray] = None,
) -> RobustnessReport:
    """Compare measured output deviations under unit-direction perturbations
    against the coefficient-weighted amplification bound."""
    if any(e < 0 for e in eps_grid):
        raise InvalidArgumentError("eps grid must be nonnegative")
    if base_points is None:
        base_points = rng.standard_normal((model.m, probes))
    n_pts = base_points.shape[1]
    if isinstance(model.policy, LearnableScaling):
        # sigmoid outputs are < 1, so ones give a valid upper bound
        kappas = [1.0] * model.N
    else:
        kappas = model.policy.coefficients(model.N)
    bound_rate = robustness_bound_value(kappas, est.M0, est.L0)
    dirs = rng.standard_normal((model.m, n_pts))
    dirs /= np.linalg.norm(dirs, axis=0)
    base_out = unet_forward(model, Tensor(base_points)).output.data
    per_eps = []
    for eps in eps_grid:
        if eps == 0.0:
            devs = np.zeros(n_pts)
        else:
            pert_out = unet_forward(model, Tensor(base_points + eps * dirs)).output.data
            devs = np.linalg.norm(pert_out - base_out, axis=0)
        bound = eps * bound_rate
        within = float(np.mean(devs <= bound + 1e-12))
        per_eps.append(
            {
                "eps": float(eps),
                "max_deviation": float(devs.max()),
                "bound": float(bound),
                "satisfied": bool(devs.max() <= bound + 1e-12),
                "frac_within": within,
            }
        )
    return RobustnessReport(per_eps=per_eps, kappas=kappas, M0=est.M0, L0=est.L0)


@dataclass
class NoiseReport:
    per_sigma: list[dict]  # sigma, mean_loss, inflation


def noise_injection_probe(
    model: UNetModel,
    sched: DiffusionSchedule,
    sigma_grid: list[float],
    probes: int,
    rng: Rng,
) -> NoiseReport:
    """Mean prediction loss when extra Gaussian noise of scale sigma rides on
    the diffused input; inflation is relative to the sigma=0 loss on the same
    draws."""
    if any(s < 0 for s in sigma_grid):
        raise InvalidArgumentError("sigma grid must be nonnegative")
    data = uniform_source(model.m)
    x0 = data.sample(probes, rng)
    ts = rng.integers(1, sched.T + 1, probes)
    x_t, eps = diffuse_batch(x0, ts, sched, rng)
    extra = rng.standard_normal(x_t.shape)
    base_loss = None
    per_sigma = []
    for sigma in sigma_grid:
        out = unet_forward(model, Tensor(x_t + sigma * extra)).output.data
        losses = ((out - eps) ** 2).sum(axis=0)
        mean_loss = float(losses.mean())
        if base_loss is None and sigma == 0.0:
            base_loss = mean_loss
        per_sigma.append({"sigma": float(sigma), "mean_loss": mean_loss})
    if base_loss is None:
        out = unet_forward(model, Tensor(x_t)).output.data
        base_loss = float(((out - eps) ** 2).sum(axis=0).mean())
    for row in per_sigma:
        row["inflation"] = row["mean_loss"] - base_loss
    return NoiseReport(per_sigma=per_sigma)
