"""Noise schedule, forward corruption, and the noise-prediction objective.

A ``DiffusionSchedule`` holds the per-step corruption coefficients; the
forward process mixes a clean vector with unit Gaussian noise, and training
minimizes the squared error between injected and predicted noise.  The default
data source is the uniform hypercube, for which the expected squared norm of a
corrupted sample has the closed form (1 - 2/3 * mean cumulative signal) * dim.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import InvalidArgumentError, ShapeError, Tensor, scalar_mul, sub, sum_of_squares
from .rng import Rng


@dataclass
class DiffusionSchedule:
    """Per-step noise rates; alpha_bar is the running product of alpha."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    mean_alpha_bar: float = field(init=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.shape != (self.T,):
            raise InvalidArgumentError(f"beta must have length T={self.T}")
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        self.mean_alpha_bar = float(self.alpha_bar.mean())


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linearly interpolated beta, endpoints inclusive."""
    if T < 1:
        raise InvalidArgumentError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidArgumentError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = np.linspace(beta_start, beta_end, T)
    return DiffusionSchedule(T=T, beta=beta)


def schedule_to_text(sched: DiffusionSchedule) -> str:
    """Plain-text table (t, beta, alpha, alpha_bar), one row per step."""
    lines = ["t\tbeta\talpha\talpha_bar"]
    for t in range(sched.T):
        lines.append(
            f"{t + 1}\t{float(sched.beta[t])!r}\t{float(sched.alpha[t])!r}"
            f"\t{float(sched.alpha_bar[t])!r}"
        )
    return "\n".join(lines) + "\n"


def schedule_from_text(text: str) -> DiffusionSchedule:
    rows = [line.split("\t") for line in text.strip().splitlines()[1:]]
    beta = np.array([float(r[1]) for r in rows])
    return DiffusionSchedule(T=len(rows), beta=beta)


@dataclass
class DataSource:
    """Clean-sample source: uniform hypercube draws or a fixed corpus."""

    kind: str  # "uniform-hypercube" | "fixed-corpus"
    dim: int
    corpus: Optional[np.ndarray] = None  # (dim, n) columns when kind == fixed-corpus

    def __post_init__(self):
        if self.kind not in ("uniform-hypercube", "fixed-corpus"):
            raise InvalidArgumentError(f"unknown data source kind {self.kind!r}")
        if self.kind == "fixed-corpus":
            if self.corpus is None:
                raise InvalidArgumentError("fixed-corpus source needs a corpus")
            self.corpus = np.asarray(self.corpus, dtype=np.float64)
            if self.corpus.ndim != 2 or self.corpus.shape[0] != self.dim:
                raise ShapeError(f"corpus must be (dim, n), got {self.corpus.shape}")

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        """Draw n clean vectors as columns of a (dim, n) array."""
        if self.kind == "uniform-hypercube":
            return rng.uniform(-1.0, 1.0, (self.dim, n))
        idx = rng.integers(0, self.corpus.shape[1], n)
        return self.corpus[:, idx]


def uniform_source(dim: int) -> DataSource:
    return DataSource(kind="uniform-hypercube", dim=dim)


def diffuse_batch(
    x0: np.ndarray, ts: np.ndarray, sched: DiffusionSchedule, rng: Rng
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt columns of x0 at per-column steps ts; returns (x_t, eps) arrays."""
    ts = np.asarray(ts)
    if ts.min() < 1 or ts.max() > sched.T:
        raise InvalidArgumentError(f"steps must lie in [1, {sched.T}]")
    ab = sched.alpha_bar[ts - 1]
    eps = rng.standard_normal(x0.shape)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return x_t, eps


def forward_diffuse(
    x0: Tensor, t: int, sched: DiffusionSchedule, rng: Rng
) -> tuple[Tensor, Tensor]:
    """Single-vector forward corruption at step t."""
    if not (1 <= t <= sched.T):
        raise InvalidArgumentError(f"t={t} outside schedule range [1, {sched.T}]")
    ab = sched.alpha_bar[t - 1]
    eps = rng.standard_normal(x0.data.shape)
    x_t = np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * eps
    return Tensor(x_t), Tensor(eps)


def loss_simple(eps: Tensor, eps_hat: Tensor) -> Tensor:
    """Squared L2 error between injected and predicted noise."""
    if eps.data.shape != eps_hat.data.shape:
        raise ShapeError(f"loss shapes disagree: {eps.shape} vs {eps_hat.shape}")
    return sum_of_squares(sub(eps, eps_hat))


def batch_loss(eps: Tensor, eps_hat: Tensor) -> Tensor:
    """Mean per-item squared error over batch columns."""
    n_items = 1 if eps.data.ndim == 1 else eps.data.shape[1]
    return scalar_mul(loss_simple(eps, eps_hat), 1.0 / n_items)


@dataclass
class RatioStats:
    """Monte-Carlo summary of ||eps||^2 / ||x_t||^2 over (x0, t, eps) draws."""

    mean: float
    median: float
    q97: float
    samples: int


def noise_ratio_stats(
    data: DataSource, sched: DiffusionSchedule, samples: int, rng: Rng
) -> RatioStats:
    if samples < 1:
        raise InvalidArgumentError("samples must be >= 1")
    x0 = data.sample(samples, rng)
    ts = rng.integers(1, sched.T + 1, samples)
    x_t, eps = diffuse_batch(x0, ts, sched, rng)
    num = np.einsum("ij,ij->j", eps, eps)
    den = np.einsum("ij,ij->j", x_t, x_t)
    ratio = num / den
    return RatioStats(
        mean=float(ratio.mean()),
        median=float(np.quantile(ratio, 0.5)),
        q97=float(np.quantile(ratio, 0.97)),
        samples=samples,
    )
