"""Skip-coefficient policies: fixed ladders and the learnable calibrator.

Fixed policies produce a list of per-connection coefficients from a single
base value: all ones, a universal constant, a geometric decay kappa^(i-1), or
the same ladder applied in reverse order.  The learnable policy predicts the
coefficients from the skip feature itself through a tiny squeeze-style
network: grouped average pool -> compress -> relu -> expand -> sigmoid.

Base values are restricted to (0, 1] unless a policy is built with
``unsafe=True``, which lifts the upper bound for deliberately destabilizing
sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    InvalidArgumentError,
    ShapeError,
    Tensor,
    kaiming_init,
    matmul,
    relu,
    sigmoid,
)
from .diffusion import DataSource, DiffusionSchedule, noise_ratio_stats
from .rng import Rng


def _check_kappa(kappa: float, unsafe: bool) -> float:
    kappa = float(kappa)
    if kappa <= 0.0:
        raise InvalidArgumentError(f"kappa must be positive, got {kappa}")
    if kappa > 1.0 and not unsafe:
        raise InvalidArgumentError(
            f"kappa={kappa} > 1 requires the unsafe flag (destabilizes training)"
        )
    return kappa


def geometric_coefficients(kappa: float, N: int, unsafe: bool = False) -> list[float]:
    """[kappa^0, kappa^1, ..., kappa^(N-1)]; first entry is always 1."""
    kappa = _check_kappa(kappa, unsafe)
    if N < 1:
        raise InvalidArgumentError("N must be >= 1")
    return [kappa**i for i in range(N)]


def reverse_geometric_coefficients(kappa: float, N: int, unsafe: bool = False) -> list[float]:
    """[kappa^N, kappa^(N-1), ..., kappa^1]: the same ladder, deepest-first."""
    kappa = _check_kappa(kappa, unsafe)
    if N < 1:
        raise InvalidArgumentError("N must be >= 1")
    return [kappa ** (N - i) for i in range(N)]


def stability_sum(kappas: list[float], M0: float) -> float:
    """Leading robustness-bound term: sum_i kappa_i * M0^i."""
    return float(sum(k * M0 ** (i + 1) for i, k in enumerate(kappas)))


class ScalingPolicy:
    """Base policy interface; concrete policies define coefficients(N)."""

    name = "base"
    learnable = False

    def coefficients(self, N: int) -> list[float]:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    def parameters(self) -> list[tuple[str, Tensor]]:
        return []


class UnitScaling(ScalingPolicy):
    """Every skip coefficient is 1 (the unscaled baseline)."""

    name = "unit"

    def coefficients(self, N: int) -> list[float]:
        return [1.0] * N

    def describe(self) -> dict:
        return {"variant": "unit"}


class UniversalScaling(ScalingPolicy):
    """One constant for every connection, e.g. 1/sqrt(2)."""

    name = "universal"

    def __init__(self, kappa: float, unsafe: bool = False):
        self.kappa = _check_kappa(kappa, unsafe)
        self.unsafe = unsafe

    def coefficients(self, N: int) -> list[float]:
        return [self.kappa] * N

    def describe(self) -> dict:
        return {"variant": "universal", "kappa": self.kappa, "unsafe": self.unsafe}


class GeometricScaling(ScalingPolicy):
    """kappa^(i-1) ladder: shallow connections keep weight, deep ones shrink."""

    name = "geometric"

    def __init__(self, kappa: float, unsafe: bool = False):
        self.kappa = _check_kappa(kappa, unsafe)
        self.unsafe = unsafe

    def coefficients(self, N: int) -> list[float]:
        return geometric_coefficients(self.kappa, N, unsafe=True)

    def describe(self) -> dict:
        return {"variant": "geometric", "kappa": self.kappa, "unsafe": self.unsafe}


class ReverseGeometricScaling(ScalingPolicy):
    """The geometric ladder applied in the opposite order (kappa^(N-i+1))."""

    name = "reverse-geometric"

    def __init__(self, kappa: float, unsafe: bool = False):
        self.kappa = _check_kappa(kappa, unsafe)
        self.unsafe = unsafe

    def coefficients(self, N: int) -> list[float]:
        return reverse_geometric_coefficients(self.kappa, N, unsafe=True)

    def describe(self) -> dict:
        return {"variant": "reverse-geometric", "kappa": self.kappa, "unsafe": self.unsafe}


class CalibNet:
    """Shared squeeze-style calibrator mapping pooled channels to coefficients.

    Core path: w2 compresses `channels` down by ratio r (hidden width is
    clamped to at least 1), relu, w1 expands back.  Optional per-dimension
    adapter pairs re-route inputs whose channel count differs from the core's.
    """

    def __init__(self, channels: int, r: int, rng: Rng):
        if channels < 1 or r < 1:
            raise InvalidArgumentError("channels and r must be >= 1")
        hidden = max(1, channels // r)
        self.channels = channels
        self.r = r
        self.hidden = hidden
        self.w1 = kaiming_init(channels, hidden, rng, requires_grad=True)
        self.w2 = kaiming_init(hidden, channels, rng, requires_grad=True)
        # dim -> (enc_in, enc_out, dec_in, dec_out)
        self.adapters: dict[int, tuple[Tensor, Tensor, Tensor, Tensor]] = {}
        self._rng = rng

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("calib.w1", self.w1), ("calib.w2", self.w2)]
        for dim in sorted(self.adapters):
            enc_in, enc_out, dec_in, dec_out = self.adapters[dim]
            out += [
                (f"calib.enc{dim}.in", enc_in),
                (f"calib.enc{dim}.out", enc_out),
                (f"calib.dec{dim}.in", dec_in),
                (f"calib.dec{dim}.out", dec_out),
            ]
        return out

    def core(self, pooled: Tensor) -> Tensor:
        return matmul(self.w1, relu(matmul(self.w2, pooled)))


def attach_adapters(calib: CalibNet, dims: list[int]) -> CalibNet:
    """Create shared encoder/decoder pairs for each distinct channel count.

    A single dimension equal to the core width needs no adapters (identity
    path).  Otherwise every distinct dimension gets one pair; dims below 4
    clamp the adapter compression ratio to 1 rather than erroring.
    """
    if not dims:
        raise InvalidArgumentError("dims must be nonempty")
    distinct = sorted(set(int(d) for d in dims))
    if distinct == [calib.channels]:
        return calib
    for d in distinct:
        if d in calib.adapters:
            continue
        r_i = max(1, d // 4)
        h = max(1, d // r_i)
        enc_in = kaiming_init(h, d, calib._rng, requires_grad=True)
        enc_out = kaiming_init(calib.channels, h, calib._rng, requires_grad=True)
        dec_in = kaiming_init(h, calib.channels, calib._rng, requires_grad=True)
        dec_out = kaiming_init(d, h, calib._rng, requires_grad=True)
        calib.adapters[d] = (enc_in, enc_out, dec_in, dec_out)
    return calib


# Cache of constant pool/expand matrices keyed by (m, channels).
_POOL_CACHE: dict[tuple[int, int], tuple[Tensor, Tensor]] = {}


def _pool_expand(m: int, channels: int) -> tuple[Tensor, Tensor]:
    key = (m, channels)
    cached = _POOL_CACHE.get(key)
    if cached is not None:
        return cached
    if m % channels != 0:
        raise ShapeError(f"feature width {m} not divisible into {channels} channels")
    width = m // channels
    pool = np.zeros((channels, m))
    expand = np.zeros((m, channels))
    for c in range(channels):
        pool[c, c * width : (c + 1) * width] = 1.0 / width
        expand[c * width : (c + 1) * width, c] = 1.0
    pair = (Tensor(pool), Tensor(expand))
    _POOL_CACHE[key] = pair
    return pair


def ls_coefficients(calib: CalibNet, skip_input: Tensor, channels: Optional[int] = None) -> Tensor:
    """Per-channel coefficients in (0, 1) predicted from the skip feature.

    ``skip_input`` is a flat feature of width m (optionally batched as
    columns) viewed as `channels` contiguous groups; grouped average pooling
    reduces each group to one value, the calibrator maps the pooled vector
    through compress/relu/expand (via adapters when the channel count differs
    from the core width), and a sigmoid squashes to (0, 1).  Differentiable in
    both the calibrator parameters and the skip input.
    """
    channels = calib.channels if channels is None else int(channels)
    m = skip_input.data.shape[0]
    pool, _ = _pool_expand(m, channels)
    pooled = matmul(pool, skip_input)
    if channels == calib.channels:
        z = calib.core(pooled)
    else:
        adapter = calib.adapters.get(channels)
        if adapter is None:
            raise ShapeError(
                f"no adapter for channel count {channels} (core width {calib.channels})"
            )
        enc_in, enc_out, dec_in, dec_out = adapter
        encoded = matmul(enc_out, relu(matmul(enc_in, pooled)))
        core = calib.core(encoded)
        z = matmul(dec_out, relu(matmul(dec_in, core)))
    return sigmoid(z)


class LearnableScaling(ScalingPolicy):
    """Coefficients predicted from the skip feature by a calibration net.

    One net is shared by every connection by default; per-connection mode
    gives each of the N connections its own net.
    """

    name = "learnable"
    learnable = True

    def __init__(self, calib: CalibNet | list[CalibNet], channels: Optional[int] = None):
        if isinstance(calib, CalibNet):
            self.calibs = [calib]
            self.per_connection = False
        else:
            if not calib:
                raise InvalidArgumentError("per-connection mode needs at least one net")
            self.calibs = list(calib)
            self.per_connection = True
        self.channels = self.calibs[0].channels if channels is None else int(channels)

    @property
    def calib(self) -> CalibNet:
        return self.calibs[0]

    @classmethod
    def build(cls, channels: int, rng: Rng, r: int = 16,
              connections: Optional[int] = None) -> "LearnableScaling":
        if connections is None:
            return cls(CalibNet(channels=channels, r=r, rng=rng))
        if connections < 1:
            raise InvalidArgumentError("connections must be >= 1")
        return cls([CalibNet(channels=channels, r=r, rng=rng)
                    for _ in range(connections)])

    def coefficients(self, N: int) -> list[float]:
        raise InvalidArgumentError(
            "learnable scaling has no fixed coefficients; they depend on the input"
        )

    def coefficient_tensor(self, skip_input: Tensor, connection: int = 0) -> Tensor:
        calib = self.calibs[connection % len(self.calibs)] if self.per_connection \
            else self.calibs[0]
        return ls_coefficients(calib, skip_input, self.channels)

    def parameters(self) -> list[tuple[str, Tensor]]:
        if not self.per_connection:
            return self.calibs[0].parameters()
        out = []
        for i, calib in enumerate(self.calibs, start=1):
            out.extend((f"c{i}.{name}", t) for name, t in calib.parameters())
        return out

    def describe(self) -> dict:
        return {
            "variant": "learnable",
            "channels": self.channels,
            "r": self.calibs[0].r,
            "adapter_dims": sorted(self.calibs[0].adapters),
            "per_connection": self.per_connection,
            "connections": len(self.calibs) if self.per_connection else 1,
        }


# ---------------------------------------------------------------------------
# Base-value range estimation
# ---------------------------------------------------------------------------

@dataclass
class KappaRange:
    lo: float
    hi: float
    target_interval: tuple[float, float]
    degenerate: bool


def geometric_square_sum(kappa: float, N: int) -> float:
    """sum_{j=1..N} kappa^(2(j-1)), the squared-coefficient mass of the ladder."""
    return float(sum(kappa ** (2 * j) for j in range(N)))


def solve_geometric_square_sum(target: float, N: int, tol: float = 1e-10) -> tuple[float, bool]:
    """Invert geometric_square_sum on kappa in (0, 1] by bisection.

    The sum rises monotonically from 1 (kappa -> 0) to N (kappa = 1); targets
    at or below 1 are unreachable and flagged degenerate, targets >= N clip to
    kappa = 1.
    """
    if target <= 1.0:
        return 0.0, True
    if target >= N:
        return 1.0, target > N
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if geometric_square_sum(mid, N) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), False


def estimate_kappa_range(
    data: DataSource,
    sched: DiffusionSchedule,
    N: int,
    samples: int,
    rng: Rng,
    tail_cap: float = 5.0,
) -> KappaRange:
    """Bracket the geometric base value so the ladder's squared mass matches
    the measured noise-to-signal ratio at the low end and a long-tail cap at
    the high end."""
    if N < 2:
        raise InvalidArgumentError("N must be >= 2 for a nondegenerate ladder")
    if samples < 1000:
        raise InvalidArgumentError("need at least 1000 samples for a stable ratio mean")
    stats = noise_ratio_stats(data, sched, samples, rng)
    t_lo, t_hi = stats.mean, tail_cap
    lo, deg_lo = solve_geometric_square_sum(t_lo, N)
    hi, deg_hi = solve_geometric_square_sum(t_hi, N)
    lo = min(max(lo, 0.0), 1.0)
    hi = min(max(hi, lo), 1.0)
    return KappaRange(
        lo=lo, hi=hi, target_interval=(t_lo, t_hi), degenerate=deg_lo or deg_hi
    )


# ---------------------------------------------------------------------------
# Policy descriptors (used by checkpoints, configs, and the CLI)
# ---------------------------------------------------------------------------

def policy_from_spec(spec: str, rng: Optional[Rng] = None, unsafe: bool = False,
                     channels: int = 16, r: int = 16,
                     connections: Optional[int] = None) -> ScalingPolicy:
    """Parse a policy descriptor string like 'unit', 'geometric:0.7',
    'universal:0.707', 'reverse-geometric:0.5', 'learnable', or
    'learnable-per' (one calibrator per connection; needs ``connections``)."""
    spec = spec.strip()
    if spec == "unit":
        return UnitScaling()
    if spec in ("learnable", "learnable-per"):
        if rng is None:
            raise InvalidArgumentError("learnable policy needs an rng to initialize")
        if spec == "learnable-per":
            if connections is None:
                raise InvalidArgumentError(
                    "learnable-per needs the connection count to build its nets"
                )
            return LearnableScaling.build(channels=channels, rng=rng, r=r,
                                          connections=connections)
        return LearnableScaling.build(channels=channels, rng=rng, r=r)
    if ":" in spec:
        kind, _, value = spec.partition(":")
        kappa = float(value)
        if kind == "universal":
            return UniversalScaling(kappa, unsafe=unsafe)
        if kind == "geometric":
            return GeometricScaling(kappa, unsafe=unsafe)
        if kind == "reverse-geometric":
            return ReverseGeometricScaling(kappa, unsafe=unsafe)
    raise InvalidArgumentError(f"unrecognized policy spec {spec!r}")
