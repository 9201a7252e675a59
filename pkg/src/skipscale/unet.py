"""The analytical skip-connected network and its training step.

The model is a symmetric stack: N encoder blocks, one middle block, N decoder
blocks, every block a depth-l chain of m-by-m matrices with relu between
layers (none after the last).  Skip connection i carries the encoder state
after i blocks to the matching decoder input, scaled by the policy's i-th
coefficient:

    s_0 = x,  s_i = enc_i(s_{i-1})
    d_N = middle(s_N)
    d_{i-1} = dec_i(kappa_i * s_i + d_i)      for i = N .. 1
    output  = d_0

The trace keeps every decoder-side feature: hidden[k] is d_{N-1-k}, so
hidden[-1] is the output-level feature.  The whole forward is differentiable,
including learnable coefficients.

There is no time conditioning: the network sees only the corrupted vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    InvalidArgumentError,
    ShapeError,
    Tape,
    Tensor,
    add,
    kaiming_init,
    matmul,
    mul,
    relu,
    scalar_mul,
    sub,
    sum_of_squares,
)
from .diffusion import DiffusionSchedule, diffuse_batch
from .rng import Rng
from .scaling import LearnableScaling, ScalingPolicy, _pool_expand


class TrainingDivergence(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the report."""

    def __init__(self, message: str, report: "StepReport"):
        super().__init__(message)
        self.report = report


@dataclass
class BlockParams:
    """One block: l stacked m-by-m matrices, relu between layers."""

    weights: list[Tensor]

    def apply(self, x: Tensor) -> Tensor:
        h = x
        for w in self.weights[:-1]:
            h = relu(matmul(w, h))
        return matmul(self.weights[-1], h)


@dataclass
class UNetModel:
    m: int
    l: int
    N: int
    encoders: list[BlockParams]
    decoders: list[BlockParams]
    middle: BlockParams
    policy: ScalingPolicy

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Stable name -> tensor listing: encoders, middle, decoders, policy."""
        out: list[tuple[str, Tensor]] = []
        for i, block in enumerate(self.encoders, start=1):
            for j, w in enumerate(block.weights, start=1):
                out.append((f"enc{i}.w{j}", w))
        for j, w in enumerate(self.middle.weights, start=1):
            out.append((f"mid.w{j}", w))
        for i, block in enumerate(self.decoders, start=1):
            for j, w in enumerate(block.weights, start=1):
                out.append((f"dec{i}.w{j}", w))
        out.extend(self.policy.parameters())
        return out


@dataclass
class ForwardTrace:
    output: Tensor
    hidden: list[Tensor]        # hidden[k] = d_{N-1-k}; hidden[-1] == output
    skip_inputs: list[Tensor]   # s_1 .. s_N
    coefficients_used: list[float]  # representative kappa_1 .. kappa_N, each > 0


def init_unet(m: int, l: int, N: int, policy: ScalingPolicy, rng: Rng) -> UNetModel:
    """Fresh model, every matrix drawn with entry variance 2/m."""
    if m < 2 or l < 2 or N < 1:
        raise InvalidArgumentError(f"need m >= 2, l >= 2, N >= 1; got m={m}, l={l}, N={N}")
    if isinstance(policy, LearnableScaling) and m % policy.channels != 0:
        raise InvalidArgumentError(
            f"feature width {m} is not divisible by the policy's {policy.channels} channels"
        )

    def block() -> BlockParams:
        return BlockParams([kaiming_init(m, m, rng, requires_grad=True) for _ in range(l)])

    encoders = [block() for _ in range(N)]
    middle = block()
    decoders = [block() for _ in range(N)]
    return UNetModel(m=m, l=l, N=N, encoders=encoders, decoders=decoders,
                     middle=middle, policy=policy)


def unet_forward(model: UNetModel, x: Tensor) -> ForwardTrace:
    """Run the skip recursion; works on a single vector or batch columns."""
    if x.data.shape[0] != model.m:
        raise ShapeError(f"input width {x.data.shape[0]} != model width {model.m}")
    N = model.N
    learnable = isinstance(model.policy, LearnableScaling)
    fixed = None if learnable else model.policy.coefficients(N)

    skip_inputs: list[Tensor] = []
    s = x
    for i in range(N):
        s = model.encoders[i].apply(s)
        skip_inputs.append(s)

    d = model.middle.apply(skip_inputs[-1])
    hidden: list[Tensor] = []
    coeffs: list[float] = [0.0] * N
    for i in range(N, 0, -1):
        skip = skip_inputs[i - 1]
        if learnable:
            kap = model.policy.coefficient_tensor(skip, connection=i - 1)
            _, expand = _pool_expand(model.m, model.policy.channels)
            scaled = mul(skip, matmul(expand, kap))
            coeffs[i - 1] = float(kap.data.mean())
        else:
            k = fixed[i - 1]
            scaled = scalar_mul(skip, k)
            coeffs[i - 1] = k
        d = model.decoders[i - 1].apply(add(scaled, d))
        hidden.append(d)

    return ForwardTrace(output=d, hidden=hidden, skip_inputs=skip_inputs,
                        coefficients_used=coeffs)


@dataclass
class StepReport:
    loss: float
    grad_norms: dict[str, float]
    feature_norms: list[float]  # indexed by theorem level i: 0 = output feature


def _feature_norms(trace: ForwardTrace, N: int) -> list[float]:
    norms = []
    for i in range(N):
        h = trace.hidden[N - 1 - i].data
        if h.ndim == 1:
            norms.append(float(np.linalg.norm(h)))
        else:
            norms.append(float(np.linalg.norm(h, axis=0).mean()))
    return norms


def train_step(
    model: UNetModel,
    batch: Sequence[np.ndarray] | np.ndarray,
    sched: DiffusionSchedule,
    optimizer,
    rng: Rng,
) -> StepReport:
    """One noise-prediction step: corrupt, predict, backprop, update.

    Draws a uniform step and a fresh noise vector per batch item, minimizes
    the batch-mean squared noise error, and reports the loss, per-matrix
    gradient norms, and per-level feature norms.  A non-finite loss raises
    TrainingDivergence carrying the partial report; parameters are untouched
    in that case.
    """
    x0 = np.stack([np.asarray(b, dtype=np.float64) for b in batch], axis=1) \
        if not isinstance(batch, np.ndarray) else np.asarray(batch, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] != model.m:
        raise ShapeError(f"batch must stack to ({model.m}, B), got {x0.shape}")
    B = x0.shape[1]
    if B < 1:
        raise InvalidArgumentError("batch must be nonempty")

    ts = rng.integers(1, sched.T + 1, B)
    x_t, eps = diffuse_batch(x0, ts, sched, rng)

    with Tape() as tape:
        trace = unet_forward(model, Tensor(x_t))
        loss = scalar_mul(sum_of_squares(sub(trace.output, Tensor(eps))), 1.0 / B)
        loss_val = loss.item()
        feature_norms = _feature_norms(trace, model.N)
        if not np.isfinite(loss_val):
            report = StepReport(loss=loss_val, grad_norms={}, feature_norms=feature_norms)
            raise TrainingDivergence(f"non-finite loss {loss_val}", report)
        tape.backward(loss)

    params = model.parameters()
    grad_norms = {
        name: float(np.linalg.norm(p.grad))
        for name, p in params
        if p.requires_grad and p.grad is not None
    }
    optimizer.step(params)
    for _, p in params:
        p.zero_grad()
    return StepReport(loss=loss_val, grad_norms=grad_norms, feature_norms=feature_norms)
