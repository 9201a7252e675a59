"""Dense float64 tensors with define-by-run reverse-mode differentiation.

The engine is deliberately small: the only primitives are the ones the
networks in this package need (matmul, add, scalar multiply, elementwise
multiply, relu, sigmoid, mean reduce, sum of squares).  A ``Tape`` records
primitive applications in execution order while it is active; ``Tape.backward``
replays the record in reverse and fills ``grad`` on every tensor that asked
for it.  Tapes are rebuilt per forward pass and consumed by backward.

All math is float64.  There is no broadcasting beyond what 2-D matmul gives;
operand shapes must match exactly elsewhere.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .rng import Rng


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class InvalidArgumentError(ValueError):
    """A scalar argument is outside its documented domain."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, consumed tape, ...)."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; all arithmetic goes through the module-level primitives
    # so everything lands on the active tape.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return scalar_mul(self, float(other))


class _Node:
    """One recorded primitive: output, parents, and a cotangent pull-back."""

    __slots__ = ("out", "parents", "pull")

    def __init__(self, out: Tensor, parents: tuple, pull: Callable):
        self.out = out
        self.parents = parents
        self.pull = pull


_TAPE_STACK: list["Tape"] = []


def _active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Execution-ordered record of primitives; parents always precede children."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, parents: tuple, pull: Callable) -> None:
        self.nodes.append(_Node(out, parents, pull))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` with d(loss)/d(tensor) for every tracked tensor.

        ``loss`` must be a scalar produced while this tape was active.  The
        tape is consumed: a second backward on the same tape raises.
        """
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tracked: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            out_grad = grads.get(id(node.out))
            for p in node.parents:
                if p.requires_grad:
                    tracked[id(p)] = p
            if node.out.requires_grad:
                tracked[id(node.out)] = node.out
            if out_grad is None:
                continue
            for parent, contrib in zip(node.parents, node.pull(out_grad)):
                if contrib is None:
                    continue
                existing = grads.get(id(parent))
                if existing is None:
                    grads[id(parent)] = contrib
                else:
                    # out-of-place: pull-backs may alias buffers across parents
                    grads[id(parent)] = existing + contrib
        for tid, tensor in tracked.items():
            g = grads.get(tid)
            tensor.grad = g if g is not None else np.zeros_like(tensor.data)
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        self.nodes.clear()
        self._consumed = True


def backward(loss: Tensor, tape: Tape) -> None:
    """Functional spelling of ``tape.backward(loss)``."""
    tape.backward(loss)


def _result(data: np.ndarray, parents: tuple, pull: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, parents, pull)
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports (m,k)@(k,n) and (m,k)@(k,)."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 2-D lhs and 1/2-D rhs, got {ad.shape} @ {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")

    def pull(g: np.ndarray):
        if bd.ndim == 1:
            ga = np.outer(g, bd) if a.requires_grad else None
            gb = ad.T @ g if b.requires_grad else None
        else:
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), pull)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def pull(g: np.ndarray):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), pull)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def pull(g: np.ndarray):
        return (g * c if a.requires_grad else None,)

    return _result(a.data * c, (a,), pull)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """a - b, composed from the add and scalar-multiply primitives."""
    return add(a, scalar_mul(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def pull(g: np.ndarray):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), pull)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def pull(g: np.ndarray):
        return (g * mask if x.requires_grad else None,)

    return _result(out, (x,), pull)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function; output strictly inside (0, 1)."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def pull(g: np.ndarray):
        return (g * out * (1.0 - out) if x.requires_grad else None,)

    return _result(out, (x,), pull)


def mean_reduce(x: Tensor) -> Tensor:
    """Mean over all entries; returns a scalar tensor."""
    n = x.data.size

    def pull(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        return (np.full_like(x.data, float(g) / n),)

    return _result(np.asarray(x.data.mean()), (x,), pull)


def sum_of_squares(x: Tensor) -> Tensor:
    """Scalar sum of squared entries."""

    def pull(g: np.ndarray):
        return (2.0 * float(g) * x.data if x.requires_grad else None,)

    return _result(np.asarray(np.vdot(x.data, x.data)), (x,), pull)


# ---------------------------------------------------------------------------
# Initialization and spectral estimation
# ---------------------------------------------------------------------------

def kaiming_init(rows: int, cols: int, rng: Rng, requires_grad: bool = False) -> Tensor:
    """Gaussian matrix with entry variance 2/cols (fan-in = cols)."""
    if rows < 1 or cols < 1:
        raise InvalidArgumentError(f"kaiming_init needs positive dims, got {rows}x{cols}")
    data = rng.standard_normal((rows, cols)) * np.sqrt(2.0 / cols)
    return Tensor(data, requires_grad=requires_grad)


def spectral_norm(w: Tensor, iters: int = 30, rng: Optional[Rng] = None, tol: float = 1e-9) -> float:
    """Largest singular value of ``w`` by power iteration on w^T w.

    The Rayleigh estimate is monotone nondecreasing across iterations, so more
    iterations never hurt; iteration stops early once successive estimates
    agree to ``tol``.
    """
    if iters < 1:
        raise InvalidArgumentError("spectral_norm requires iters >= 1")
    mat = w.data
    if mat.ndim != 2:
        raise ShapeError(f"spectral_norm expects a matrix, got shape {w.shape}")
    if rng is None:
        rng = Rng(0, 0)
    u = rng.standard_normal(mat.shape[1])
    nu = np.linalg.norm(u)
    if nu == 0.0:
        u = np.ones(mat.shape[1])
        nu = np.linalg.norm(u)
    u /= nu
    sigma = 0.0
    for _ in range(iters):
        wu = mat @ u
        new_sigma = float(np.linalg.norm(wu))
        if new_sigma == 0.0:
            return 0.0
        u = mat.T @ wu
        u /= np.linalg.norm(u)
        if abs(new_sigma - sigma) <= tol * max(1.0, new_sigma):
            return new_sigma
        sigma = new_sigma
    return sigma


def as_tensor(value, requires_grad: bool = False) -> Tensor:
    """Wrap arrays/lists as a Tensor; pass Tensors through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)


def finite(x: Tensor) -> bool:
    return bool(np.isfinite(x.data).all())
