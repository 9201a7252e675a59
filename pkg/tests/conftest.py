"""Shared helpers: finite-difference oracles and a literal recursion oracle."""

from __future__ import annotations

import numpy as np
import pytest

from skipscale.rng import Rng

# acceptance tests append their criterion lines here; printed at session end
CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over a flat array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def block_ref(weights: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Plain-numpy stacked block: last layer linear, relu between layers."""
    h = x
    for w in weights[:-1]:
        h = np.maximum(w @ h, 0.0)
    return weights[-1] @ h


def recursion_ref(enc, dec, mid, kappas, x: np.ndarray, level: int = 0) -> np.ndarray:
    """Literal transcription of the skip recursion, evaluated recursively.

    f_i(x) = dec_{i+1}( kappa_{i+1} * enc_{i+1}(x) + f_{i+1}(enc_{i+1}(x)) )
    with f_N the middle block; the network output is f_0(input).
    """
    N = len(enc)
    if level == N:
        return block_ref(mid, x)
    ex = block_ref(enc[level], x)
    return block_ref(dec[level], kappas[level] * ex + recursion_ref(enc, dec, mid, kappas, ex, level + 1))


def model_arrays(model):
    enc = [[w.data for w in b.weights] for b in model.encoders]
    dec = [[w.data for w in b.weights] for b in model.decoders]
    mid = [w.data for w in model.middle.weights]
    return enc, dec, mid


@pytest.fixture
def rng():
    return Rng(20240817, 0)
