"""skipscale: a numerical laboratory for skip-connection coefficient scaling.

Small dense networks with long skip connections, a from-scratch reverse-mode
engine, a diffusion-style training objective, coefficient-scaling policies,
and empirical verifiers for the norm/gradient/robustness behavior those
coefficients control.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, kaiming_init, matmul, relu, spectral_norm
from .rng import Rng

__all__ = [
    "Rng",
    "Tape",
    "Tensor",
    "kaiming_init",
    "matmul",
    "relu",
    "spectral_norm",
    "__version__",
]
