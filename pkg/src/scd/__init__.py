"""Spatially-conditioned diffusion, desk scale.

A small diffusion stack (autodiff tensors, toy U-Net, DDIM sampler,
procedural puppet sprites) built to train and verify reference-conditioned
generation on a CPU. See README.md for the CLI and the verification suites.
"""

from scd.tensor import (
    Tensor,
    TensorError,
    NonFiniteError,
    get_precision,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "Tensor",
    "TensorError",
    "NonFiniteError",
    "get_precision",
    "no_grad",
    "precision",
    "set_precision",
]
