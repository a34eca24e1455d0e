"""Depth-guided single-image dehazing toolkit.

A small float64 autodiff engine, an atmospheric-scattering scene synthesizer,
depth-conditioned restoration networks with windowed cross-attention, training
and evaluation loops, and a haze-versus-depth analysis kit, all behind one CLI.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad, set_finite_checks  # noqa: F401
