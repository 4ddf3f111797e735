"""Dual-direction audio/face-motion learning library.

Trains a speech-to-3D-facial-motion model jointly with its lip-reading
counterpart on a shared latent space, using a small self-contained
reverse-mode autodiff core (float64 throughout).
"""

__version__ = "0.1.0"

from .diffcore import Parameter, Tape, Tensor, PrimitiveKind, evaluate, backpropagate, check_gradients

__all__ = [
    "__version__",
    "Parameter",
    "Tape",
    "Tensor",
    "PrimitiveKind",
    "evaluate",
    "backpropagate",
    "check_gradients",
]
