"""Identifiable Onsager-type stochastic dynamics learned from trajectories.

Importing the package switches JAX to 64-bit arithmetic; divergence terms and
mixed second-order gradients are too noise-sensitive for float32.
"""

import jax

jax.config.update("jax_enable_x64", True)

from .nets import Activation, NetParams, NetSpec  # noqa: E402
from .model import ModelState, build_model  # noqa: E402

__all__ = ["Activation", "NetSpec", "NetParams", "ModelState", "build_model"]
__version__ = "0.1.0"
