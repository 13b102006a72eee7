"""Stochastic vector field mixtures in the neural-ODE framework."""

from .backend import COMPILED, IMPL_NAME

__version__ = "0.1.0"
__all__ = ["COMPILED", "IMPL_NAME", "__version__"]
