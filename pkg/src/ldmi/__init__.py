"""Dual-level multi-interest sequential recommendation with LLM interest clusters."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
