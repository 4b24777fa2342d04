"""Unified image and video saliency modeling with domain-adaptive layers."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
