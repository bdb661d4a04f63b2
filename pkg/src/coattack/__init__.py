"""Coordinated image+text adversarial attack workbench."""

__version__ = "0.1.0"

from .tensor import Tensor, cosine_similarity, grad_check, softmax_with_temperature

__all__ = ["Tensor", "cosine_similarity", "grad_check", "softmax_with_temperature", "__version__"]
