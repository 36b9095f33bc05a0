"""Desk-scale robust continual learning.

A small numpy-backed library covering the full training method: a taped
autodiff engine, multi-head networks, hypersphere uniformity/alignment
losses, worst-case data and weight perturbations, gradient projection
memory, sequential-task trainers with ACC/BWT metrics, and a robustness
evaluation suite (FGSM sweeps, flatness probes, feature exports).
"""

__version__ = "0.1.0"

from . import errors
from .tensor import GradTape, Tensor, backward, finite_diff_grad

__all__ = ["GradTape", "Tensor", "backward", "finite_diff_grad", "errors", "__version__"]
