"""Scalar training objectives.

Cross-entropy over task logits (hard or soft labels), the hypersphere
uniformity and alignment losses, their mixed-batch combination used
around mixup, and the coordinate-level uniformity that drives the
random-perturbation pretraining of weights. Everything returns a scalar
:class:`~robustcl.tensor.Tensor` so gradients flow to weights, inputs,
and the mixing coefficient alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class LossParams:
    """Weights and temperatures of the combined objective.

    ``tau`` is the Gaussian-potential temperature, ``align_exponent`` the
    exponent on positive-pair distances, ``lam`` the mixed-batch
    cross-entropy weight and ``kappa`` the uniformity/alignment weight.
    """

    tau: float = 2.0
    align_exponent: float = 2.0
    lam: float = 0.1
    kappa: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.align_exponent <= 0:
            raise ParameterError(f"align_exponent must be positive, got {self.align_exponent}")
        if self.lam < 0:
            raise ParameterError(f"lam must be nonnegative, got {self.lam}")
        if self.kappa < 0:
            raise ParameterError(f"kappa must be nonnegative, got {self.kappa}")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError(f"labels must be 1-d, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(
            f"label index out of range for {num_classes} classes: "
            f"[{labels.min()}, {labels.max()}]"
        )
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax likelihood over a batch.

    ``labels`` may be integer class indices or a soft (n, C) matrix; soft
    labels stay differentiable, which the mixed targets rely on.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (n, C), got shape {logits.shape}")
    n, c = logits.shape
    if n < 1:
        raise ContractError("cross_entropy needs a nonempty batch")
    if isinstance(labels, Tensor):
        soft = labels
    else:
        arr = np.asarray(labels)
        if arr.ndim == 1:
            soft = Tensor(one_hot(arr, c))
        else:
            soft = Tensor(arr)
    if soft.shape != (n, c):
        raise DimensionError(f"labels shape {soft.shape} does not match logits {logits.shape}")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    log_z = T.add(T.log(T.tensor_sum(T.exp(T.sub(logits, shift)), axis=1, keepdims=True)), shift)
    picked = T.tensor_sum(T.mul(soft, logits), axis=1, keepdims=True)
    return T.mean(T.sub(log_z, picked))


def _require_unit_rows(f: Tensor, name: str) -> None:
    norms = np.linalg.norm(f.data, axis=1)
    if norms.size and np.abs(norms - 1.0).max() > 1e-8:
        raise ContractError(f"{name} rows must be unit-norm, worst deviation "
                            f"{np.abs(norms - 1.0).max():.3e}")


def _pairwise_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    # clamp float noise so potentials never exceed 1
    sa = T.tensor_sum(T.mul(a, a), axis=1, keepdims=True)
    sb = T.transpose(T.tensor_sum(T.mul(b, b), axis=1, keepdims=True))
    cross = T.matmul(a, T.transpose(b))
    return T.relu(T.sub(T.add(sa, sb), T.mul(cross, 2.0)))


def uniformity(features, tau: float) -> Tensor:
    """Log of the mean pairwise Gaussian potential over distinct ordered pairs."""
    f = features if isinstance(features, Tensor) else Tensor(features)
    if f.ndim != 2:
        raise DimensionError(f"features must be (n, d), got shape {f.shape}")
    n = f.shape[0]
    if n < 2:
        raise ContractError(f"uniformity needs at least two rows, got {n}")
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    _require_unit_rows(f, "features")
    potentials = T.exp(T.mul(_pairwise_sq_dists(f, f), -tau))
    off_diag = Tensor(1.0 - np.eye(n))
    total = T.tensor_sum(T.mul(potentials, off_diag))
    return T.log(T.mul(total, 1.0 / (n * (n - 1))))


def uniformity_cross(f_a, f_b, tau: float) -> Tensor:
    """Uniformity over all ordered cross pairs of two feature batches.

    The two batches hold distinct samples, so every one of the n*m cross
    pairs counts; a single row per side is allowed.
    """
    a = f_a if isinstance(f_a, Tensor) else Tensor(f_a)
    b = f_b if isinstance(f_b, Tensor) else Tensor(f_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature batches disagree: {a.shape} vs {b.shape}")
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    _require_unit_rows(a, "first batch")
    _require_unit_rows(b, "second batch")
    potentials = T.exp(T.mul(_pairwise_sq_dists(a, b), -tau))
    return T.log(T.mean(potentials))


def alignment(f_a, f_b, align_exponent: float = 2.0) -> Tensor:
    """Mean distance between positive pairs, raised to ``align_exponent``.

    Returned as a nonnegative quantity to be minimized.
    """
    a = f_a if isinstance(f_a, Tensor) else Tensor(f_a)
    b = f_b if isinstance(f_b, Tensor) else Tensor(f_b)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"positive pairs disagree: {a.shape} vs {b.shape}")
    if align_exponent <= 0:
        raise ParameterError(f"align_exponent must be positive, got {align_exponent}")
    _require_unit_rows(a, "first batch")
    _require_unit_rows(b, "second batch")
    diff = T.sub(a, b)
    sq = T.tensor_sum(T.mul(diff, diff), axis=1)
    if align_exponent == 2.0:
        return T.mean(sq)
    return T.mean(T.power(sq, align_exponent / 2.0))


def l_ua(f_xi, f_xj, f_mix, params: LossParams) -> Tensor:
    """Combined uniformity/alignment loss around a mixed batch.

    Uniformity spreads the two source batches against each other; the
    mixed batch is pulled toward both sources as positive pairs.
    """
    shapes = {tuple(np.shape(f.data if isinstance(f, Tensor) else f)) for f in (f_xi, f_xj, f_mix)}
    if len(shapes) != 1:
        raise DimensionError(f"the three feature batches must share a shape, got {sorted(shapes)}")
    unif = uniformity_cross(f_xi, f_xj, params.tau)
    align_i = alignment(f_xi, f_mix, params.align_exponent)
    align_j = alignment(f_xj, f_mix, params.align_exponent)
    return T.add(unif, T.mul(T.add(align_i, align_j), 0.5))


def parameter_uniformity(theta, theta_tilde, tau: float) -> Tensor:
    """Coordinate-level uniformity between a weight tensor and its perturbation.

    Each scalar coordinate pair (theta_i, theta_tilde_i) contributes one
    Gaussian potential; the loss is the log of their mean and is
    differentiable through ``theta_tilde``.
    """
    a = theta if isinstance(theta, Tensor) else Tensor(theta)
    b = theta_tilde if isinstance(theta_tilde, Tensor) else Tensor(theta_tilde)
    if a.shape != b.shape:
        raise DimensionError(f"weight tensors disagree: {a.shape} vs {b.shape}")
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    diff = T.sub(a, b)
    return T.log(T.mean(T.exp(T.mul(T.mul(diff, diff), -tau))))
