"""Data-side and parameter-side perturbation machinery.

Covers mixup pair construction, the worst-case perturbation of the
mixing coefficient (a signed step of radius rho, since the coefficient
is scalar), the worst-case weight perturbation (the normalized combined
gradient scaled to radius rho), random-perturbation pretraining of the
weights driven by coordinate-level uniformity, and the robust gradient
of the combined objective evaluated at the perturbed weights.

The data and weight perturbations share one forward pass when computed
together; `worst_case_pair` builds a single graph with two scalar roots
and agrees with the two standalone routines to float precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import losses as L
from . import model as M
from . import tensor as T
from .errors import ContractError, DegenerateFeatureError, DimensionError, ParameterError
from .losses import LossParams
from .model import Network
from .tensor import GradTape, Tensor, backward

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class PerturbConfig:
    """Radii and knobs of the perturbation machinery.

    A radius of exactly zero switches the corresponding perturbation off
    (the limiting case the reduction tests rely on).
    """

    rho_data: float = 0.05
    rho_weight: float = 0.05
    mixup_alpha: float = 20.0
    phi_range: float = 1e-4
    phi_epochs: int = 5

    def __post_init__(self):
        if self.rho_data < 0:
            raise ParameterError(f"rho_data must be nonnegative, got {self.rho_data}")
        if self.rho_weight < 0:
            raise ParameterError(f"rho_weight must be nonnegative, got {self.rho_weight}")
        if self.mixup_alpha <= 0:
            raise ParameterError(f"mixup_alpha must be positive, got {self.mixup_alpha}")
        if self.phi_range <= 0:
            raise ParameterError(f"phi_range must be positive, got {self.phi_range}")
        if self.phi_epochs < 0:
            raise ParameterError(f"phi_epochs must be nonnegative, got {self.phi_epochs}")


@dataclass
class MixupPair:
    """Two source batches, their mixing coefficient, and the mixed batch.

    Labels are stored in one-hot space so mixed targets stay exact:
    x_mix = gamma * x_i + (1 - gamma) * x_j, likewise for y.
    """

    x_i: np.ndarray
    y_i: np.ndarray
    x_j: np.ndarray
    y_j: np.ndarray
    gamma: float
    x_mix: np.ndarray = field(init=False)
    y_mix: np.ndarray = field(init=False)

    def __post_init__(self):
        self.x_mix = self.gamma * self.x_i + (1.0 - self.gamma) * self.x_j
        self.y_mix = self.gamma * self.y_i + (1.0 - self.gamma) * self.y_j


@dataclass
class DataPerturbation:
    epsilon_hat: float
    gamma_hat: float
    degenerate: bool = False


@dataclass
class WeightPerturbation:
    upsilon: dict
    grad_norm: float
    degenerate: bool = False


def sample_gamma(mixup_alpha: float, rng: np.random.Generator) -> float:
    """Draw the mixing coefficient from Beta(alpha, alpha)."""
    if mixup_alpha <= 0:
        raise ParameterError(f"mixup_alpha must be positive, got {mixup_alpha}")
    return float(rng.beta(mixup_alpha, mixup_alpha))


def mixup(x_i, y_i, x_j, y_j, gamma: float) -> MixupPair:
    """Convexly combine two batches and their one-hot labels."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    y_i, y_j = np.asarray(y_i, dtype=np.float64), np.asarray(y_j, dtype=np.float64)
    if x_i.shape != x_j.shape or y_i.shape != y_j.shape:
        raise DimensionError(
            f"mixup operands disagree: x {x_i.shape} vs {x_j.shape}, "
            f"y {y_i.shape} vs {y_j.shape}")
    return MixupPair(x_i, y_i, x_j, y_j, float(gamma))


def _global_norm(arrays) -> float:
    return float(np.sqrt(sum(float((a * a).sum()) for a in arrays)))


class _Objective:
    """One forward graph over clean, partner, and mixed batches.

    Built once per step; exposes the scalar roots needed by the
    coefficient perturbation (mixed loss + kappa * ua), the weight
    perturbation and the robust gradient (clean + lam * mixed + kappa * ua).
    """

    def __init__(self, net: Network, task: int, pair: MixupPair, params: LossParams,
                 at: Optional[dict] = None, with_gamma_leaf: bool = False):
        self.tape = GradTape()
        self.bound = M.bind_parameters(net, self.tape, task=task, at=at)
        self.gamma_leaf: Optional[Tensor] = None

        if with_gamma_leaf:
            self.gamma_leaf = Tensor(pair.gamma, requires_grad=True, tape=self.tape)
            one_minus = T.sub(Tensor(1.0), self.gamma_leaf)
            x_mix = T.add(T.mul(Tensor(pair.x_i), self.gamma_leaf),
                          T.mul(Tensor(pair.x_j), one_minus))
            y_mix = T.add(T.mul(Tensor(pair.y_i), self.gamma_leaf),
                          T.mul(Tensor(pair.y_j), one_minus))
        else:
            x_mix, y_mix = Tensor(pair.x_mix), Tensor(pair.y_mix)

        cap_clean = M.forward(net, pair.x_i, task, params=self.bound)
        cap_mix = M.forward(net, x_mix, task, params=self.bound)
        self.loss_clean = L.cross_entropy(cap_clean.logits, Tensor(pair.y_i))
        self.loss_mix = L.cross_entropy(cap_mix.logits, y_mix)

        self.loss_ua: Optional[Tensor] = None
        if params.kappa > 0:
            cap_j = M.forward(net, pair.x_j, task, params=self.bound)
            for cap, what in ((cap_clean, "clean"), (cap_j, "partner"), (cap_mix, "mixed")):
                if cap.features is None:
                    raise DegenerateFeatureError(
                        f"{what} batch produced a zero-norm feature row; "
                        "uniformity/alignment is undefined")
            self.loss_ua = L.l_ua(cap_clean.features, cap_j.features, cap_mix.features, params)

    def data_root(self, params: LossParams) -> Tensor:
        root = self.loss_mix
        if self.loss_ua is not None:
            root = T.add(root, T.mul(self.loss_ua, params.kappa))
        return root

    def weight_root(self, params: LossParams) -> Tensor:
        root = self.loss_clean
        if params.lam > 0:
            root = T.add(root, T.mul(self.loss_mix, params.lam))
        if self.loss_ua is not None:
            root = T.add(root, T.mul(self.loss_ua, params.kappa))
        return root

    def reset_grads(self):
        for t in self.bound.values():
            t.reset_grad()
        if self.gamma_leaf is not None:
            self.gamma_leaf.reset_grad()

    def weight_grads(self) -> dict:
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in self.bound.items()}


def _data_perturbation_from_grad(d: float, gamma: float, rho_data: float) -> DataPerturbation:
    if abs(d) < DEGENERATE_NORM:
        return DataPerturbation(0.0, float(np.clip(gamma, 0.0, 1.0)), degenerate=True)
    eps_hat = rho_data * float(np.sign(d))
    return DataPerturbation(eps_hat, float(np.clip(gamma + eps_hat, 0.0, 1.0)))


def _weight_perturbation_from_grads(grads: dict, rho_weight: float) -> WeightPerturbation:
    norm = _global_norm(grads.values())
    if norm < DEGENERATE_NORM:
        return WeightPerturbation({k: np.zeros_like(v) for k, v in grads.items()},
                                  norm, degenerate=True)
    scale = rho_weight / norm
    return WeightPerturbation({k: scale * v for k, v in grads.items()}, norm)


def worst_case_gamma(net: Network, task: int, pair: MixupPair, params: LossParams,
                     rho_data: float) -> DataPerturbation:
    """Signed radius step on the mixing coefficient that raises the loss most.

    The coefficient is scalar, so the normalized gradient collapses to
    its sign: eps_hat = rho * sign(d), with d the derivative of
    mixed-batch cross-entropy + kappa * ua with respect to gamma. The
    perturbed coefficient is clamped back into [0, 1].
    """
    if rho_data == 0.0:
        return DataPerturbation(0.0, pair.gamma)
    obj = _Objective(net, task, pair, params, with_gamma_leaf=True)
    backward(obj.data_root(params), obj.tape)
    return _data_perturbation_from_grad(float(obj.gamma_leaf.grad), pair.gamma, rho_data)


def worst_case_weight(net: Network, task: int, pair: MixupPair, params: LossParams,
                      rho_weight: float) -> WeightPerturbation:
    """Radius-rho weight perturbation along the combined loss gradient.

    upsilon = rho * g / ||g||_2 with the norm over the globally flattened
    parameter vector of clean + lam * mixed + kappa * ua gradients.
    """
    if rho_weight == 0.0:
        return WeightPerturbation(
            {name: np.zeros_like(net.params[name]) for name in net.param_names(task)}, 0.0)
    obj = _Objective(net, task, pair, params)
    backward(obj.weight_root(params), obj.tape)
    return _weight_perturbation_from_grads(obj.weight_grads(), rho_weight)


def worst_case_pair(net: Network, task: int, pair: MixupPair, params: LossParams,
                    cfg: PerturbConfig) -> tuple[DataPerturbation, WeightPerturbation]:
    """Both perturbations from one forward pass.

    The shared graph is walked backward once per scalar root; results
    match the standalone routines to float precision.
    """
    if cfg.rho_data == 0.0 and cfg.rho_weight == 0.0:
        return (DataPerturbation(0.0, pair.gamma),
                WeightPerturbation({name: np.zeros_like(net.params[name])
                                    for name in net.param_names(task)}, 0.0))
    obj = _Objective(net, task, pair, params, with_gamma_leaf=True)

    if cfg.rho_data == 0.0:
        data = DataPerturbation(0.0, pair.gamma)
    else:
        backward(obj.data_root(params), obj.tape)
        data = _data_perturbation_from_grad(float(obj.gamma_leaf.grad), pair.gamma, cfg.rho_data)
        obj.reset_grads()

    if cfg.rho_weight == 0.0:
        weight = WeightPerturbation({name: np.zeros_like(net.params[name])
                                     for name in net.param_names(task)}, 0.0)
    else:
        backward(obj.weight_root(params), obj.tape)
        weight = _weight_perturbation_from_grads(obj.weight_grads(), cfg.rho_weight)
    return data, weight


def robust_gradient_and_loss(net: Network, upsilon: dict, task: int, pair: MixupPair,
                             params: LossParams) -> tuple[dict, float]:
    """Gradient and value of clean + lam * mixed + kappa * ua at W + upsilon.

    ``pair`` carries the re-mixed batch (built with the perturbed
    coefficient); the network parameters themselves are not modified.
    """
    names = net.param_names(task)
    if set(upsilon) != set(names):
        raise DimensionError(
            f"upsilon keys disagree with parameters: missing="
            f"{sorted(set(names) - set(upsilon))}, extra={sorted(set(upsilon) - set(names))}")
    for name in names:
        if np.shape(upsilon[name]) != net.params[name].shape:
            raise DimensionError(
                f"upsilon for {name} has shape {np.shape(upsilon[name])}, "
                f"expected {net.params[name].shape}")
    at = {name: net.params[name] + upsilon[name] for name in names}
    obj = _Objective(net, task, pair, params, at=at)
    root = obj.weight_root(params)
    backward(root, obj.tape)
    return obj.weight_grads(), root.item()


def robust_gradient(net: Network, upsilon: dict, task: int, pair: MixupPair,
                    params: LossParams) -> dict:
    """Gradient of the combined objective at W + upsilon; see above."""
    grads, _ = robust_gradient_and_loss(net, upsilon, task, pair, params)
    return grads


def combined_loss(net: Network, task: int, pair: MixupPair, params: LossParams,
                  at: Optional[dict] = None) -> float:
    """Value of clean + lam * mixed + kappa * ua, optionally at shifted weights."""
    obj = _Objective(net, task, pair, params, at=at)
    return obj.weight_root(params).item()


def robust_pretrain_phi(net: Network, cfg: PerturbConfig, tau: float, lr: float,
                        seed: int) -> Network:
    """Random-perturbation pretraining: train phi under coordinate uniformity.

    One standard-normal eps per scalar is drawn up front and reused; each
    epoch updates every parameter tensor's phi by one gradient step on
    the coordinate-level uniformity of (theta, theta + eps * phi), then
    clips phi into [-phi_range, phi_range]. The returned copy carries
    theta + eps * phi as its new initialization; with zero epochs the
    network is returned unchanged.
    """
    if cfg.phi_range <= 0:
        raise ParameterError(f"phi_range must be positive, got {cfg.phi_range}")
    out = net.copy()
    if cfg.phi_epochs == 0:
        return out
    rng = np.random.default_rng(seed)
    names = net.param_names()
    eps = {name: rng.standard_normal(net.params[name].shape) for name in names}
    phi = {name: rng.uniform(-cfg.phi_range, cfg.phi_range, size=net.params[name].shape)
           for name in names}
    for _ in range(cfg.phi_epochs):
        for name in names:
            tape = GradTape()
            phi_leaf = Tensor(phi[name], requires_grad=True, tape=tape)
            tilde = T.add(Tensor(net.params[name]), T.mul(Tensor(eps[name]), phi_leaf))
            backward(L.parameter_uniformity(Tensor(net.params[name]), tilde, tau), tape)
            phi[name] = np.clip(phi[name] - lr * phi_leaf.grad,
                                -cfg.phi_range, cfg.phi_range)
    for name in names:
        out.params[name] = net.params[name] + eps[name] * phi[name]
    return out
