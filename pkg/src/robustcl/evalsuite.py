"""Robustness and loss-geometry diagnostics.

Single-step sign-gradient input attacks and accuracy sweeps over attack
strengths, robust loss, worst-case and random-direction flatness of the
weight loss landscape, an input-perturbation gradient probe, and the
2-D hypersphere feature export. Every routine here is read-only: the
network is bitwise unchanged after any call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import model as M
from .errors import ContractError, DimensionError, ParameterError
from .losses import cross_entropy
from .model import Network
from .tensor import GradTape, Tensor, backward


@dataclass(frozen=True)
class FlatnessProbe:
    """Shape of a loss-landscape probe.

    ``xi`` scales the worst-case step; ``spans`` are the multipliers
    applied to random normalized directions and must include 0 so every
    slice carries its unperturbed baseline.
    """

    xi: float = 0.05
    mode: str = "worst_case"
    directions: int = 10
    spans: tuple = (-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0)

    def __post_init__(self):
        if self.xi <= 0:
            raise ParameterError(f"xi must be positive, got {self.xi}")
        if self.mode not in ("worst_case", "random_slice"):
            raise ParameterError(f"unknown probe mode {self.mode!r}")
        if self.directions < 1:
            raise ParameterError(f"directions must be positive, got {self.directions}")
        spans = np.asarray(self.spans, dtype=np.float64)
        if not np.isfinite(spans).all():
            raise ParameterError("spans must be finite")
        if 0.0 not in spans:
            raise ParameterError("spans must include 0")


@dataclass
class FlatnessResult:
    value: float
    degenerate: bool = False
    skipped_layers: list = field(default_factory=list)


@dataclass
class GradientProbeResult:
    grad_norm_clean: float
    grad_norm_perturbed: float
    past_logit_delta: Optional[float]
    current_logit_delta: float


def _split(task, which: str):
    x, y = getattr(task, which)
    if x.shape[0] < 1:
        raise ContractError(f"task {task.task_id} has an empty {which} split")
    return np.asarray(x, dtype=np.float64), task.local_labels(y)


def _ce_value(net: Network, x, y_local, task: int, at: Optional[dict] = None) -> float:
    params = None
    if at is not None:
        params = {name: Tensor(arr) for name, arr in at.items()}
    cap = M.forward(net, x, task, params=params)
    return cross_entropy(cap.logits, y_local).item()


def _ce_weight_grads(net: Network, x, y_local, task: int) -> dict:
    tape = GradTape()
    bound = M.bind_parameters(net, tape, task=task)
    cap = M.forward(net, x, task, params=bound)
    backward(cross_entropy(cap.logits, y_local), tape)
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in bound.items()}


def input_gradient(net: Network, x, y_local, task: int) -> np.ndarray:
    """Gradient of mean cross-entropy with respect to the input batch."""
    tape = GradTape()
    xs = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, tape=tape)
    cap = M.forward(net, xs, task)
    backward(cross_entropy(cap.logits, y_local), tape)
    return xs.grad


def fgsm(net: Network, x, y, mu: float, task: int,
         clip: Optional[tuple] = None) -> np.ndarray:
    """X + mu * sign(grad_X loss); optionally clipped to the data domain."""
    if mu < 0:
        raise ParameterError(f"mu must be nonnegative, got {mu}")
    x = np.asarray(x, dtype=np.float64)
    if mu == 0.0:
        return x.copy()
    y = np.asarray(y)
    grad = input_gradient(net, x, y, task)
    adv = x + mu * np.sign(grad)
    if clip is not None:
        adv = np.clip(adv, clip[0], clip[1])
    return adv


def robust_loss(net: Network, task, mu: float, split: str = "test") -> float:
    """Mean cross-entropy on sign-gradient adversarial examples."""
    x, y_local = _split(task, split)
    adv = fgsm(net, x, y_local, mu, task.task_id)
    return _ce_value(net, adv, y_local, task.task_id)


def adversarial_accuracy(net: Network, task, mu: float, split: str = "test") -> float:
    x, y_local = _split(task, split)
    adv = fgsm(net, x, y_local, mu, task.task_id)
    cap = M.forward(net, adv, task.task_id)
    return 100.0 * float(np.mean(np.argmax(cap.logits.data, axis=1) == y_local))


def fgsm_sweep(net: Network, stream, mus, method: str = "", split: str = "test") -> list:
    """Mean accuracy over all tasks per attack strength.

    Rows carry (mu, method, accuracy, delta) where delta is the change
    from the clean (mu = 0) accuracy.
    """
    rows = []
    clean = None
    for mu in mus:
        acc = float(np.mean([adversarial_accuracy(net, task, mu, split) for task in stream]))
        if clean is None and mu == 0.0:
            clean = acc
        rows.append({"mu": float(mu), "method": method, "accuracy": acc})
    if clean is None:
        clean = float(np.mean([adversarial_accuracy(net, task, 0.0, split) for task in stream]))
    for row in rows:
        row["delta"] = row["accuracy"] - clean
    return rows


# flatness -------------------------------------------------------------------


def normalize_direction(direction: dict, weights: dict) -> tuple[dict, list]:
    """Per-layer normalization: dir_l <- dir_l / ||dir_l|| * ||w_l||.

    Layers whose weights (or whose direction) have zero norm are skipped
    and reported; their entries come back zero.
    """
    out = {}
    skipped = []
    for name, d in direction.items():
        w = weights[name]
        wn = float(np.linalg.norm(w))
        dn = float(np.linalg.norm(d))
        if wn == 0.0 or dn == 0.0:
            out[name] = np.zeros_like(w)
            if wn == 0.0:
                skipped.append(name)
            continue
        out[name] = d * (wn / dn)
    return out, skipped


def directional_loss_delta(loss_fn: Callable[[dict], float], weights: dict,
                           direction: dict, scale: float) -> float:
    """loss(w + scale * direction) - loss(w) for an arbitrary loss closure."""
    shifted = {name: weights[name] + scale * direction[name] for name in weights}
    return float(loss_fn(shifted)) - float(loss_fn(weights))


def worst_case_flatness(net: Network, task, xi: float, split: str = "train") -> FlatnessResult:
    """Loss increase along the per-layer-normalized ascent direction.

    The direction is the cross-entropy gradient, normalized per layer to
    the layer's weight norm, scaled by xi. A network with all-zero
    gradients reports 0 with the degenerate flag.
    """
    if xi <= 0:
        raise ParameterError(f"xi must be positive, got {xi}")
    x, y_local = _split(task, split)
    names = net.param_names(task.task_id)
    weights = {name: net.params[name] for name in names}
    grads = _ce_weight_grads(net, x, y_local, task.task_id)
    grad_norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if grad_norm < 1e-12:
        return FlatnessResult(0.0, degenerate=True)
    direction, skipped = normalize_direction(grads, weights)

    def loss_fn(w):
        return _ce_value(net, x, y_local, task.task_id, at=w)

    value = directional_loss_delta(loss_fn, weights, direction, xi)
    return FlatnessResult(value, skipped_layers=skipped)


def landscape_slice(net: Network, task, probe: FlatnessProbe, seed: int,
                    split: str = "train") -> list:
    """Loss along seeded random per-layer-normalized directions.

    Returns one row per (direction, span); the span-0 rows carry the
    exact unperturbed loss.
    """
    x, y_local = _split(task, split)
    names = net.param_names(task.task_id)
    weights = {name: net.params[name] for name in names}
    rng = np.random.default_rng(seed)

    def loss_fn(w):
        return _ce_value(net, x, y_local, task.task_id, at=w)

    baseline = float(loss_fn(weights))
    rows = []
    for d in range(probe.directions):
        raw = {name: rng.standard_normal(weights[name].shape) for name in names}
        direction, _ = normalize_direction(raw, weights)
        for span in probe.spans:
            if span == 0.0:
                loss = baseline
            else:
                shifted = {name: weights[name] + span * direction[name] for name in names}
                loss = float(loss_fn(shifted))
            rows.append({"direction_id": d, "span": float(span), "loss": loss})
    return rows


def abnormal_gradient_probe(net: Network, x, y, eps_scale: float,
                            task: int) -> GradientProbeResult:
    """Compare weight-gradient norms on clean vs input-perturbed batches.

    The perturbation is the sign-gradient direction scaled by
    ``eps_scale``. Also reports how past-head logits and the true-class
    logits on the current head move under the perturbation; the past
    delta is None when no earlier head exists.
    """
    if eps_scale < 0:
        raise ParameterError(f"eps_scale must be nonnegative, got {eps_scale}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    adv = fgsm(net, x, y, eps_scale, task)

    def grad_norm(batch):
        grads = _ce_weight_grads(net, batch, y, task)
        return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))

    clean_norm = grad_norm(x)
    pert_norm = grad_norm(adv)

    logits_clean = M.forward(net, x, task).logits.data
    logits_adv = M.forward(net, adv, task).logits.data
    rows = np.arange(x.shape[0])
    current_delta = float(np.mean(logits_adv[rows, y] - logits_clean[rows, y]))

    past = [t for t in net.head_tasks() if t < task]
    past_delta = None
    if past:
        deltas = []
        for t in past:
            pc = M.forward(net, x, t).logits.data
            pa = M.forward(net, adv, t).logits.data
            deltas.append(float(np.mean(pa - pc)))
        past_delta = float(np.mean(deltas))
    return GradientProbeResult(clean_norm, pert_norm, past_delta, current_delta)


# feature export ---------------------------------------------------------------


def fit_projection_probe(features: np.ndarray, labels: np.ndarray,
                         n_classes: int) -> np.ndarray:
    """Least-squares 2-D probe mapping features toward circle-spaced class anchors."""
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    targets = np.stack([np.cos(angles), np.sin(angles)], axis=1)[labels]
    probe, *_ = np.linalg.lstsq(features, targets, rcond=None)
    return probe


def export_features(net: Network, samples, labels, task: int, mode: str = "random",
                    seed: int = 0) -> tuple[list, dict]:
    """Unit-circle feature rows (x, y, angle, label, task).

    Penultimate activations are normalized onto the hypersphere, mapped
    to 2-D by a fixed seeded random projection (default) or a fitted
    linear probe, and renormalized; angle = arctan2(y, x) in (-pi, pi].
    Rows whose features collapse come back as NaN (the degenerate flag).
    """
    if mode not in ("random", "probe"):
        raise ParameterError(f"unknown projection mode {mode!r}")
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if samples.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"{samples.shape[0]} samples vs {labels.shape[0]} labels")
    cap = M.forward(net, samples, task)
    pen = cap.penultimate.data
    norms = np.linalg.norm(pen, axis=1, keepdims=True)
    good = norms[:, 0] > 1e-12
    unit = np.where(good[:, None], pen / np.where(norms > 1e-12, norms, 1.0), 0.0)

    if mode == "random":
        projection = np.random.default_rng(seed).standard_normal((pen.shape[1], 2))
    else:
        if not good.all():
            raise ContractError("probe fitting needs nondegenerate features")
        projection = fit_projection_probe(unit, labels - labels.min(), int(labels.max() - labels.min()) + 1)

    planar = unit @ projection
    pnorms = np.linalg.norm(planar, axis=1)
    rows = []
    for i in range(samples.shape[0]):
        if not good[i] or pnorms[i] <= 1e-12:
            rows.append({"x": float("nan"), "y": float("nan"), "angle": float("nan"),
                         "label": int(labels[i]), "task": task})
            continue
        px, py = planar[i] / pnorms[i]
        angle = float(np.arctan2(py, px))
        if angle <= -np.pi:
            angle = np.pi
        rows.append({"x": float(px), "y": float(py), "angle": angle,
                     "label": int(labels[i]), "task": task})
    meta = {"projection": mode, "seed": seed if mode == "random" else None}
    return rows, meta


# csv writers -------------------------------------------------------------------


def write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(fieldnames) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in fieldnames) + "\n")


def write_adv_eval(path, rows) -> None:
    write_csv(path, ["mu", "method", "accuracy", "delta"], rows)


def write_landscape(path, rows) -> None:
    write_csv(path, ["direction_id", "span", "loss"], rows)


def write_features(path, rows) -> None:
    write_csv(path, ["x", "y", "angle", "label", "task"], rows)
