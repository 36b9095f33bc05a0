"""Sequential-task training loops, evaluation, and ACC/BWT metrics.

Three trainers share one skeleton: plain SGD (naive), SGD with
memory-projected gradients (gpm), and the full robust loop (rcl): per
batch, draw a mixing coefficient, build the mixed batch, push the
coefficient to its worst case, re-mix, push the weights to their worst
case, take the combined gradient there, project it through the memory,
and step. Ablation flags reshape where the uniformity/alignment term
enters: nowhere, only in the gradient, or everywhere.

Everything is single-threaded and deterministic per seed; random
streams for batch order, mixup draws, and memory sampling are derived
independently so that disabling one mechanism does not shift another.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import gpm as G
from . import model as M
from . import perturb as P
from .errors import ContractError, ParameterError
from .losses import LossParams, cross_entropy, one_hot
from .model import Network
from .perturb import PerturbConfig
from .records import RECORD_SCHEMA, RunRecord
from .tensor import GradTape, backward

METHODS = ("naive", "gpm", "rcl")
PROJECTION_AUDIT_BOUND = 1e-8


@dataclass(frozen=True)
class Ablations:
    """Component switches mirroring the single-component study rows."""

    disable_ua: bool = False
    disable_phi: bool = False
    ua_in_gradient_only: bool = False


@dataclass(frozen=True)
class TrainConfig:
    method: str = "rcl"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    loss: LossParams = field(default_factory=LossParams)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    eps_th: float = 0.97
    gpm_samples: int = 64
    phi_lr: Optional[float] = None
    seed: int = 0
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr < 0:
            raise ParameterError(f"lr must be nonnegative, got {self.lr}")
        if not 0.0 < self.eps_th <= 1.0:
            raise ParameterError(f"eps_th must lie in (0, 1], got {self.eps_th}")
        if self.gpm_samples < 1:
            raise ParameterError(f"gpm_samples must be positive, got {self.gpm_samples}")
        if self.phi_lr is not None and self.phi_lr <= 0:
            raise ParameterError(f"phi_lr must be positive, got {self.phi_lr}")


def effective_params(cfg: TrainConfig) -> dict:
    """The (lambda, kappa, phi) actually in force after ablation flags."""
    if cfg.method != "rcl":
        return {"lambda": 0.0, "kappa_search": 0.0, "kappa_gradient": 0.0,
                "phi_pretraining": False}
    ab = cfg.ablations
    kappa_search = 0.0 if (ab.disable_ua or ab.ua_in_gradient_only) else cfg.loss.kappa
    kappa_gradient = 0.0 if ab.disable_ua else cfg.loss.kappa
    phi_on = (not ab.disable_phi) and cfg.perturb.phi_epochs > 0
    return {"lambda": cfg.loss.lam, "kappa_search": kappa_search,
            "kappa_gradient": kappa_gradient, "phi_pretraining": phi_on}


def _task_rngs(seed: int, task_index: int):
    order = np.random.default_rng(np.random.SeedSequence((seed, 11, task_index)))
    mix = np.random.default_rng(np.random.SeedSequence((seed, 13, task_index)))
    sample = np.random.default_rng(np.random.SeedSequence((seed, 17, task_index)))
    return order, mix, sample


def phi_seed(seed: int) -> int:
    return int(np.random.SeedSequence((seed, 19)).generate_state(1)[0])


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _audited_projection(grads: dict, memory: G.ProjectionMemory) -> tuple[dict, float]:
    """Project and verify orthogonality against every basis."""
    projected = G.project_gradient(grads, memory)
    worst = 0.0
    for name, basis in memory.bases.items():
        g = np.asarray(grads[name], dtype=np.float64)
        ghat = projected[name]
        if ghat.ndim == 4:
            mat = ghat.reshape(ghat.shape[0], -1).T
        elif ghat.ndim == 1:
            mat = ghat.reshape(1, -1)
        else:
            mat = ghat
        leak = float(np.abs(basis.T @ mat).max()) if basis.size else 0.0
        scale = float(np.linalg.norm(g))
        if leak > PROJECTION_AUDIT_BOUND * max(scale, 1e-30):
            raise ContractError(
                f"projection audit failed for {name}: leak {leak:.3e} vs bound "
                f"{PROJECTION_AUDIT_BOUND * scale:.3e}")
        if scale > 0:
            worst = max(worst, leak / scale)
    return projected, worst


def _plain_gradient(net: Network, x, y_local, task: int) -> tuple[dict, float]:
    tape = GradTape()
    bound = M.bind_parameters(net, tape, task=task)
    cap = M.forward(net, x, task, params=bound)
    loss = cross_entropy(cap.logits, y_local)
    backward(loss, tape)
    grads = M.zero_gradients(net)
    for name, tensor in bound.items():
        grads[name] = tensor.grad
    return grads, loss.item()


def train_task_naive(net: Network, task, cfg: TrainConfig, task_index: int = 0,
                     on_step: Optional[Callable] = None) -> list:
    """Plain SGD on one task; the lower-bound baseline."""
    return _train_task(net, None, task, cfg, task_index, on_step, robust=False)


def train_task_gpm(net: Network, memory: G.ProjectionMemory, task, cfg: TrainConfig,
                   task_index: int = 0, on_step: Optional[Callable] = None) -> list:
    """SGD with gradients projected off the memory's core subspaces."""
    return _train_task(net, memory, task, cfg, task_index, on_step, robust=False)


def train_task_rcl(net: Network, memory: G.ProjectionMemory, task, cfg: TrainConfig,
                   task_index: int = 0, on_step: Optional[Callable] = None) -> list:
    """The full robust loop over one task."""
    return _train_task(net, memory, task, cfg, task_index, on_step, robust=True)


def _train_task(net, memory, task, cfg, task_index, on_step, robust):
    x_train, y_train = task.train
    if x_train.shape[0] < 1:
        raise ContractError(f"task {task.task_id} has no training data")
    y_local = task.local_labels(y_train)
    n_classes = task.n_classes
    order_rng, mix_rng, _ = _task_rngs(cfg.seed, task_index)
    eff = effective_params(cfg)
    search_params = replace(cfg.loss, kappa=eff["kappa_search"]) if robust else cfg.loss
    grad_params = replace(cfg.loss, kappa=eff["kappa_gradient"]) if robust else cfg.loss

    logs = []
    for epoch in range(cfg.epochs):
        losses = []
        audit_worst = 0.0
        for idx in _epoch_batches(x_train.shape[0], cfg.batch_size, order_rng):
            xb = x_train[idx]
            yb = y_local[idx]
            if robust:
                gamma = P.sample_gamma(cfg.perturb.mixup_alpha, mix_rng)
                perm = mix_rng.permutation(len(idx))
                y1h = one_hot(yb, n_classes)
                pair = P.mixup(xb, y1h, xb[perm], y1h[perm], gamma)
                data_pert, weight_pert = P.worst_case_pair(
                    net, task.task_id, pair, search_params, cfg.perturb)
                remixed = P.mixup(xb, y1h, xb[perm], y1h[perm], data_pert.gamma_hat)
                grads_active, loss_value = P.robust_gradient_and_loss(
                    net, weight_pert.upsilon, task.task_id, remixed, grad_params)
                grads = M.zero_gradients(net)
                grads.update(grads_active)
            else:
                grads, loss_value = _plain_gradient(net, xb, yb, task.task_id)
            if memory is not None:
                grads, leak = _audited_projection(grads, memory)
                audit_worst = max(audit_worst, leak)
            M.apply_update(net, grads, cfg.lr)
            losses.append(loss_value)
            if on_step is not None:
                on_step(net)
        logs.append({"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else None,
                     "audit_max": audit_worst})
    return logs


def evaluate(net: Network, tasks) -> list:
    """Accuracy (percent) on every given task's test split, task id known."""
    row = []
    for task in tasks:
        x_test, y_test = task.test
        if x_test.shape[0] < 1:
            raise ContractError(f"task {task.task_id} has an empty test split")
        cap = M.forward(net, x_test, task.task_id)
        pred = np.argmax(cap.logits.data, axis=1)
        row.append(100.0 * float(np.mean(pred == task.local_labels(y_test))))
    return row


def compute_metrics(matrix) -> tuple[float, Optional[float]]:
    """Final average accuracy and backward transfer from the accuracy matrix."""
    if not matrix:
        raise ContractError("accuracy matrix is empty")
    for t, row in enumerate(matrix):
        if len(row) != t + 1:
            raise ContractError(
                f"accuracy matrix is ragged: row {t} has {len(row)} entries, expected {t + 1}")
    t_final = len(matrix)
    last = matrix[-1]
    acc = float(np.mean(last))
    if t_final == 1:
        return acc, None
    bwt = float(np.mean([last[i] - matrix[i][i] for i in range(t_final - 1)]))
    return acc, bwt


def run_sequence(cfg: TrainConfig, stream, net: Network,
                 config_echo: Optional[dict] = None) -> tuple[RunRecord, G.ProjectionMemory]:
    """Train through a task stream and assemble the full run record.

    Pretraining of the random weight perturbation happens once before
    the first task (rcl only, unless ablated); the projection memory is
    updated after every task from fresh training samples. On failure, a
    partial record with an error marker rides on the raised exception as
    ``partial_record``.
    """
    if not stream:
        raise ContractError("task stream is empty")
    memory = G.ProjectionMemory(eps_th=cfg.eps_th)
    matrix: list = []
    epoch_logs: list = []
    ranks_log: list = []
    wall: list = []
    eff = effective_params(cfg)

    def record(error=None):
        if matrix:
            acc, bwt = compute_metrics(matrix)
        else:
            acc, bwt = float("nan"), None
        return RunRecord(
            schema_version=RECORD_SCHEMA, method=cfg.method, seed=cfg.seed,
            config=config_echo or {}, effective=eff, accuracy_matrix=matrix,
            acc=acc, bwt=bwt, epoch_logs=epoch_logs, gpm_ranks=ranks_log,
            wall_clock=wall, error=error)

    try:
        for index, task in enumerate(stream):
            net.add_head(task.task_id, task.n_classes)
            if index == 0 and eff["phi_pretraining"]:
                pre = P.robust_pretrain_phi(
                    net, cfg.perturb, cfg.loss.tau,
                    cfg.phi_lr if cfg.phi_lr is not None else cfg.lr,
                    seed=phi_seed(cfg.seed))
                net.params = pre.params
            started = time.perf_counter()
            if cfg.method == "naive":
                logs = train_task_naive(net, task, cfg, task_index=index)
            elif cfg.method == "gpm":
                logs = train_task_gpm(net, memory, task, cfg, task_index=index)
            else:
                logs = train_task_rcl(net, memory, task, cfg, task_index=index)
            wall.append(time.perf_counter() - started)
            epoch_logs.append(logs)
            matrix.append(evaluate(net, stream[: index + 1]))
            if cfg.method in ("gpm", "rcl"):
                _, _, sample_rng = _task_rngs(cfg.seed, index)
                x_train = task.train[0]
                take = min(cfg.gpm_samples, x_train.shape[0])
                chosen = sample_rng.permutation(x_train.shape[0])[:take]
                ranks = G.update_from_task(memory, net, x_train[chosen], task.task_id)
                ranks_log.append({"task": task.task_id, "ranks": ranks})
    except Exception as exc:
        exc.partial_record = record(error=f"{type(exc).__name__}: {exc}")
        raise
    return record(), memory
