"""Multi-head layered networks with per-layer input capture.

A :class:`Network` is plain data: a list of layer specs, a dict of
float64 parameter arrays, and one dense output head per task id. The
forward pass runs on the tensor engine; training code binds parameters
as gradient leaves on a tape, inference binds them as constants. Layer
inputs captured during a forward pass feed the projection-memory
representation matrices: dense layers contribute their raw input batch
(one column per sample) plus a constant-one row for the bias unit, conv
layers contribute their im2col patch matrix.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError, TaskLookupError
from .tensor import GradTape, Tensor

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class LayerSpec:
    """One trunk layer: dense, conv, relu, or dropout.

    ``capture`` marks layers whose inputs feed the projection memory.
    """

    kind: str
    fan_in: int = 0
    fan_out: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    rate: float = 0.0
    capture: bool = False


def dense(fan_in: int, fan_out: int, capture: bool = True) -> LayerSpec:
    return LayerSpec(kind="dense", fan_in=fan_in, fan_out=fan_out, capture=capture)


def conv(in_channels: int, out_channels: int, kernel: int, stride: int = 1,
         pad: int = 0, capture: bool = True) -> LayerSpec:
    return LayerSpec(kind="conv", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, pad=pad, capture=capture)


def relu_layer() -> LayerSpec:
    return LayerSpec(kind="relu")


def dropout_layer(rate: float) -> LayerSpec:
    return LayerSpec(kind="dropout", rate=rate)


def mlp_specs(input_dim: int, hidden: Sequence[int]) -> list[LayerSpec]:
    specs = []
    prev = input_dim
    for width in hidden:
        specs.append(dense(prev, width))
        specs.append(relu_layer())
        prev = width
    return specs


def cnn_specs(in_channels: int, channels: Sequence[int] = (8, 8), kernel: int = 3) -> list[LayerSpec]:
    specs = []
    prev = in_channels
    for ch in channels:
        specs.append(conv(prev, ch, kernel, stride=1, pad=1))
        specs.append(relu_layer())
        prev = ch
    return specs


@dataclass
class ForwardCapture:
    """Outputs of one forward pass.

    ``logits`` come from the requested task head, ``penultimate`` is the
    head's raw input batch, ``features`` are the L2-normalized
    penultimate activations (None, with the degenerate flag set, when
    some row of the penultimate batch has zero norm), and ``reps`` maps
    capture-layer parameter names to representation matrices with one
    column per captured input.
    """

    logits: Tensor
    features: Optional[Tensor]
    penultimate: Optional[Tensor] = None
    reps: dict = field(default_factory=dict)
    degenerate_features: bool = False


class Network:
    """Layered parametric model with disjoint per-task output heads.

    Parameter arrays are keyed ``layer{i}.weight`` / ``layer{i}.bias``
    (``.kernel`` for conv layers) and ``head{t}.weight`` / ``head{t}.bias``.
    The documented flattening order is: trunk layers in definition order,
    then heads sorted by task id; within a layer weight/kernel precedes
    bias. Weights start uniform in +-sqrt(6 / (fan_in + fan_out)) from the
    seeded generator; biases start at zero. A Network is single-writer;
    forward passes never mutate it.
    """

    def __init__(self, specs: Sequence[LayerSpec], rng_seed: int,
                 input_shape: Optional[Sequence[int]] = None, _init: bool = True):
        self.specs = list(specs)
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self.params: dict[str, np.ndarray] = {}
        self.heads: dict[int, int] = {}
        self.input_shape = tuple(input_shape) if input_shape is not None else self._infer_input_shape()
        self.feature_dim = self._trace_shapes()
        if _init:
            for i, spec in enumerate(self.specs):
                if spec.kind == "dense":
                    self.params[f"layer{i}.weight"] = self._glorot(spec.fan_in, spec.fan_out,
                                                                   (spec.fan_in, spec.fan_out))
                    self.params[f"layer{i}.bias"] = np.zeros(spec.fan_out)
                elif spec.kind == "conv":
                    k = spec.kernel
                    shape = (spec.out_channels, spec.in_channels, k, k)
                    self.params[f"layer{i}.kernel"] = self._glorot(
                        spec.in_channels * k * k, spec.out_channels * k * k, shape)
                    self.params[f"layer{i}.bias"] = np.zeros(spec.out_channels)

    def _glorot(self, fan_in: int, fan_out: int, shape) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._rng.uniform(-limit, limit, size=shape)

    def _infer_input_shape(self) -> tuple:
        for spec in self.specs:
            if spec.kind == "dense":
                return (spec.fan_in,)
            if spec.kind == "conv":
                raise ContractError("conv networks need an explicit input_shape")
        raise ContractError("network has no parametric layer")

    def _trace_shapes(self) -> int:
        """Walk the specs with the declared input shape; return head fan-in."""
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            if spec.kind == "dense":
                flat = int(np.prod(shape))
                if flat != spec.fan_in:
                    raise DimensionError(
                        f"layer {i} expects fan_in {spec.fan_in} but receives {flat}")
                shape = (spec.fan_out,)
            elif spec.kind == "conv":
                if len(shape) != 3 or shape[0] != spec.in_channels:
                    raise DimensionError(
                        f"layer {i} expects {spec.in_channels} channels, input shape {shape}")
                h_out, w_out = T.conv_output_size(shape[1], shape[2], spec.kernel,
                                                  spec.stride, spec.pad)
                if h_out < 1 or w_out < 1:
                    raise DimensionError(f"layer {i} output collapses to {h_out}x{w_out}")
                shape = (spec.out_channels, h_out, w_out)
        return int(np.prod(shape))

    # heads ---------------------------------------------------------------
    def add_head(self, task: int, n_classes: int) -> None:
        if task in self.heads:
            raise ContractError(f"head for task {task} already exists")
        if n_classes < 1:
            raise ParameterError(f"a head needs at least one class, got {n_classes}")
        self.heads[task] = int(n_classes)
        self.params[f"head{task}.weight"] = self._glorot(
            self.feature_dim, n_classes, (self.feature_dim, n_classes))
        self.params[f"head{task}.bias"] = np.zeros(n_classes)

    def head_tasks(self) -> list[int]:
        return sorted(self.heads)

    # parameter bookkeeping -------------------------------------------------
    def trunk_param_names(self) -> list[str]:
        names = []
        for i, spec in enumerate(self.specs):
            if spec.kind == "dense":
                names += [f"layer{i}.weight", f"layer{i}.bias"]
            elif spec.kind == "conv":
                names += [f"layer{i}.kernel", f"layer{i}.bias"]
        return names

    def param_names(self, task: Optional[int] = None) -> list[str]:
        """Trainable parameter names; with ``task``, trunk + that head only."""
        names = self.trunk_param_names()
        if task is None:
            for t in self.head_tasks():
                names += [f"head{t}.weight", f"head{t}.bias"]
        else:
            if task not in self.heads:
                raise TaskLookupError(f"no head for task {task}")
            names += [f"head{task}.weight", f"head{task}.bias"]
        return names

    def copy(self) -> "Network":
        return copy.deepcopy(self)


# forward ------------------------------------------------------------------


def bind_parameters(net: Network, tape: GradTape, task: Optional[int] = None,
                    at: Optional[dict] = None) -> dict[str, Tensor]:
    """Create gradient-leaf tensors for trunk + head parameters.

    ``at`` optionally supplies replacement arrays (e.g. perturbed
    weights); the network itself is never modified.
    """
    bound = {}
    for name in net.param_names(task):
        data = at[name] if at is not None and name in at else net.params[name]
        bound[name] = Tensor(data, requires_grad=True, tape=tape)
    return bound


def forward(net: Network, batch, task: int, want_capture: bool = False,
            params: Optional[dict] = None, dropout_rng=None) -> ForwardCapture:
    """Run the trunk and one task head over a batch.

    ``params`` maps parameter names to already-bound tensors; names not
    present fall back to network constants. Dropout layers are identity
    unless a generator is supplied (training mode).
    """
    if task not in net.heads:
        raise TaskLookupError(f"no head for task {task}")
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float64))
    if x.shape[1:] != net.input_shape:
        raise DimensionError(
            f"batch shape {x.shape} does not match input shape {net.input_shape}")
    n = x.shape[0]

    def p(name):
        if params is not None and name in params:
            return params[name]
        return Tensor(net.params[name])

    reps: dict[str, np.ndarray] = {}
    for i, spec in enumerate(net.specs):
        if spec.kind == "dense":
            if x.ndim > 2:
                x = T.reshape(x, (n, int(np.prod(x.shape[1:]))))
            if spec.capture and want_capture:
                reps[f"layer{i}.weight"] = x.data.T.copy()
                reps[f"layer{i}.bias"] = np.ones((1, n))
            x = T.add(T.matmul(x, p(f"layer{i}.weight")), p(f"layer{i}.bias"))
        elif spec.kind == "conv":
            x, patches = T.conv2d_batch(x, p(f"layer{i}.kernel"), p(f"layer{i}.bias"),
                                        spec.stride, spec.pad)
            if spec.capture and want_capture:
                reps[f"layer{i}.kernel"] = patches.data.copy()
                reps[f"layer{i}.bias"] = np.ones((1, patches.data.shape[1]))
        elif spec.kind == "relu":
            x = T.relu(x)
        elif spec.kind == "dropout":
            if dropout_rng is not None:
                x = T.dropout(x, spec.rate, dropout_rng)
        else:
            raise ContractError(f"unknown layer kind {spec.kind!r}")

    if x.ndim > 2:
        x = T.reshape(x, (n, int(np.prod(x.shape[1:]))))
    logits = T.add(T.matmul(x, p(f"head{task}.weight")), p(f"head{task}.bias"))
    norms = np.linalg.norm(x.data, axis=1)
    if norms.min() <= 1e-12:
        return ForwardCapture(logits, None, x, reps, degenerate_features=True)
    return ForwardCapture(logits, T.l2_normalize_rows(x), x, reps)


# updates and reshaping ------------------------------------------------------


def apply_update(net: Network, grads: dict, lr: float) -> None:
    """theta <- theta - lr * grad for every parameter.

    ``grads`` must be keyed identically to the network's parameters.
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be nonnegative, got {lr}")
    missing = set(net.params) - set(grads)
    extra = set(grads) - set(net.params)
    if missing or extra:
        raise ContractError(
            f"gradient keys disagree with parameters; missing={sorted(missing)}, "
            f"extra={sorted(extra)}")
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != net.params[name].shape:
            raise DimensionError(
                f"gradient for {name} has shape {g.shape}, expected {net.params[name].shape}")
        net.params[name] = net.params[name] - lr * g


def zero_gradients(net: Network) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in net.params.items()}


def reparameterize(net: Network, phi: dict, seed: int) -> Network:
    """Return a copy with theta + eps * phi, eps ~ N(0,1) per scalar.

    The normal draws come from one seeded generator, consumed in the
    documented parameter order; the original network is untouched.
    """
    names = net.param_names()
    if set(phi) != set(names):
        raise DimensionError(
            f"phi keys disagree with parameters: missing={sorted(set(names) - set(phi))}, "
            f"extra={sorted(set(phi) - set(names))}")
    rng = np.random.default_rng(seed)
    out = net.copy()
    for name in names:
        scale = np.asarray(phi[name], dtype=np.float64)
        if scale.shape != net.params[name].shape:
            raise DimensionError(
                f"phi for {name} has shape {scale.shape}, expected {net.params[name].shape}")
        eps = rng.standard_normal(net.params[name].shape)
        out.params[name] = net.params[name] + eps * scale
    return out


def flatten_params(net: Network) -> np.ndarray:
    """Concatenate all parameters into one vector in the documented order."""
    return np.concatenate([net.params[name].ravel() for name in net.param_names()])


def unflatten_params(net: Network, flat: np.ndarray) -> None:
    """Inverse of :func:`flatten_params`; writes into the network."""
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(net.params[name].size for name in net.param_names())
    if flat.shape != (total,):
        raise DimensionError(f"flat vector has shape {flat.shape}, expected ({total},)")
    offset = 0
    for name in net.param_names():
        arr = net.params[name]
        net.params[name] = flat[offset : offset + arr.size].reshape(arr.shape).copy()
        offset += arr.size


# checkpointing ---------------------------------------------------------------


def network_to_doc(net: Network) -> dict:
    return {
        "schema_version": CHECKPOINT_SCHEMA,
        "rng_seed": net.rng_seed,
        "input_shape": list(net.input_shape),
        "specs": [asdict(s) for s in net.specs],
        "heads": {str(t): n for t, n in sorted(net.heads.items())},
        "params": {name: {"shape": list(net.params[name].shape),
                          "data": net.params[name].ravel().tolist()}
                   for name in net.param_names()},
    }


def network_from_doc(doc: dict) -> Network:
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ContractError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    specs = [LayerSpec(**s) for s in doc["specs"]]
    net = Network(specs, doc["rng_seed"], input_shape=doc["input_shape"], _init=False)
    net.heads = {int(t): int(n) for t, n in doc["heads"].items()}
    for name, entry in doc["params"].items():
        net.params[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return net


def save_network(net: Network, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_doc(net), fh, sort_keys=True)


def load_network(path) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        return network_from_doc(json.load(fh))


def make_mlp(input_dim: int, hidden: Sequence[int], seed: int) -> Network:
    return Network(mlp_specs(input_dim, hidden), seed)


def make_cnn(input_shape: Sequence[int], channels: Sequence[int], kernel: int, seed: int) -> Network:
    return Network(cnn_specs(input_shape[0], channels, kernel), seed, input_shape=input_shape)
