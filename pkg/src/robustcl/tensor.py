"""Dense float64 tensors with taped reverse-mode differentiation.

The engine is intentionally small: exactly the primitives needed to
differentiate every objective in this package with respect to weights,
inputs, and the scalar mixing coefficient. Storage is row-major numpy
float64 throughout. A :class:`GradTape` records primitive applications
in execution order (so it is topologically sorted by construction) and
:func:`backward` replays it once in reverse, accumulating into the
``grad`` slot of every ``requires_grad`` tensor it reaches. Gradients
accumulate across calls; the caller resets them.

All operations are pure functions of their inputs plus the tape they
append to, so concurrent use is safe as long as tapes are disjoint.
Matrix products run single-threaded through numpy; no internal
parallelism is introduced by this module.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateFeatureError,
    DimensionError,
    ParameterError,
)

Array = np.ndarray


class GradTape:
    """Execution-ordered record of primitive applications.

    Each entry holds the output tensor, the input tensors, and the
    backward rule that maps the output gradient to input gradients.
    Entries are appended as primitives run, so every entry's inputs
    precede it and a single backward pass visits each entry exactly
    once. Tapes are cheap; create one per training step.
    """

    __slots__ = ("_entries",)

    def __init__(self) -> None:
        self._entries: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: "Tensor", inputs: tuple["Tensor", ...], rule: Callable) -> None:
        self._entries.append((out, inputs, rule))


class Tensor:
    """A dense float64 array with an optional gradient slot.

    A tensor that ``requires_grad`` must be created on a tape; results
    of primitives inherit the tape of their inputs. Tensors without
    gradients are plain constants and carry no tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, tape: Optional[GradTape] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self.tape = tape if self.requires_grad else None
        if self.requires_grad and tape is None:
            raise ContractError("a requires_grad tensor must be created on a GradTape")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def reset_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _output(data: Array, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.requires_grad:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("operands were recorded on different tapes")
    if tape is None:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, tape=tape)
    tape._record(out, inputs, rule)
    return out


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# primitives -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ash, bsh = a.data.shape, b.data.shape

    def rule(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _output(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ash, bsh = a.data.shape, b.data.shape

    def rule(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _output(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _output(ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _output(ad / bd, (a, b), rule)


def neg(a) -> Tensor:
    a = _lift(a)

    def rule(g):
        return (-g,)

    return _output(-a.data, (a,), rule)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul needs 2-d operands with agreeing inner dimensions, "
            f"got {a.data.shape} x {b.data.shape}"
        )
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _output(ad @ bd, (a, b), rule)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.data.shape}")

    def rule(g):
        return (g.T,)

    return _output(a.data.T.copy(), (a,), rule)


def permute(a, axes: Sequence[int]) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inverse),)

    return _output(np.transpose(a.data, axes).copy(), (a,), rule)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.data.shape

    def rule(g):
        return (g.reshape(old),)

    return _output(a.data.reshape(shape).copy(), (a,), rule)


def relu(a) -> Tensor:
    """Elementwise max(0, x); gradient passes where x > 0, is zero elsewhere."""
    a = _lift(a)
    mask = a.data > 0

    def rule(g):
        return (g * mask,)

    return _output(np.maximum(a.data, 0.0), (a,), rule)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def rule(g):
        return (g * out_data,)

    return _output(out_data, (a,), rule)


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data

    def rule(g):
        return (g / ad,)

    return _output(np.log(ad), (a,), rule)


def power(a, p: float) -> Tensor:
    """Elementwise x**p for a real exponent.

    For p < 1 the derivative at x == 0 does not exist; the subgradient 0
    is used there so exact zeros (e.g. coincident feature pairs) do not
    poison a backward pass.
    """
    a = _lift(a)
    p = float(p)
    ad = a.data

    def rule(g):
        base = np.where((ad == 0.0) & (p < 1.0), 0.0, p * np.power(ad, p - 1.0))
        return (g * base,)

    return _output(np.power(ad, p), (a,), rule)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    shape = a.data.shape

    def rule(g):
        if axis is None and not keepdims:
            return (np.full(shape, g, dtype=np.float64),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return _output(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def mean(a) -> Tensor:
    a = _lift(a)
    shape = a.data.shape
    n = a.data.size

    def rule(g):
        return (np.full(shape, g / n, dtype=np.float64),)

    return _output(np.asarray(a.data.mean()), (a,), rule)


def gather(a, flat_indices: Array) -> Tensor:
    """out[i...] = a.flat[flat_indices[i...]]; backward scatter-adds."""
    a = _lift(a)
    idx = np.asarray(flat_indices)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.size):
        raise DimensionError(
            f"gather indices out of range for tensor of size {a.data.size}"
        )
    shape = a.data.shape

    def rule(g):
        buf = np.zeros(a.data.size, dtype=np.float64)
        np.add.at(buf, idx.ravel(), g.ravel())
        return (buf.reshape(shape),)

    return _output(a.data.ravel()[idx], (a,), rule)


def pad_hw(a, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on each side."""
    a = _lift(a)
    if pad < 0:
        raise ParameterError(f"pad must be nonnegative, got {pad}")
    if pad == 0:
        return a
    nd = a.data.ndim
    widths = [(0, 0)] * (nd - 2) + [(pad, pad), (pad, pad)]
    sl = tuple([slice(None)] * (nd - 2) + [slice(pad, -pad), slice(pad, -pad)])

    def rule(g):
        return (g[sl].copy(),)

    return _output(np.pad(a.data, widths), (a,), rule)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a seeded mask. rate == 0 is the identity."""
    a = _lift(a)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)

    def rule(g):
        return (g * mask,)

    return _output(a.data * mask, (a,), rule)


def l2_normalize_rows(a) -> Tensor:
    """Scale each row of a matrix to unit L2 norm, differentiably."""
    a = _lift(a)
    if a.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got shape {a.data.shape}")
    sq = tensor_sum(mul(a, a), axis=1, keepdims=True)
    norms = np.sqrt(sq.data)
    if norms.min() <= 1e-12:
        row = int(np.argmin(norms))
        raise DegenerateFeatureError(
            f"row {row} has norm {norms.min():.3e}, cannot normalize onto the sphere"
        )
    return div(a, power(sq, 0.5))


# convolution as matrix multiplication ------------------------------------


def conv_output_size(h: int, w: int, kernel: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - kernel) // stride + 1, (w + 2 * pad - kernel) // stride + 1


def im2col_indices(
    channels: int, height: int, width: int, kernel: int, stride: int, pad: int
) -> tuple[Array, int, int]:
    """Flat indices of every sliding patch in the zero-padded image.

    Returns ``(idx, h_out, w_out)`` where ``idx`` has shape
    ``(channels * kernel**2, h_out * w_out)`` and indexes the flattened
    padded array of shape ``(channels, height + 2 pad, width + 2 pad)``.
    """
    hp, wp = height + 2 * pad, width + 2 * pad
    h_out, w_out = conv_output_size(height, width, kernel, stride, pad)
    c_idx = np.repeat(np.arange(channels), kernel * kernel)
    ki = np.tile(np.repeat(np.arange(kernel), kernel), channels)
    kj = np.tile(np.arange(kernel), channels * kernel)
    base = c_idx * hp * wp + ki * wp + kj
    oi = np.repeat(np.arange(h_out), w_out) * stride
    oj = np.tile(np.arange(w_out), h_out) * stride
    offsets = oi * wp + oj
    return base[:, None] + offsets[None, :], h_out, w_out


def _check_conv_args(c_in, h, w, kernel, stride, pad):
    if stride < 1:
        raise ParameterError(f"stride must be positive, got {stride}")
    if kernel > h + 2 * pad or kernel > w + 2 * pad:
        raise DimensionError(
            f"kernel {kernel} exceeds padded input {h + 2 * pad}x{w + 2 * pad}"
        )


def conv2d_via_im2col(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate one image with a kernel bank through im2col + matmul.

    ``x`` has shape (C_in, h, w) and ``kernel`` (C_out, C_in, k, k); the
    kernel is viewed as a (C_in k k) x C_out matrix, the padded image as a
    (C_in k k) x (h_out w_out) patch matrix, and their product reshaped to
    (C_out, h_out, w_out). Equals direct sliding-window cross-correlation
    with zero padding.
    """
    x, kernel = _lift(x), _lift(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects (C,h,w) input and (Co,Ci,k,k) kernel, "
            f"got {x.data.shape} and {kernel.data.shape}"
        )
    c_out, c_in, k, k2 = kernel.data.shape
    if k != k2 or c_in != x.data.shape[0]:
        raise DimensionError(
            f"kernel {kernel.data.shape} does not match input {x.data.shape}"
        )
    _, h, w = x.data.shape
    _check_conv_args(c_in, h, w, k, stride, pad)
    xp = pad_hw(x, pad)
    idx, h_out, w_out = im2col_indices(c_in, h, w, k, stride, pad)
    patches = gather(xp, idx)
    wmat = reshape(kernel, (c_out, c_in * k * k))
    out = matmul(wmat, patches)
    return reshape(out, (c_out, h_out, w_out))


def conv2d_batch(x, kernel, bias=None, stride: int = 1, pad: int = 0):
    """Batched im2col convolution.

    ``x`` has shape (n, C_in, h, w). Returns ``(out, patches)`` where out
    has shape (n, C_out, h_out, w_out) and ``patches`` is the combined
    (C_in k k) x (n h_out w_out) patch matrix whose columns feed the
    projection-memory representation of this layer.
    """
    x, kernel = _lift(x), _lift(kernel)
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d_batch expects (n,C,h,w), got {x.data.shape}")
    n, c_in, h, w = x.data.shape
    c_out, c_k, k, _ = kernel.data.shape
    if c_k != c_in:
        raise DimensionError(
            f"kernel {kernel.data.shape} does not match input {x.data.shape}"
        )
    _check_conv_args(c_in, h, w, k, stride, pad)
    xp = pad_hw(x, pad)
    idx1, h_out, w_out = im2col_indices(c_in, h, w, k, stride, pad)
    span = c_in * (h + 2 * pad) * (w + 2 * pad)
    idx = (np.arange(n) * span)[None, :, None] + idx1[:, None, :]
    patches = gather(xp, idx.reshape(idx1.shape[0], n * h_out * w_out))
    wmat = reshape(kernel, (c_out, c_in * k * k))
    out = matmul(wmat, patches)
    out = permute(reshape(out, (c_out, n, h_out, w_out)), (1, 0, 2, 3))
    if bias is not None:
        out = add(out, reshape(_lift(bias), (1, c_out, 1, 1)))
    return out, patches


# reverse pass -------------------------------------------------------------


def backward(loss: Tensor, tape: GradTape) -> None:
    """Propagate d(loss)/d(node) through the tape, accumulating into grads.

    ``loss`` must be a scalar attached to ``tape``. Each tape entry is
    visited exactly once, in reverse execution order; gradients add into
    ``grad`` so repeated calls accumulate until the caller resets.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad or loss.tape is not tape:
        raise ContractError("loss is not attached to the given tape")
    flows: dict[Tensor, Array] = {loss: np.ones((), dtype=np.float64)}
    for out, inputs, rule in reversed(tape._entries):
        g_out = flows.pop(out, None)
        if g_out is None:
            continue
        out.grad = g_out if out.grad is None else out.grad + g_out
        for t, g in zip(inputs, rule(g_out)):
            if g is None or not t.requires_grad:
                continue
            held = flows.get(t)
            flows[t] = g if held is None else held + g
    for t, g in flows.items():
        t.grad = g if t.grad is None else t.grad + g


def finite_diff_grad(f: Callable[[Array], float], x, h: float = 1e-5) -> Array:
    """Central-difference gradient estimate of a scalar function.

    ``f`` is evaluated on raw float64 arrays; this is the independent
    oracle used by the gradient-check tests and never touches a tape.
    """
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        flat[i] = (float(f(xp)) - float(f(xm))) / (2.0 * h)
    return grad
