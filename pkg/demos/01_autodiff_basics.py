"""Tour of the tensor engine: tapes, primitives, and gradient checking.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from robustcl import tensor as T
from robustcl.tensor import GradTape, Tensor, backward, finite_diff_grad

rng = np.random.default_rng(0)

# --- a scalar chain ---------------------------------------------------------
tape = GradTape()
x = Tensor(3.0, requires_grad=True, tape=tape)
loss = x * x
backward(loss, tape)
print(f"d(x^2)/dx at x=3: {x.grad}  (expect 6)")

# --- gradients accumulate until reset ---------------------------------------
backward(loss, tape)
print(f"after a second backward: {x.grad}  (expect 12)")
x.reset_grad()

# --- a two-layer network against the finite-difference oracle ----------------
w1_0 = rng.normal(size=(4, 8))
w2_0 = rng.normal(size=(8, 3))
batch = rng.normal(size=(16, 4))
targets = rng.normal(size=(16, 3))

tape = GradTape()
w1 = Tensor(w1_0, requires_grad=True, tape=tape)
w2 = Tensor(w2_0, requires_grad=True, tape=tape)
hidden = T.relu(T.matmul(Tensor(batch), w1))
output = T.matmul(hidden, w2)
backward(T.mean(T.mul(T.sub(output, Tensor(targets)), T.sub(output, Tensor(targets)))), tape)


def mse(w1_flat):
    h = np.maximum(batch @ w1_flat.reshape(4, 8), 0.0)
    return float(((h @ w2_0 - targets) ** 2).mean())


fd = finite_diff_grad(mse, w1_0.ravel()).reshape(4, 8)
rel = np.linalg.norm(w1.grad - fd) / np.linalg.norm(fd)
print(f"two-layer MSE gradient vs central differences: rel err {rel:.2e}")

# --- convolution as matrix multiplication -----------------------------------
image = rng.normal(size=(2, 6, 6))
bank = rng.normal(size=(4, 2, 3, 3))
out = T.conv2d_via_im2col(Tensor(image), Tensor(bank), stride=1, pad=1)
print(f"conv2d via im2col: input (2,6,6) + 4 kernels 3x3/pad 1 -> output {out.shape}")

# --- hypersphere features ----------------------------------------------------
raw = rng.normal(size=(5, 3))
unit = T.l2_normalize_rows(Tensor(raw))
print("row norms after normalization:", np.linalg.norm(unit.data, axis=1))
