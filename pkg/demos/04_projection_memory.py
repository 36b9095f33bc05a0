"""Gradient projection memory on a toy network: grow bases, project, audit.

Run:  python3 demos/04_projection_memory.py
"""

import numpy as np

from robustcl import datasets as D
from robustcl import gpm as G
from robustcl import model as M

rng = np.random.default_rng(3)

# --- an SVD you can read ------------------------------------------------------
a = rng.normal(size=(5, 3))
u, s, v = G.svd(a)
print("singular values:", np.round(s, 4))
print("reconstruction error:", float(np.linalg.norm(a - u @ np.diag(s) @ v.T)))

# --- rank selection by retained energy -----------------------------------------
r = np.diag([3.0, 2.0, 0.5, 0.1])
for eps_th in (0.5, 0.9, 0.99):
    print(f"eps_th={eps_th}: keep k={G.select_k(r, r, None, eps_th)} directions")

# --- a two-task memory ----------------------------------------------------------
stream = D.split_blobs(2, 2, 6, 30, 5, 10, seed=0)
net = M.make_mlp(6, [12], seed=0)
memory = G.ProjectionMemory(eps_th=0.95)
for task in stream:
    net.add_head(task.task_id, 2)
    ranks = G.update_from_task(memory, net, task.train[0][:24], task.task_id)
    print(f"after task {task.task_id}: selected ranks {ranks}")
print("orthonormality defect:", G.orthonormality_defect(memory))

# --- projection removes the protected component ----------------------------------
grads = {name: rng.normal(size=p.shape) for name, p in net.params.items()}
projected = G.project_gradient(grads, memory)
for name, basis in memory.bases.items():
    g = projected[name]
    mat = g.reshape(1, -1) if g.ndim == 1 else g
    leak = float(np.abs(basis.T @ mat).max())
    shrink = np.linalg.norm(projected[name]) / np.linalg.norm(grads[name])
    print(f"{name}: leak into memory {leak:.2e}, norm kept {shrink:.2f}")
