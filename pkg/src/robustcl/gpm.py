"""Gradient projection memory.

Per-layer orthonormal bases spanning the core input subspaces of past
tasks. After each task, fresh training samples are pushed through the
network, the captured layer inputs form representation matrices, the
part already covered by the memory is removed, and the top singular
directions of the residual (chosen by an energy threshold) join the
basis. During training, layer gradients are projected onto the
orthogonal complement of their basis.

Dense layers contribute their raw input batch (one column per sample);
their bias units contribute a constant-one row, so the basis freezes
biases once their task is locked in. Conv layers contribute their
im2col patch matrices, and their kernel gradients are projected in the
matching (C_in k k) x C_out matrix view.

The SVD is a one-sided cyclic Jacobi: plane rotations drive the implicit
Gram matrix to diagonal form, which keeps the right singular vectors
exactly orthonormal and is plenty accurate for desk-scale matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import ConfigError, ContractError, DimensionError, ParameterError
from .model import Network

MEMORY_SCHEMA = 1
_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 60


@dataclass
class ProjectionMemory:
    """Orthonormal bases per layer plus the selection threshold.

    ``bases`` maps parameter names to (d, m) matrices with orthonormal
    columns; ``history`` records the rank added per layer per task.
    Basis width never shrinks and never exceeds the layer dimension.
    """

    eps_th: float = 0.97
    bases: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.eps_th <= 1.0:
            raise ParameterError(f"eps_th must lie in (0, 1], got {self.eps_th}")

    def width(self, name: str) -> int:
        basis = self.bases.get(name)
        return 0 if basis is None else basis.shape[1]


def svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided cyclic Jacobi SVD: a = U diag(s) V^T.

    Singular values come back descending; ties keep the original column
    order. Columns of U belonging to zero singular values are completed
    to an orthonormal set from canonical basis vectors.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"svd expects a matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ContractError("svd input contains NaN or Inf")
    m, n = a.shape
    if m < n:
        u, s, v = svd(a.T)
        return v, s, u

    work = a.copy()
    v = np.eye(n)
    scale = float(np.abs(a).max()) if a.size else 0.0
    if scale > 0.0:
        for _ in range(_JACOBI_MAX_SWEEPS):
            off = 0.0
            for p in range(n - 1):
                for q in range(p + 1, n):
                    app = float(work[:, p] @ work[:, p])
                    aqq = float(work[:, q] @ work[:, q])
                    apq = float(work[:, p] @ work[:, q])
                    if abs(apq) <= _JACOBI_TOL * np.sqrt(app * aqq) or apq == 0.0:
                        continue
                    off = max(off, abs(apq))
                    zeta = (aqq - app) / (2.0 * apq)
                    t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                    if zeta == 0.0:
                        t = 1.0
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = c * t
                    col_p = work[:, p].copy()
                    work[:, p] = c * col_p - s * work[:, q]
                    work[:, q] = s * col_p + c * work[:, q]
                    col_p = v[:, p].copy()
                    v[:, p] = c * col_p - s * v[:, q]
                    v[:, q] = s * col_p + c * v[:, q]
            if off == 0.0:
                break

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    u = np.zeros((m, n))
    tiny = max(scale, 1.0) * m * np.finfo(np.float64).eps
    filled = []
    for j in range(n):
        if sigma[j] > tiny:
            u[:, j] = work[:, j] / sigma[j]
            filled.append(j)
    # complete columns for (numerically) zero singular values
    for j in range(n):
        if sigma[j] > tiny:
            continue
        for cand in range(m):
            vec = np.zeros(m)
            vec[cand] = 1.0
            for k in filled:
                vec -= (u[:, k] @ vec) * u[:, k]
            norm = np.linalg.norm(vec)
            if norm > 0.5:
                u[:, j] = vec / norm
                filled.append(j)
                break
    return u, sigma, v


def collect_representations(net: Network, samples: np.ndarray, task: int) -> dict:
    """Representation matrix per capture layer from one forward pass.

    Dense layers yield their raw input batch transposed; conv layers
    yield their im2col patch matrices; bias units yield constant-one
    rows. Requires at least one capture layer.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 1:
        raise ContractError("collect_representations needs at least one sample")
    cap = M.forward(net, samples, task, want_capture=True)
    if not cap.reps:
        raise ConfigError("network has no capture layers; projection memory needs one")
    return cap.reps


def residual(r: np.ndarray, basis) -> np.ndarray:
    """Remove the part of R already spanned by the basis: R - M M^T R."""
    r = np.asarray(r, dtype=np.float64)
    if basis is None or (hasattr(basis, "size") and basis.size == 0):
        return r.copy()
    basis = np.asarray(basis, dtype=np.float64)
    if basis.shape[0] != r.shape[0]:
        raise DimensionError(
            f"basis rows {basis.shape[0]} do not match representation rows {r.shape[0]}")
    return r - basis @ (basis.T @ r)


def select_k(r_hat: np.ndarray, r: np.ndarray, basis, eps_th: float) -> int:
    """Smallest k whose retained energy reaches the threshold.

    Criterion: ||M M^T R||_F^2 + sum_{i<=k} sigma_i(R_hat)^2 >=
    eps_th ||R||_F^2, with k = 0 when the memory term alone suffices.
    """
    if not 0.0 < eps_th <= 1.0:
        raise ParameterError(f"eps_th must lie in (0, 1], got {eps_th}")
    r = np.asarray(r, dtype=np.float64)
    total = float((r * r).sum())
    if basis is None or (hasattr(basis, "size") and basis.size == 0):
        base = 0.0
    else:
        basis = np.asarray(basis, dtype=np.float64)
        proj = basis.T @ r
        base = float((proj * proj).sum())
    _, sigma, _ = svd(np.asarray(r_hat, dtype=np.float64))
    need = eps_th * total
    acc = base
    k = 0
    while acc < need and k < sigma.size:
        acc += float(sigma[k] ** 2)
        k += 1
    return k


def update_memory(memory: ProjectionMemory, layer: str, u: np.ndarray, k: int) -> None:
    """Append the first k left singular vectors to a layer's basis.

    The combined basis is re-orthonormalized with modified Gram-Schmidt
    so the orthonormality invariant survives float drift; columns that
    collapse during re-orthonormalization are dropped.
    """
    u = np.asarray(u, dtype=np.float64)
    if k < 0 or k > u.shape[1]:
        raise ParameterError(f"k={k} out of range for {u.shape[1]} singular vectors")
    if k == 0:
        return
    existing = memory.bases.get(layer)
    width = 0 if existing is None else existing.shape[1]
    if width + k > u.shape[0]:
        raise DimensionError(
            f"appending {k} directions to width {width} exceeds layer dimension {u.shape[0]}")
    if existing is None:
        memory.bases[layer] = u[:, :k].copy()
        return
    combined = np.concatenate([existing, u[:, :k]], axis=1)
    # modified Gram-Schmidt, two passes for stability
    cols = []
    for j in range(combined.shape[1]):
        vec = combined[:, j].copy()
        for _ in range(2):
            for c in cols:
                vec -= (c @ vec) * c
        norm = np.linalg.norm(vec)
        if norm < 1e-10:
            continue
        cols.append(vec / norm)
    memory.bases[layer] = np.stack(cols, axis=1)


def project_gradient(grads: dict, memory: ProjectionMemory) -> dict:
    """g_hat = g - M M^T g per layer with a basis; others pass through.

    Conv kernel gradients are projected in their (C_in k k) x C_out view.
    """
    out = {}
    for name, g in grads.items():
        basis = memory.bases.get(name)
        if basis is None:
            out[name] = g
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.ndim == 4:  # conv kernel: (Co, Ci, k, k) -> (Ci k k, Co)
            c_out = g.shape[0]
            mat = g.reshape(c_out, -1).T
            if mat.shape[0] != basis.shape[0]:
                raise DimensionError(
                    f"{name}: gradient view rows {mat.shape[0]} vs basis rows {basis.shape[0]}")
            proj = mat - basis @ (basis.T @ mat)
            out[name] = proj.T.reshape(g.shape)
        elif g.ndim == 2:
            if g.shape[0] != basis.shape[0]:
                raise DimensionError(
                    f"{name}: gradient rows {g.shape[0]} vs basis rows {basis.shape[0]}")
            out[name] = g - basis @ (basis.T @ g)
        elif g.ndim == 1:  # bias: constant-input unit, basis is 1 x m
            row = g.reshape(1, -1)
            if basis.shape[0] != 1:
                raise DimensionError(f"{name}: bias expects a 1-row basis, got {basis.shape}")
            out[name] = (row - basis @ (basis.T @ row)).reshape(g.shape)
        else:
            raise DimensionError(f"{name}: cannot project gradient of shape {g.shape}")
    return out


def update_from_task(memory: ProjectionMemory, net: Network, samples: np.ndarray,
                     task: int) -> dict:
    """Run the full memory update for one finished task.

    Collect representations, remove what the memory already spans, take
    the SVD of the residual, pick the threshold rank, append. Returns
    the selected rank per layer and appends it to the history.
    """
    reps = collect_representations(net, samples, task)
    ranks = {}
    for layer, r in reps.items():
        basis = memory.bases.get(layer)
        r_hat = residual(r, basis)
        u, _, _ = svd(r_hat)
        k = select_k(r_hat, r, basis, memory.eps_th)
        update_memory(memory, layer, u, k)
        ranks[layer] = k
    memory.history.append({"task": task, "ranks": ranks})
    return ranks


def orthonormality_defect(memory: ProjectionMemory) -> float:
    worst = 0.0
    for basis in memory.bases.values():
        gram = basis.T @ basis
        worst = max(worst, float(np.abs(gram - np.eye(gram.shape[0])).max()))
    return worst


# persistence -----------------------------------------------------------------


def memory_to_doc(memory: ProjectionMemory) -> dict:
    return {
        "schema_version": MEMORY_SCHEMA,
        "eps_th": memory.eps_th,
        "bases": {name: {"shape": list(b.shape), "data": b.ravel().tolist()}
                  for name, b in sorted(memory.bases.items())},
        "history": memory.history,
    }


def memory_from_doc(doc: dict) -> ProjectionMemory:
    if doc.get("schema_version") != MEMORY_SCHEMA:
        raise ContractError(f"unsupported memory schema {doc.get('schema_version')!r}")
    memory = ProjectionMemory(eps_th=doc["eps_th"])
    for name, entry in doc["bases"].items():
        memory.bases[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    memory.history = list(doc["history"])
    return memory


def save_memory(memory: ProjectionMemory, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(memory_to_doc(memory), fh, sort_keys=True)


def load_memory(path) -> ProjectionMemory:
    with open(path, "r", encoding="utf-8") as fh:
        return memory_from_doc(json.load(fh))
