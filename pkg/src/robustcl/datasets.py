"""Task streams: synthetic generators and the IDX image loader.

A task stream is an ordered list of :class:`TaskData`, each holding
train/val/test splits with globally disjoint class ids. Labels are
stored as global ids; trainers map them to head-local indices through
``class_ids``. Generators are fully seeded so a stream is reproducible
bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class TaskData:
    """One task: class ids plus fixed train/val/test splits."""

    task_id: int
    class_ids: list
    train: tuple
    val: tuple
    test: tuple

    def local_labels(self, y) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(v)] for v in np.asarray(y).ravel()], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"label {exc} does not belong to task {self.task_id}") from exc

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)


def _split_sizes(train_per_class: int, val_per_class: int, test_per_class: int):
    for name, n in (("train_per_class", train_per_class),
                    ("val_per_class", val_per_class),
                    ("test_per_class", test_per_class)):
        if n < 1:
            raise ConfigError(f"{name} must be positive, got {n}")


def _assemble(task_id, class_ids, per_class_samples, sizes):
    splits = []
    start = 0
    for size in sizes:
        xs, ys = [], []
        for cls, samples in zip(class_ids, per_class_samples):
            xs.append(samples[start : start + size])
            ys.append(np.full(size, cls, dtype=np.int64))
        splits.append((np.concatenate(xs), np.concatenate(ys)))
        start += size
    return TaskData(task_id, list(class_ids), *splits)


def split_blobs(tasks: int, classes_per_task: int, input_dim: int,
                train_per_class: int, val_per_class: int, test_per_class: int,
                seed: int, cluster_std: float = 0.5) -> list[TaskData]:
    """Gaussian clusters with seeded means at least 4 sigma apart within a task.

    Class ids of task t cover [t * C, (t+1) * C). Means are rejection
    sampled in a fixed box; an impossible separation request fails fast.
    """
    if classes_per_task < 2:
        raise ConfigError(f"classes_per_task must be at least 2, got {classes_per_task}")
    if tasks < 1:
        raise ConfigError(f"tasks must be positive, got {tasks}")
    _split_sizes(train_per_class, val_per_class, test_per_class)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB10B)))
    box = 3.0
    min_dist = 4.0 * cluster_std
    stream = []
    total = train_per_class + val_per_class + test_per_class
    for t in range(tasks):
        means = []
        for _ in range(classes_per_task):
            for attempt in range(200):
                cand = rng.uniform(-box, box, size=input_dim)
                if all(np.linalg.norm(cand - m) >= min_dist for m in means):
                    means.append(cand)
                    break
            else:
                raise ConfigError(
                    f"could not place {classes_per_task} means {min_dist:.2f} apart "
                    f"in dimension {input_dim}")
        per_class = [mean + cluster_std * rng.standard_normal((total, input_dim))
                     for mean in means]
        class_ids = [t * classes_per_task + c for c in range(classes_per_task)]
        stream.append(_assemble(t, class_ids, per_class,
                                (train_per_class, val_per_class, test_per_class)))
    return stream


def split_rings(tasks: int, classes_per_task: int, input_dim: int,
                train_per_class: int, val_per_class: int, test_per_class: int,
                seed: int, scale_growth: float = 1.6, center_range: float = 0.0,
                outlier_fraction: float = 0.0) -> list[TaskData]:
    """Concentric annuli per class, rescaled (and optionally shifted) per task.

    Classes of a task are radius bands around a shared task center; the
    radii grow with the task index, so a plain trunk must re-tune the
    same units from task to task. Radius is not linearly separable,
    which is what makes the perturbation machinery matter.

    ``outlier_fraction`` replaces that share of each class's *training*
    radii with draws from the neighbouring class's band (labels kept),
    simulating the outlier samples robust training is meant to absorb;
    validation and test splits stay clean.
    """
    if classes_per_task < 2:
        raise ConfigError(f"classes_per_task must be at least 2, got {classes_per_task}")
    if tasks < 1:
        raise ConfigError(f"tasks must be positive, got {tasks}")
    if not 0.0 <= outlier_fraction < 1.0:
        raise ConfigError(f"outlier_fraction must lie in [0, 1), got {outlier_fraction}")
    _split_sizes(train_per_class, val_per_class, test_per_class)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x4146)))
    # outlier radii come from their own stream so the clean parts of the
    # data match the outlier-free stream draw for draw
    out_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x0077)))
    stream = []
    total = train_per_class + val_per_class + test_per_class

    def band(c, scale):
        inner = (0.6 + 0.8 * c) * scale
        return inner, inner + 0.25 * scale

    for t in range(tasks):
        scale = scale_growth ** t
        center = rng.uniform(-center_range, center_range, size=input_dim) \
            if center_range > 0 else np.zeros(input_dim)
        per_class = []
        for c in range(classes_per_task):
            lo, hi = band(c, scale)
            radii = rng.uniform(lo, hi, size=(total, 1))
            n_out = int(round(outlier_fraction * train_per_class))
            if n_out:
                other = (c + 1) % classes_per_task
                olo, ohi = band(other, scale)
                radii[:n_out, 0] = out_rng.uniform(olo, ohi, size=n_out)
            dirs = rng.standard_normal((total, input_dim))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            per_class.append(center + radii * dirs)
        class_ids = [t * classes_per_task + c for c in range(classes_per_task)]
        stream.append(_assemble(t, class_ids, per_class,
                                (train_per_class, val_per_class, test_per_class)))
    return stream


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse big-endian IDX image/label files.

    Images use magic 0x00000803 with u8 pixels scaled into [0, 1]; labels
    use magic 0x00000801. Mismatched magics and truncated payloads are
    format errors naming the offending offset or size.
    """
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError(f"{images_path}: header truncated at {len(blob)} bytes")
    magic, n, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"{images_path}: bad magic 0x{magic:08x} at byte offset 0, "
            f"expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + n * rows * cols
    if len(blob) != expected:
        raise FormatError(f"{images_path}: expected {expected} bytes, found {len(blob)}")
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, rows, cols)
    images = images.astype(np.float64) / 255.0

    with open(labels_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{labels_path}: header truncated at {len(blob)} bytes")
    magic, n_labels = struct.unpack(">II", blob[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(
            f"{labels_path}: bad magic 0x{magic:08x} at byte offset 0, "
            f"expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(blob) != 8 + n_labels:
        raise FormatError(f"{labels_path}: expected {8 + n_labels} bytes, found {len(blob)}")
    labels = np.frombuffer(blob, dtype=np.uint8, offset=8).astype(np.int64)
    if n_labels != n:
        raise FormatError(f"label count {n_labels} does not match image count {n}")
    return images, labels


def idx_split(images: np.ndarray, labels: np.ndarray, tasks: int, classes_per_task: int,
              train_per_class: int, val_per_class: int, test_per_class: int,
              seed: int) -> list[TaskData]:
    """Slice an IDX-style dataset into a class-incremental task stream."""
    _split_sizes(train_per_class, val_per_class, test_per_class)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1D8)))
    flat = images.reshape(images.shape[0], -1)
    total = train_per_class + val_per_class + test_per_class
    stream = []
    for t in range(tasks):
        class_ids = [t * classes_per_task + c for c in range(classes_per_task)]
        per_class = []
        for cls in class_ids:
            idx = np.flatnonzero(labels == cls)
            if idx.size < total:
                raise ConfigError(
                    f"class {cls} has {idx.size} samples, need {total}")
            chosen = rng.permutation(idx)[:total]
            per_class.append(flat[chosen])
        stream.append(_assemble(t, class_ids, per_class,
                                (train_per_class, val_per_class, test_per_class)))
    return stream
