"""Experiment configuration, dataset wiring, orchestration, persistence.

A single JSON document configures a run: dataset shape, architecture,
training method and its hyperparameters, ablation switches, seed, and
output directory. Everything written to disk is reproducible bit for
bit from (config, seed), timestamps excluded; floats round-trip exactly
because JSON carries their shortest repr.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import datasets as D
from . import gpm as G
from . import model as M
from . import trainer as TR
from .errors import ConfigError
from .losses import LossParams
from .model import Network
from .perturb import PerturbConfig
from .records import RunRecord

DATASETS = ("split_blobs", "split_rings", "idx_split")
ARCHS = ("mlp", "cnn")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs, echoed verbatim into its record."""

    dataset: str = "split_rings"
    tasks: int = 3
    classes_per_task: int = 2
    input_dim: int = 16
    train_per_class: int = 100
    val_per_class: int = 20
    test_per_class: int = 100
    arch: str = "mlp"
    hidden: tuple = (64, 64)
    image_shape: tuple = ()
    conv_channels: tuple = (8, 8)
    kernel: int = 3
    ring_scale_growth: float = 1.6
    ring_center_range: float = 0.0
    ring_outlier_fraction: float = 0.0
    idx_paths: dict = field(default_factory=dict)
    train: TR.TrainConfig = field(default_factory=TR.TrainConfig)
    out_dir: Optional[str] = None

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("tasks", "classes_per_task", "input_dim", "train_per_class",
                     "val_per_class", "test_per_class"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.classes_per_task < 2:
            raise ConfigError(f"classes_per_task must be at least 2, got {self.classes_per_task}")
        if self.arch == "mlp" and not all(isinstance(h, int) and h >= 1 for h in self.hidden):
            raise ConfigError(f"hidden must be positive integers, got {self.hidden!r}")
        if self.arch == "cnn" and len(self.image_shape) != 3:
            raise ConfigError(f"cnn needs image_shape (C, h, w), got {self.image_shape!r}")
        if self.dataset == "idx_split":
            for key in ("images", "labels"):
                if key not in self.idx_paths:
                    raise ConfigError(f"idx_split needs idx_paths[{key!r}]")
        if self.ring_scale_growth <= 0:
            raise ConfigError(
                f"ring_scale_growth must be positive, got {self.ring_scale_growth}")
        if self.ring_center_range < 0:
            raise ConfigError(
                f"ring_center_range must be nonnegative, got {self.ring_center_range}")
        if not 0.0 <= self.ring_outlier_fraction < 1.0:
            raise ConfigError(
                f"ring_outlier_fraction must lie in [0, 1), got {self.ring_outlier_fraction}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        doc["image_shape"] = list(self.image_shape)
        doc["conv_channels"] = list(self.conv_channels)
        train = doc["train"]
        train["loss"]["lambda"] = train["loss"].pop("lam")
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        train_doc = dict(doc.pop("train", {}))
        loss_doc = dict(train_doc.pop("loss", {}))
        if "lambda" in loss_doc:
            loss_doc["lam"] = loss_doc.pop("lambda")
        perturb_doc = dict(train_doc.pop("perturb", {}))
        ablation_doc = dict(train_doc.pop("ablations", {}))
        try:
            train = TR.TrainConfig(
                loss=LossParams(**loss_doc),
                perturb=PerturbConfig(**perturb_doc),
                ablations=TR.Ablations(**ablation_doc),
                **train_doc)
            cfg = cls(
                train=train,
                **{k: tuple(v) if k in ("hidden", "image_shape", "conv_channels") else v
                   for k, v in doc.items()},
            )
        except TypeError as exc:
            raise ConfigError(f"unknown or missing config field: {exc}") from exc
        cfg.validate()
        return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def gen_split_blobs(cfg: ExperimentConfig, seed: int) -> list:
    return D.split_blobs(cfg.tasks, cfg.classes_per_task, cfg.input_dim,
                         cfg.train_per_class, cfg.val_per_class, cfg.test_per_class,
                         seed=seed)


def gen_split_rings(cfg: ExperimentConfig, seed: int) -> list:
    return D.split_rings(cfg.tasks, cfg.classes_per_task, cfg.input_dim,
                         cfg.train_per_class, cfg.val_per_class, cfg.test_per_class,
                         seed=seed, scale_growth=cfg.ring_scale_growth,
                         center_range=cfg.ring_center_range,
                         outlier_fraction=cfg.ring_outlier_fraction)


def gen_stream(cfg: ExperimentConfig, seed: int) -> list:
    if cfg.dataset == "split_blobs":
        return gen_split_blobs(cfg, seed)
    if cfg.dataset == "split_rings":
        return gen_split_rings(cfg, seed)
    images, labels = D.load_idx(cfg.idx_paths["images"], cfg.idx_paths["labels"])
    return D.idx_split(images, labels, cfg.tasks, cfg.classes_per_task,
                       cfg.train_per_class, cfg.val_per_class, cfg.test_per_class,
                       seed=seed)


def build_network(cfg: ExperimentConfig, seed: int) -> Network:
    if cfg.arch == "mlp":
        return M.make_mlp(cfg.input_dim, list(cfg.hidden), seed)
    return M.make_cnn(tuple(cfg.image_shape), list(cfg.conv_channels), cfg.kernel, seed)


def run_experiment(cfg: ExperimentConfig) -> tuple[RunRecord, Network, G.ProjectionMemory]:
    """Generate the stream, build the network, train the full sequence."""
    cfg.validate()
    seed = cfg.train.seed
    stream = gen_stream(cfg, seed)
    net = build_network(cfg, seed)
    record, memory = TR.run_sequence(cfg.train, stream, net, config_echo=cfg.to_dict())
    return record, net, memory


# persistence -------------------------------------------------------------------


def _dump_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def persist_run(record: RunRecord, out_dir, net: Optional[Network] = None,
                memory: Optional[G.ProjectionMemory] = None) -> dict:
    """Write run_metrics.json, acc_matrix.csv, checkpoint and memory files.

    Returns the paths written. The checkpoint embeds the experiment
    config echo so evaluation commands can regenerate the data stream.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    metrics_path = os.path.join(out_dir, "run_metrics.json")
    _dump_json(metrics_path, record.to_dict())
    paths["metrics"] = metrics_path

    matrix_path = os.path.join(out_dir, "acc_matrix.csv")
    with open(matrix_path, "w", encoding="utf-8", newline="") as fh:
        for row in record.accuracy_matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    paths["matrix"] = matrix_path

    if net is not None:
        ckpt_path = os.path.join(out_dir, "checkpoint.json")
        _dump_json(ckpt_path, {"schema_version": 1,
                               "network": M.network_to_doc(net),
                               "experiment": record.config,
                               "method": record.method,
                               "seed": record.seed})
        paths["checkpoint"] = ckpt_path
    if memory is not None:
        mem_path = os.path.join(out_dir, "memory.json")
        _dump_json(mem_path, G.memory_to_doc(memory))
        paths["memory"] = mem_path
    return paths


def load_run(out_dir) -> RunRecord:
    with open(os.path.join(out_dir, "run_metrics.json"), "r", encoding="utf-8") as fh:
        return RunRecord.from_dict(json.load(fh))


def load_checkpoint(path) -> tuple[Network, ExperimentConfig, dict]:
    """Read a checkpoint back: network, experiment config, raw doc."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc
    net = M.network_from_doc(doc["network"])
    cfg = ExperimentConfig.from_dict(doc["experiment"])
    return net, cfg, doc


def read_acc_matrix(path) -> list:
    matrix = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                matrix.append([float(v) for v in line.split(",")])
    return matrix
