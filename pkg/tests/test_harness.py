"""Harness tests: config validation, run orchestration, persistence round trips."""

import json

import numpy as np
import pytest

from robustcl.errors import ConfigError
from robustcl import harness as H
from robustcl import trainer as TR
from robustcl.records import RunRecord


def tiny_config(**overrides):
    doc = {
        "dataset": "split_blobs",
        "tasks": 2,
        "classes_per_task": 2,
        "input_dim": 5,
        "train_per_class": 20,
        "val_per_class": 5,
        "test_per_class": 10,
        "arch": "mlp",
        "hidden": [12],
        "train": {
            "method": "gpm",
            "epochs": 2,
            "batch_size": 10,
            "lr": 0.05,
            "seed": 7,
            "loss": {"tau": 2.0, "align_exponent": 2.0, "lambda": 0.1, "kappa": 0.1},
            "perturb": {"rho_data": 0.05, "rho_weight": 0.05, "mixup_alpha": 20.0,
                        "phi_range": 1e-4, "phi_epochs": 2},
            "eps_th": 0.95,
            "gpm_samples": 16,
            "ablations": {"disable_ua": False, "disable_phi": False,
                          "ua_in_gradient_only": False},
        },
    }
    doc.update(overrides)
    return doc


class TestConfig:
    def test_round_trip(self):
        cfg = H.ExperimentConfig.from_dict(tiny_config())
        again = H.ExperimentConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_lambda_key_mapping(self):
        cfg = H.ExperimentConfig.from_dict(tiny_config())
        assert cfg.train.loss.lam == 0.1
        assert cfg.to_dict()["train"]["loss"]["lambda"] == 0.1

    def test_rejects_unknown_field(self):
        with pytest.raises(ConfigError, match="unknown"):
            H.ExperimentConfig.from_dict(tiny_config(gizmo=True))

    @pytest.mark.parametrize("field,value,message", [
        ("dataset", "cifar", "dataset"),
        ("tasks", 0, "tasks"),
        ("classes_per_task", 1, "classes_per_task"),
        ("train_per_class", -5, "train_per_class"),
        ("arch", "transformer", "arch"),
    ])
    def test_rejects_out_of_range_naming_field(self, field, value, message):
        with pytest.raises(ConfigError, match=message):
            H.ExperimentConfig.from_dict(tiny_config(**{field: value}))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            H.load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            H.load_config(path)


class TestRunExperiment:
    def test_runs_and_records(self):
        cfg = H.ExperimentConfig.from_dict(tiny_config())
        record, net, memory = H.run_experiment(cfg)
        assert record.method == "gpm"
        assert len(record.accuracy_matrix) == 2
        assert record.config["train"]["seed"] == 7
        assert set(net.heads) == {0, 1}
        assert memory.bases

    def test_deterministic_per_config(self):
        cfg = H.ExperimentConfig.from_dict(tiny_config())
        a, _, _ = H.run_experiment(cfg)
        b, _, _ = H.run_experiment(cfg)
        assert a.comparable() == b.comparable()


class TestPersistence:
    def test_files_written_and_round_trip(self, tmp_path):
        cfg = H.ExperimentConfig.from_dict(tiny_config())
        record, net, memory = H.run_experiment(cfg)
        paths = H.persist_run(record, tmp_path / "out", net=net, memory=memory)
        loaded = H.load_run(tmp_path / "out")
        assert loaded.to_dict() == record.to_dict()

        matrix = H.read_acc_matrix(paths["matrix"])
        assert matrix == record.accuracy_matrix
        for t, row in enumerate(matrix):
            assert len(row) == t + 1

    def test_metrics_recomputable_from_csv(self, tmp_path):
        cfg = H.ExperimentConfig.from_dict(tiny_config())
        record, net, memory = H.run_experiment(cfg)
        paths = H.persist_run(record, tmp_path / "out", net=net, memory=memory)
        matrix = H.read_acc_matrix(paths["matrix"])
        acc, bwt = TR.compute_metrics(matrix)
        assert acc == record.acc and bwt == record.bwt

    def test_checkpoint_reload_consistent(self, tmp_path):
        cfg = H.ExperimentConfig.from_dict(tiny_config())
        record, net, memory = H.run_experiment(cfg)
        paths = H.persist_run(record, tmp_path / "out", net=net, memory=memory)
        net2, cfg2, doc = H.load_checkpoint(paths["checkpoint"])
        assert cfg2 == cfg
        for name in net.params:
            assert np.array_equal(net2.params[name], net.params[name])

    def test_bitwise_reproducible_files(self, tmp_path):
        cfg = H.ExperimentConfig.from_dict(tiny_config())
        blobs = []
        for sub in ("a", "b"):
            record, net, memory = H.run_experiment(cfg)
            paths = H.persist_run(record, tmp_path / sub, net=net, memory=memory)
            with open(paths["metrics"], "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            doc.pop("wall_clock")
            blobs.append((json.dumps(doc, sort_keys=True),
                          open(paths["matrix"], "rb").read(),
                          open(paths["checkpoint"], "rb").read(),
                          open(paths["memory"], "rb").read()))
        assert blobs[0] == blobs[1]

    def test_record_schema_guard(self):
        with pytest.raises(Exception):
            RunRecord.from_dict({"schema_version": 99})
