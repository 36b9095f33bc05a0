"""CLI tests: subcommands, exit codes, cross-file consistency."""

import json
import os

import numpy as np
import pytest

from robustcl import harness as H
from robustcl.cli import cli_main


@pytest.fixture()
def config_path(tmp_path):
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
        "train": {"method": "gpm", "epochs": 2, "batch_size": 10, "lr": 0.05,
                  "seed": 3, "eps_th": 0.95, "gpm_samples": 16},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture()
def run_dir(tmp_path, config_path):
    out = tmp_path / "run"
    code = cli_main(["run", "--config", str(config_path), "--out-dir", str(out)])
    assert code == 0
    return out


class TestRun:
    def test_single_task_run_bwt_null(self, tmp_path):
        doc = json.loads((tmp_path.parent / "nonexistent.json").name) if False else None
        cfg = {
            "dataset": "split_blobs", "tasks": 1, "classes_per_task": 2,
            "input_dim": 4, "train_per_class": 15, "val_per_class": 5,
            "test_per_class": 10, "arch": "mlp", "hidden": [8],
            "train": {"method": "naive", "epochs": 2, "batch_size": 8,
                      "lr": 0.05, "seed": 1},
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / "o"
        assert cli_main(["run", "--config", str(path), "--out-dir", str(out)]) == 0
        record = H.load_run(out)
        assert record.bwt is None
        assert len(record.accuracy_matrix) == 1

    def test_missing_config_exit_1(self, tmp_path):
        assert cli_main(["run", "--config", str(tmp_path / "missing.json")]) == 1

    def test_unknown_flag_exit_1(self, config_path):
        assert cli_main(["run", "--config", str(config_path), "--explode"]) == 1

    def test_method_and_seed_overrides(self, tmp_path, config_path):
        out = tmp_path / "naive"
        code = cli_main(["run", "--config", str(config_path), "--method", "naive",
                         "--seed", "9", "--out-dir", str(out)])
        assert code == 0
        record = H.load_run(out)
        assert record.method == "naive" and record.seed == 9

    def test_ablate_flag(self, tmp_path, config_path):
        out = tmp_path / "ablated"
        code = cli_main(["run", "--config", str(config_path), "--method", "rcl",
                         "--ablate", "ua", "--out-dir", str(out)])
        assert code == 0
        record = H.load_run(out)
        assert record.effective["kappa_gradient"] == 0.0

    def test_seeds_fanout(self, tmp_path, config_path):
        out = tmp_path / "fan"
        code = cli_main(["run", "--config", str(config_path), "--out-dir", str(out),
                         "--seeds", "1..3"])
        assert code == 0
        seeds = []
        for sub in sorted(os.listdir(out)):
            record = H.load_run(out / sub)
            seeds.append(record.seed)
        assert seeds == [1, 2, 3]


class TestEvalCommands:
    def test_eval_fgsm_mu_zero_matches_run_record(self, run_dir):
        code = cli_main(["eval-fgsm", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--mu-list", "0"])
        assert code == 0
        record = H.load_run(run_dir)
        with open(run_dir / "adv_eval.csv", "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            row = fh.readline().strip().split(",")
        entry = dict(zip(header, row))
        assert float(entry["mu"]) == 0.0
        assert float(entry["accuracy"]) == record.acc
        assert float(entry["delta"]) == 0.0

    def test_flatness_worst_mode(self, run_dir):
        code = cli_main(["flatness", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--xi", "0.05", "--mode", "worst"])
        assert code == 0
        with open(run_dir / "flatness.json", "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        assert doc["xi"] == 0.05 and "value" in doc

    def test_flatness_slice_mode(self, run_dir):
        code = cli_main(["flatness", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--mode", "slice", "--directions", "3"])
        assert code == 0
        with open(run_dir / "landscape.csv", "r", encoding="utf-8") as fh:
            lines = fh.read().strip().splitlines()
        assert lines[0] == "direction_id,span,loss"
        assert len(lines) == 1 + 3 * len(json.loads("[-1.0,-0.5,-0.25,0.0,0.25,0.5,1.0]"))

    def test_export_features(self, run_dir):
        code = cli_main(["export-features", "--checkpoint", str(run_dir / "checkpoint.json"),
                         "--per-task", "5"])
        assert code == 0
        with open(run_dir / "features.csv", "r", encoding="utf-8") as fh:
            lines = fh.read().strip().splitlines()
        assert lines[0] == "x,y,angle,label,task"
        assert len(lines) == 1 + 5 * 2
        xs = [float(line.split(",")[0]) for line in lines[1:]]
        ys = [float(line.split(",")[1]) for line in lines[1:]]
        for x, y in zip(xs, ys):
            assert x * x + y * y == pytest.approx(1.0, abs=1e-9)

    def test_gpm_inspect(self, run_dir, tmp_path):
        out = tmp_path / "report.json"
        code = cli_main(["gpm-inspect", "--memory", str(run_dir / "memory.json"),
                         "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["layers"]

    def test_bad_checkpoint_exit_1(self, tmp_path):
        assert cli_main(["eval-fgsm", "--checkpoint", str(tmp_path / "none.json"),
                         "--mu-list", "0"]) == 1
