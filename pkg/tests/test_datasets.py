"""Dataset tests: determinism, label ranges, separability, IDX format."""

import struct

import numpy as np
import pytest

from robustcl.errors import ConfigError, FormatError
from robustcl import datasets as D
from robustcl import model as M
from robustcl import trainer as TR


def train_linear_probe(x, y, n_classes, epochs=150, lr=0.5):
    """Logistic-regression probe trained with the package's own engine."""
    from robustcl.losses import cross_entropy
    from robustcl.tensor import GradTape, backward

    net = M.Network([M.dense(x.shape[1], n_classes, capture=False)], rng_seed=0)
    net.add_head(0, n_classes)
    net.params["head0.weight"] = np.eye(n_classes)
    for _ in range(epochs):
        tape = GradTape()
        bound = M.bind_parameters(net, tape, task=0)
        bound.pop("head0.weight"), bound.pop("head0.bias")
        cap = M.forward(net, x, 0, params=bound)
        backward(cross_entropy(cap.logits, y), tape)
        for name, t in bound.items():
            net.params[name] = net.params[name] - lr * t.grad
    cap = M.forward(net, x, 0)
    return 100.0 * float(np.mean(np.argmax(cap.logits.data, axis=1) == y))


class TestSplitBlobs:
    def test_deterministic(self):
        a = D.split_blobs(2, 2, 4, 10, 5, 5, seed=3)
        b = D.split_blobs(2, 2, 4, 10, 5, 5, seed=3)
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.train[0], tb.train[0])
            assert np.array_equal(ta.test[1], tb.test[1])

    def test_label_ranges(self):
        stream = D.split_blobs(3, 2, 4, 10, 5, 5, seed=4)
        for t, task in enumerate(stream):
            assert task.class_ids == [2 * t, 2 * t + 1]
            for _, y in (task.train, task.val, task.test):
                assert y.min() >= 2 * t and y.max() < 2 * (t + 1)

    @pytest.mark.parametrize("seed", range(5))
    def test_linearly_separable(self, seed):
        stream = D.split_blobs(1, 2, 4, 50, 5, 5, seed=seed)
        x, y = stream[0].train
        acc = train_linear_probe(x, stream[0].local_labels(y), 2)
        assert acc >= 99.0

    def test_split_sizes(self):
        stream = D.split_blobs(1, 3, 4, 10, 5, 7, seed=0)
        assert stream[0].train[0].shape == (30, 4)
        assert stream[0].val[0].shape == (15, 4)
        assert stream[0].test[0].shape == (21, 4)

    def test_infeasible_separation(self):
        with pytest.raises(ConfigError):
            D.split_blobs(1, 40, 1, 5, 2, 2, seed=0)

    def test_bad_args(self):
        with pytest.raises(ConfigError):
            D.split_blobs(1, 1, 4, 10, 5, 5, seed=0)
        with pytest.raises(ConfigError):
            D.split_blobs(1, 2, 4, 0, 5, 5, seed=0)


class TestSplitRings:
    def test_deterministic(self):
        a = D.split_rings(2, 2, 8, 20, 5, 10, seed=5)
        b = D.split_rings(2, 2, 8, 20, 5, 10, seed=5)
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.train[0], tb.train[0])

    def test_label_ranges(self):
        stream = D.split_rings(3, 2, 8, 20, 5, 10, seed=6)
        for t, task in enumerate(stream):
            assert task.class_ids == [2 * t, 2 * t + 1]

    def test_linear_poor_mlp_good(self):
        stream = D.split_rings(1, 2, 16, 150, 20, 100, seed=1)
        x, y = stream[0].train
        y_local = stream[0].local_labels(y)
        linear_acc = train_linear_probe(x, y_local, 2)
        assert linear_acc <= 70.0

        cfg = TR.TrainConfig(method="naive", epochs=40, batch_size=32, lr=0.05, seed=1)
        net = M.make_mlp(16, [64, 64], seed=1)
        record, _ = TR.run_sequence(cfg, stream, net)
        assert record.accuracy_matrix[0][0] >= 95.0

    def test_outliers_only_in_train(self):
        clean = D.split_rings(1, 2, 8, 50, 10, 30, seed=7)
        dirty = D.split_rings(1, 2, 8, 50, 10, 30, seed=7, outlier_fraction=0.2)
        assert not np.array_equal(clean[0].train[0], dirty[0].train[0])
        assert np.array_equal(clean[0].val[0], dirty[0].val[0])
        assert np.array_equal(clean[0].test[0], dirty[0].test[0])

    def test_outlier_fraction_validation(self):
        with pytest.raises(ConfigError):
            D.split_rings(1, 2, 8, 10, 5, 5, seed=0, outlier_fraction=1.0)


def write_idx_fixture(tmp_path, pixels, labels):
    """Hand-built 2-image 2x2 IDX pair."""
    images_path = tmp_path / "imgs.idx"
    labels_path = tmp_path / "labels.idx"
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, r, c = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, r, c))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(bytes(labels))
    return images_path, labels_path


class TestLoadIdx:
    def test_round_trip_hand_fixture(self, tmp_path):
        pixels = [[[0, 255], [128, 64]], [[255, 0], [1, 2]]]
        images_path, labels_path = write_idx_fixture(tmp_path, pixels, [3, 7])
        images, labels = D.load_idx(images_path, labels_path)
        assert images.shape == (2, 2, 2)
        assert labels.tolist() == [3, 7]
        assert images[0, 0, 0] == 0.0 and images[0, 0, 1] == 1.0
        assert images[0, 1, 0] == 128 / 255.0
        assert np.array_equal(np.round(images * 255).astype(np.uint8), np.asarray(pixels))

    def test_wrong_magic_rejected(self, tmp_path):
        images_path, labels_path = write_idx_fixture(tmp_path, np.zeros((1, 2, 2)), [0])
        blob = bytearray(images_path.read_bytes())
        blob[3] = 0x04  # 0x00000804
        images_path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="offset 0"):
            D.load_idx(images_path, labels_path)

    def test_truncated_rejected(self, tmp_path):
        images_path, labels_path = write_idx_fixture(tmp_path, np.zeros((2, 2, 2)), [0, 1])
        images_path.write_bytes(images_path.read_bytes()[:-3])
        with pytest.raises(FormatError, match="expected"):
            D.load_idx(images_path, labels_path)

    def test_idx_split_stream(self, tmp_path):
        rng = np.random.default_rng(8)
        pixels = rng.integers(0, 256, size=(40, 2, 2)).astype(np.uint8)
        labels = np.repeat(np.arange(4), 10).astype(np.uint8)
        images_path, labels_path = write_idx_fixture(tmp_path, pixels, labels.tolist())
        images, lab = D.load_idx(images_path, labels_path)
        stream = D.idx_split(images, lab, tasks=2, classes_per_task=2,
                             train_per_class=6, val_per_class=2, test_per_class=2, seed=0)
        assert len(stream) == 2
        assert stream[0].train[0].shape == (12, 4)
        assert stream[1].class_ids == [2, 3]
