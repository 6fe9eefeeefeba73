import os
import struct

import numpy as np
import pytest

from fedsim.data import load_idx, load_mnist_dir, synth_classification, write_idx
from fedsim.errors import BadMagic, BadSpec, CountMismatch, Truncated
from fedsim.partition import iid_partition
from fedsim.trainer import Model, TrainConfig, evaluate, local_train


def test_balanced_classes():
    ds = synth_classification(100, 3, 4, 2.0, seed=0)
    assert np.bincount(ds.y).tolist() == [25, 25, 25, 25]
    assert ds.X.shape == (100, 3)


def test_deterministic():
    a = synth_classification(50, 4, 3, 2.0, seed=11)
    b = synth_classification(50, 4, 3, 2.0, seed=11)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    c = synth_classification(50, 4, 3, 2.0, seed=12)
    assert a.X.tobytes() != c.X.tobytes()


def test_splits_share_means_but_not_samples():
    train = synth_classification(2000, 4, 2, 5.0, seed=1)
    test = synth_classification(2000, 4, 2, 5.0, seed=1, split=1)
    assert not np.array_equal(train.X, test.X)
    for k in range(2):
        assert np.allclose(train.X[train.y == k].mean(0), test.X[test.y == k].mean(0), atol=0.15)


def test_central_training_separates():
    ds = synth_classification(1000, 10, 2, 6.0, seed=0)
    p = Model("logistic", 10, 2).init_params(0)
    out = local_train(p, ds, range(ds.n), TrainConfig(epochs=5, lr=0.1))
    _, acc = evaluate(out.params, ds)
    assert acc >= 0.99


@pytest.mark.parametrize("args", [(1, 3, 2, 1.0), (10, 0, 2, 1.0), (10, 3, 1, 1.0), (10, 3, 2, -1.0)])
def test_bad_spec(args):
    with pytest.raises(BadSpec):
        synth_classification(*args, seed=0)


@pytest.fixture
def idx_pair(tmp_path):
    images = np.arange(2 * 28 * 28, dtype=np.uint64).reshape(2, 28, 28) % 256
    labels = np.array([7, 3], dtype=np.uint8)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lbl", labels)
    return tmp_path / "img", tmp_path / "lbl", images, labels


def test_idx_roundtrip(idx_pair):
    img, lbl, images, labels = idx_pair
    ds = load_idx(img, lbl, num_classes=10)
    assert ds.X.shape == (2, 784)
    assert np.array_equal(np.rint(ds.X * 255).astype(np.uint8).reshape(2, 28, 28), images.astype(np.uint8))
    assert ds.y.tolist() == [7, 3]


def test_idx_header_bytes(idx_pair):
    raw = open(idx_pair[1], "rb").read()
    assert raw[:8] == struct.pack(">II", 0x801, 2)


def test_images_as_labels(idx_pair):
    img, lbl, _, _ = idx_pair
    with pytest.raises(BadMagic):
        load_idx(img, img)


def test_count_mismatch(idx_pair, tmp_path):
    img, _, _, _ = idx_pair
    write_idx(tmp_path / "three", np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(CountMismatch):
        load_idx(img, tmp_path / "three")


def test_truncated(idx_pair, tmp_path):
    img, lbl, _, _ = idx_pair
    cut = tmp_path / "cut"
    cut.write_bytes(open(img, "rb").read()[:-5])
    with pytest.raises(Truncated):
        load_idx(cut, lbl)
    cut.write_bytes(b"\x00\x00")
    with pytest.raises(Truncated):
        load_idx(img, cut)


MNIST_DIR = os.environ.get("FEDSIM_MNIST_DIR")


@pytest.mark.skipif(not MNIST_DIR, reason="set FEDSIM_MNIST_DIR to the directory holding the MNIST IDX files")
def test_mnist_train():
    ds = load_mnist_dir(MNIST_DIR, "train")
    assert (ds.n, ds.d, ds.num_classes) == (60000, 784, 10)
    part = iid_partition(ds.n, 100, 0)
    assert sum(part.sizes().values()) == 60000
