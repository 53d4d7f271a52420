import gzip
import os
from pathlib import Path

import numpy as np
import pytest

from blackmarks.data import (Dataset, FormatError, SamplingError, digits_standin, load_idx,
                             load_mnist, stratified_sample, synth_blobs, write_idx)


def _pair(tmp_path, images, labels):
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", labels)
    return tmp_path / "img", tmp_path / "lab"


def test_load_idx_small_pair(tmp_path):
    images = np.array([[[0, 255], [255, 0]], [[255, 255], [0, 0]]], dtype=np.uint8)
    ip, lp = _pair(tmp_path, images, np.array([1, 0], dtype=np.uint8))
    ds = load_idx(ip, lp)
    assert ds.images.shape == (2, 4)
    np.testing.assert_array_equal(ds.images, [[0, 1, 1, 0], [1, 1, 0, 0]])
    np.testing.assert_array_equal(ds.labels, [1, 0])


def test_load_idx_gzip(tmp_path):
    images = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    ip, lp = _pair(tmp_path, images, np.array([0, 1], dtype=np.uint8))
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    np.testing.assert_array_equal(load_idx(gz, lp).images, load_idx(ip, lp).images)


def test_wrong_magic_names_file(tmp_path):
    labels = np.array([0, 1], dtype=np.uint8)
    write_idx(tmp_path / "img", labels)  # a labels-style (0x801) file in the images slot
    write_idx(tmp_path / "lab", labels)
    with pytest.raises(FormatError, match="img"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_truncated_payload(tmp_path):
    ip, lp = _pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(3, np.uint8))
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(ip, lp)


def test_count_mismatch(tmp_path):
    ip, lp = _pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(FormatError, match="lab"):
        load_idx(ip, lp)


MNIST_DIR = Path(os.environ.get("BLACKMARKS_MNIST_DIR", Path(__file__).resolve().parents[1] / "data" / "mnist"))


@pytest.mark.skipif(not (MNIST_DIR / "train-images-idx3-ubyte").exists(), reason="no MNIST files")
def test_mnist_files():
    train, test = load_mnist(MNIST_DIR, "train"), load_mnist(MNIST_DIR, "test")
    for ds in (train, test):
        assert ds.images.shape[1] == 784 and len(ds) == len(ds.labels)
        assert set(np.unique(ds.labels)) == set(range(10))
        assert 0 <= ds.images.min() and ds.images.max() <= 1


def test_blobs_one_per_class():
    ds = synth_blobs(2, 1, 3, 4.0, seed=0)
    assert len(ds) == 2 and sorted(ds.labels) == [0, 1]


def test_blobs_zero_separation_share_center():
    ds = synth_blobs(3, 4000, 4, 0.0, seed=1)
    means = np.stack([ds.images[ds.labels == c].mean(axis=0) for c in range(3)])
    assert np.abs(means - 0.5).max() < 0.01


def test_blobs_deterministic_and_in_range():
    a = synth_blobs(4, 10, 5, 6.0, seed=3)
    b = synth_blobs(4, 10, 5, 6.0, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.min() >= 0 and a.images.max() <= 1


@pytest.mark.parametrize("classes", [4, 8])
def test_blobs_nearest_centroid(classes):
    ds = synth_blobs(classes, 200, 8, 6.0, seed=2)
    centroids = np.stack([ds.images[ds.labels == c].mean(axis=0) for c in range(classes)])
    pred = ((ds.images[:, None] - centroids[None]) ** 2).sum(axis=2).argmin(axis=1)
    assert (pred == ds.labels).mean() > 0.99


def test_stratified_full_class():
    ds = synth_blobs(3, 5, 2, 4.0, seed=0)
    s = stratified_sample(ds, 5, seed=1)
    assert sorted(map(bytes, s.images)) == sorted(map(bytes, ds.images))


def test_stratified_one_each():
    ds = synth_blobs(10, 7, 2, 4.0, seed=0)
    s = stratified_sample(ds, 1, seed=1)
    assert len(s) == 10 and len(set(s.labels.tolist())) == 10


def test_stratified_deterministic_and_exact_counts():
    ds = synth_blobs(4, 30, 3, 4.0, seed=0)
    a, b = stratified_sample(ds, 11, seed=5), stratified_sample(ds, 11, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.bincount(a.labels).tolist() == [11] * 4


def test_stratified_insufficient_class():
    ds = Dataset(np.zeros((3, 2)), np.array([0, 0, 1]), 2)
    with pytest.raises(SamplingError, match="class 1"):
        stratified_sample(ds, 2, seed=0)


def test_digits_standin_shapes():
    train, test = digits_standin(seed=0, train_copies=2, test_copies=2)
    assert train.dim == test.dim == 64
    assert set(np.unique(train.labels)) == set(range(10))
    for ds in (train, test):
        assert ds.images.min() >= 0 and ds.images.max() <= 1
