"""Loaders, synthetic data, preprocessing and batching."""

import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from factortransfer.data import (Batch, Dataset, augment, batch_iter, channel_stats, denormalize,
                                 load_cifar10_binary, load_mnist_idx, normalize, read_cifar_binary,
                                 read_norm_sidecar, synth_dataset, write_cifar_binary, write_norm_sidecar)
from factortransfer.errors import ConfigurationError, DataFormatError
from factortransfer.tensor import Tensor

RECORD = 3073


def _records(labels, fill=None, rng=None):
    out = bytearray()
    for lab in labels:
        pixels = bytes([fill] * 3072) if fill is not None else rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
        out += bytes([lab]) + pixels
    return bytes(out)


# -- CIFAR-10 binary ---------------------------------------------------------------

def test_cifar_two_records(tmp_path, rng):
    path = tmp_path / "b.bin"
    path.write_bytes(_records([1, 2], rng=rng))
    assert path.stat().st_size == 6146
    images, labels = read_cifar_binary(path)
    assert images.shape == (2, 3, 32, 32)
    assert labels.tolist() == [1, 2]


def test_cifar_label_and_scaling(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(_records([7], fill=255))
    images, labels = read_cifar_binary(path)
    assert labels.tolist() == [7]
    np.testing.assert_array_equal(images, np.ones((1, 3, 32, 32), dtype=np.float32))


def test_cifar_plane_order(tmp_path):
    pixels = np.zeros(3072, dtype=np.uint8)
    pixels[:1024] = 255  # red plane first
    path = tmp_path / "b.bin"
    path.write_bytes(bytes([0]) + pixels.tobytes())
    images, _ = read_cifar_binary(path)
    assert images[0, 0].min() == 1.0 and images[0, 1:].max() == 0.0


def test_cifar_truncation_names_offset(tmp_path, rng):
    path = tmp_path / "b.bin"
    path.write_bytes(_records([0, 1], rng=rng) + b"\x00" * 5)
    with pytest.raises(DataFormatError, match="offset 6146"):
        read_cifar_binary(path)


def test_cifar_bad_label(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(_records([3, 12], fill=0))
    with pytest.raises(DataFormatError, match="12"):
        read_cifar_binary(path)


def test_cifar_missing_file(tmp_path):
    with pytest.raises(DataFormatError, match="missing"):
        read_cifar_binary(tmp_path / "nope.bin")


def _write_cifar_dir(root, rng, per_file=3):
    for i in range(1, 6):
        (root / f"data_batch_{i}.bin").write_bytes(_records(rng.integers(0, 10, per_file), rng=rng))
    (root / "test_batch.bin").write_bytes(_records(rng.integers(0, 10, 4), rng=rng))


def test_cifar_directory_and_subset(tmp_path, rng):
    _write_cifar_dir(tmp_path, rng)
    train, test = load_cifar10_binary(tmp_path)
    assert (len(train), len(test)) == (15, 4)
    assert train.class_count == 10 and train.split == "train" and test.split == "test"
    small, tiny = load_cifar10_binary(tmp_path, 5, 2)
    assert (len(small), len(tiny)) == (5, 2)
    np.testing.assert_array_equal(small.images, train.images[:5])


def test_cifar_roundtrip(tmp_path, rng):
    images = rng.integers(0, 256, (4, 3, 32, 32)).astype(np.float32) / 255
    ds = Dataset(images, np.array([0, 9, 4, 4]), 10)
    write_cifar_binary(tmp_path / "r.bin", ds)
    back_images, back_labels = read_cifar_binary(tmp_path / "r.bin")
    np.testing.assert_array_equal(back_images, ds.images)
    np.testing.assert_array_equal(back_labels, ds.labels)


# -- MNIST IDX ------------------------------------------------------------------------

def _idx_images(n, fill=0):
    return struct.pack(">IIII", 0x803, n, 28, 28) + bytes([fill] * (784 * n))


def _idx_labels(labels):
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


def test_mnist_single_sample(tmp_path):
    (tmp_path / "i").write_bytes(_idx_images(1, fill=128))
    (tmp_path / "l").write_bytes(_idx_labels([5]))
    ds = load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (1, 1, 28, 28)
    assert ds.labels.tolist() == [5]
    assert ds.images[0, 0, 0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_mnist_wrong_label_magic(tmp_path):
    (tmp_path / "i").write_bytes(_idx_images(1))
    with pytest.raises(DataFormatError, match="magic"):
        load_mnist_idx(tmp_path / "i", tmp_path / "i")


def test_mnist_count_mismatch_and_truncation(tmp_path):
    (tmp_path / "i").write_bytes(_idx_images(2))
    (tmp_path / "l").write_bytes(_idx_labels([1]))
    with pytest.raises(DataFormatError, match="count"):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "t").write_bytes(_idx_images(2)[:-10])
    (tmp_path / "l2").write_bytes(_idx_labels([1, 2]))
    with pytest.raises(DataFormatError, match="truncated"):
        load_mnist_idx(tmp_path / "t", tmp_path / "l2")


# -- Dataset / synthetic ----------------------------------------------------------------

def test_dataset_validation():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0]), 2)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((1, 1, 4, 4)), np.array([3]), 2)


def test_synth_deterministic():
    a = synth_dataset(5, 4, 8, seed=3)
    b = synth_dataset(5, 4, 8, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tolist() == b.labels.tolist()


def test_synth_zero_noise_within_class_identical():
    ds = synth_dataset(4, 3, 8, seed=0, noise=0.0)
    for c in range(3):
        imgs = ds.images[ds.labels == c]
        assert all(np.array_equal(imgs[0], im) for im in imgs)
    assert not np.array_equal(ds.images[ds.labels == 0][0], ds.images[ds.labels == 1][0])


def test_synth_range_and_balance():
    ds = synth_dataset(6, 5, 12, seed=1)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert Counter(ds.labels.tolist()) == {c: 6 for c in range(5)}
    assert ds.image_shape == (3, 12, 12)


@pytest.mark.parametrize("kwargs", [{"classes": 17}, {"size": 7}])
def test_synth_preconditions(kwargs):
    args = {"n_per_class": 2, "classes": 4, "size": 8, "seed": 0, **kwargs}
    with pytest.raises(ConfigurationError):
        synth_dataset(**args)


# -- augmentation and normalisation -------------------------------------------------------

def _batch(x):
    return Batch(Tensor(np.asarray(x, dtype=np.float32)), np.zeros(len(x), dtype=np.int64))


def test_augment_noop():
    x = np.random.default_rng(0).random((3, 2, 4, 4))
    out = augment(_batch(x), pad=0, flip=False, seed=5)
    np.testing.assert_array_equal(out.x.data, x.astype(np.float32))


def test_augment_flip_reverses_row():
    seen = set()
    for seed in range(20):
        out = augment(_batch([[[[1.0, 2.0]]]]), pad=0, flip=True, seed=seed).x.data.ravel().tolist()
        assert out in ([1.0, 2.0], [2.0, 1.0])
        seen.add(tuple(out))
    assert seen == {(1.0, 2.0), (2.0, 1.0)}


def test_augment_deterministic_and_shape_preserving():
    x = np.random.default_rng(1).random((4, 3, 8, 8))
    a = augment(_batch(x), 4, True, seed=9).x.data
    b = augment(_batch(x), 4, True, seed=9).x.data
    assert a.shape == x.shape and a.tobytes() == b.tobytes()


def test_normalize_identity_and_mean_image():
    x = np.random.default_rng(2).random((2, 3, 2, 2))
    np.testing.assert_allclose(normalize(_batch(x), 0.0, 1.0).x.data, x, atol=1e-7)
    const = np.broadcast_to(np.array([0.2, 0.4, 0.6])[None, :, None, None], (1, 3, 2, 2))
    np.testing.assert_allclose(normalize(_batch(const), [0.2, 0.4, 0.6], [1, 2, 3]).x.data, 0, atol=1e-7)


def test_normalize_roundtrip_and_zero_std():
    x = np.random.default_rng(3).random((2, 3, 4, 4))
    mean, std = [0.5, 0.4, 0.3], [0.2, 0.25, 0.3]
    back = denormalize(normalize(_batch(x), mean, std), mean, std)
    np.testing.assert_allclose(back.x.data, x, atol=1e-6)
    with pytest.raises(ConfigurationError):
        normalize(_batch(x), mean, [0.2, 0.0, 0.3])


def test_norm_sidecar_roundtrip(tmp_path):
    ds = synth_dataset(3, 2, 8, seed=0)
    mean, std = channel_stats(ds)
    write_norm_sidecar(tmp_path / "n.txt", mean, std)
    text = (tmp_path / "n.txt").read_text().splitlines()
    assert text[0].startswith("mean_0= ") and text[3].startswith("std_0= ")
    m2, s2 = read_norm_sidecar(tmp_path / "n.txt")
    np.testing.assert_array_equal(m2, mean)
    np.testing.assert_array_equal(s2, std)
    (tmp_path / "bad.txt").write_text("median_0= 1\n")
    with pytest.raises(DataFormatError):
        read_norm_sidecar(tmp_path / "bad.txt")


# -- batching --------------------------------------------------------------------------------

def _counting(n):
    return Dataset(np.zeros((n, 1, 2, 2)), np.arange(n) % 3, 3)


def test_batch_sizes_and_order():
    batches = list(batch_iter(_counting(10), 4))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert np.concatenate([b.y for b in batches]).tolist() == (np.arange(10) % 3).tolist()


def test_shuffle_same_seed_same_permutation():
    ds = Dataset(np.arange(12.0).reshape(12, 1, 1, 1) * np.ones((1, 1, 2, 2)), np.arange(12) % 4, 4)
    a = [b.x.data[:, 0, 0, 0].tolist() for b in batch_iter(ds, 5, True, seed=4)]
    b = [b.x.data[:, 0, 0, 0].tolist() for b in batch_iter(ds, 5, True, seed=4)]
    assert a == b
    assert sorted(sum(a, [])) == list(range(12))


def test_batch_iter_errors():
    with pytest.raises(DataFormatError):
        list(batch_iter(_counting(0), 2))
    with pytest.raises(ConfigurationError):
        list(batch_iter(_counting(3), 0))


@given(st.integers(1, 40), st.integers(1, 50), st.booleans(), st.integers(0, 100))
def test_epoch_covers_label_multiset(n, batch_size, shuffle, seed):
    ds = _counting(n)
    seen = np.concatenate([b.y for b in batch_iter(ds, batch_size, shuffle, seed)])
    assert Counter(seen.tolist()) == Counter(ds.labels.tolist())
