import gzip
import struct
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vanillanet.data import (
    CIFAR_RECORD,
    Dataset,
    DataFormatError,
    augment,
    channel_stats,
    find_cifar10,
    find_mnist,
    iterate_batches,
    load_cifar10,
    load_idx,
    pad_to,
    prefetch,
    standardize,
    synthetic_blobs,
    write_cifar10,
    write_idx,
)


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (7, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 7, dtype=np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", images)
    write_idx(tmp_path / "train-labels-idx1-ubyte", labels)
    return tmp_path, images, labels


class TestIDX:
    def test_header_bytes(self, tmp_path):
        write_idx(tmp_path / "l", np.array([3, 1, 4], np.uint8))
        assert (tmp_path / "l").read_bytes() == bytes([0, 0, 8, 1, 0, 0, 0, 3, 3, 1, 4])

    def test_hand_built_file(self, tmp_path):
        # two 2x3 images written byte by byte
        body = bytes(range(12))
        (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x803, 2, 2, 3) + body)
        (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 2) + bytes([7, 2]))
        ds = load_idx(tmp_path / "i", tmp_path / "l")
        assert ds.images.shape == (2, 1, 2, 3)
        assert ds.images[1, 0, 1, 2] == pytest.approx(11 / 255)
        assert ds.labels.tolist() == [7, 2]

    def test_round_trip(self, idx_pair):
        d, images, labels = idx_pair
        ds = find_mnist(d)
        assert np.array_equal(np.rint(ds.images[:, 0] * 255).astype(np.uint8), images)
        assert np.array_equal(ds.labels, labels)

    def test_gzip(self, tmp_path):
        images = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4)
        write_idx(tmp_path / "t10k-images-idx3-ubyte.gz", images)
        write_idx(tmp_path / "t10k-labels-idx1-ubyte.gz", np.array([0, 1], np.uint8))
        with gzip.open(tmp_path / "t10k-images-idx3-ubyte.gz") as f:
            assert f.read(4) == b"\x00\x00\x08\x03"
        assert len(find_mnist(tmp_path, "test")) == 2

    def test_count_mismatch(self, idx_pair):
        d, _, _ = idx_pair
        write_idx(d / "train-labels-idx1-ubyte", np.zeros(6, np.uint8))
        with pytest.raises(DataFormatError, match="count"):
            find_mnist(d)

    def test_wrong_magic(self, idx_pair):
        d, _, _ = idx_pair
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(d / "train-labels-idx1-ubyte", d / "train-labels-idx1-ubyte")

    def test_truncated(self, idx_pair):
        d, _, _ = idx_pair
        p = d / "train-images-idx3-ubyte"
        p.write_bytes(p.read_bytes()[:-1])
        with pytest.raises(DataFormatError, match="data bytes"):
            find_mnist(d)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            find_mnist(tmp_path)


class TestCIFAR:
    def test_single_record(self, tmp_path):
        img = np.zeros((3, 32, 32), np.uint8)
        img[0, 0, 0], img[1, 5, 7], img[2, 31, 31] = 255, 51, 102
        write_cifar10(tmp_path / "b.bin", img[None], [6])
        raw = (tmp_path / "b.bin").read_bytes()
        assert len(raw) == CIFAR_RECORD
        assert raw[0] == 6 and raw[1] == 255
        ds = load_cifar10(tmp_path / "b.bin")
        assert ds.labels.tolist() == [6]
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.images[0, 1, 5, 7] == pytest.approx(0.2)
        assert ds.images[0, 2, 31, 31] == pytest.approx(0.4)

    def test_truncated_record(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(bytes(CIFAR_RECORD + 10))
        with pytest.raises(DataFormatError, match="record"):
            load_cifar10(tmp_path / "b.bin")

    def test_bad_label(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(bytes([11]) + bytes(CIFAR_RECORD - 1))
        with pytest.raises(DataFormatError):
            load_cifar10(tmp_path / "b.bin")

    def test_histogram_matches_byte_scan(self, tmp_path):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 10, 40)
        write_cifar10(tmp_path / "b.bin", rng.integers(0, 256, (40, 3072)), labels)
        raw = (tmp_path / "b.bin").read_bytes()
        scan = np.bincount([raw[i * CIFAR_RECORD] for i in range(40)], minlength=10)
        assert np.array_equal(np.bincount(load_cifar10(tmp_path / "b.bin").labels, minlength=10), scan)

    def test_find_requires_all_batches(self, tmp_path):
        write_cifar10(tmp_path / "test_batch.bin", np.zeros((1, 3072)), [0])
        assert len(find_cifar10(tmp_path, "test")) == 1
        with pytest.raises(FileNotFoundError):
            find_cifar10(tmp_path, "train")


class TestSynthetic:
    def test_deterministic(self):
        a, b = synthetic_blobs(seed=4, samples=50), synthetic_blobs(seed=4, samples=50)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    def test_balanced(self):
        counts = np.bincount(synthetic_blobs(10, 1003).labels)
        assert counts.max() - counts.min() <= 1

    def test_noise_free_templates(self):
        ds = synthetic_blobs(4, 40, 16, snr=np.inf)
        for c in range(4):
            group = ds.images[ds.labels == c]
            assert np.array_equal(group, np.broadcast_to(group[0], group.shape))
        # nearest-template classifier is exact when noise is off
        means = np.stack([ds.images[ds.labels == c].mean(axis=0) for c in range(4)])
        d = ((ds.images[:, None] - means[None]) ** 2).sum(axis=(2, 3, 4))
        assert np.array_equal(d.argmin(axis=1), ds.labels)

    def test_range_and_shape(self):
        ds = synthetic_blobs(3, 9, 8, channels=2)
        assert ds.images.shape == (9, 2, 8, 8)
        assert ds.images.min() >= 0 and ds.images.max() <= 1


class TestTransforms:
    def test_pad(self):
        ds = Dataset(np.ones((2, 1, 28, 28), np.float32), np.zeros(2, np.int64), 10)
        out = pad_to(ds, 32)
        assert out.images.shape == (2, 1, 32, 32)
        assert out.images.sum() == 2 * 28 * 28
        assert out.images[0, 0, 2, 2] == 1 and out.images[0, 0, 1, 2] == 0

    def test_standardize(self, rng):
        ds = Dataset(rng.uniform(size=(50, 2, 4, 4)).astype(np.float32), np.zeros(50, np.int64), 2)
        out = standardize(ds, channel_stats(ds))
        np.testing.assert_allclose(out.images.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(out.images.std(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_label_range_checked(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((1, 1, 2, 2)), np.array([5]), 3)

    def test_augment_noop(self, rng):
        x = rng.standard_normal((3, 1, 4, 4))
        assert augment(x, 0.0, 0) is x

    def test_flip_always(self, rng):
        x = rng.standard_normal((3, 2, 4, 5))
        assert np.array_equal(augment(x, 1.0, 0, rng), x[..., ::-1])


@settings(max_examples=30, deadline=None)
@given(pad=st.integers(0, 3), flip=st.floats(0, 1), seed=st.integers(0, 2**31))
def test_augment_preserves_shape_and_mass(pad, flip, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(4, 2, 6, 6))
    y = augment(x, flip, pad, np.random.default_rng(seed))
    assert y.shape == x.shape
    # a crop never adds mass and a flip keeps it
    assert np.all(y.sum(axis=(1, 2, 3)) <= x.sum(axis=(1, 2, 3)) + 1e-9)


class TestBatching:
    def test_file_order(self):
        ds = Dataset(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), np.arange(10) % 3, 3)
        batches = list(iterate_batches(ds, 4))
        assert [b[0].ravel().tolist() for b in batches] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
        assert len(list(iterate_batches(ds, 4, drop_last=True))) == 2

    def test_shuffle_is_permutation(self):
        ds = Dataset(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), np.zeros(10, np.int64), 1)
        seen = np.concatenate([b[0].ravel() for b in iterate_batches(ds, 3, True, np.random.default_rng(0))])
        assert sorted(seen.tolist()) == list(range(10))

    def test_bad_batch_size(self):
        ds = Dataset(np.zeros((2, 1, 1, 1)), np.zeros(2, np.int64), 1)
        with pytest.raises(ValueError):
            next(iterate_batches(ds, 0))

    def test_prefetch_preserves_order(self):
        def slow():
            for i in range(20):
                time.sleep(0.001 * (i % 3))
                yield i
        assert list(prefetch(slow(), 3)) == list(range(20))
        assert list(prefetch(iter(range(5)), 0)) == list(range(5))

    def test_prefetch_propagates_errors(self):
        def bad():
            yield 1
            raise DataFormatError("boom")
        it = prefetch(bad(), 2)
        assert next(it) == 1
        with pytest.raises(DataFormatError, match="boom"):
            next(it)
