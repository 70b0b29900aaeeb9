import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from bnnlab import data as D
from bnnlab.errors import ConfigError, FormatError
from bnnlab.tensor import Rng


def idx_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, np.uint8)
    return bytes([0, 0, 8, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def mnist_dir():
    for root in (os.environ.get(D.DATA_ROOT_ENV), "/root/data"):
        if root and (Path(root) / "mnist").is_dir():
            return Path(root)
    return None


class TestIdx:
    def test_header_example(self):
        raw = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2]) + bytes(range(8))
        arr = D.parse_idx(raw)
        assert arr.shape == (2, 2, 2) and arr[1, 1, 1] == 7

    def test_truncated_payload_names_counts(self):
        raw = idx_bytes(np.zeros((2, 2, 2)))[:-3]
        with pytest.raises(FormatError, match="5 bytes, expected 8"):
            D.parse_idx(raw)

    @pytest.mark.parametrize("raw,match", [
        (b"\x01\x00\x08\x01\x00\x00\x00\x01\x05", "magic"),
        (b"\x00\x00\x0d\x01\x00\x00\x00\x01\x05", "element type"),
        (b"\x00\x00", "too short"),
        (b"\x00\x00\x08\x03\x00\x00\x00\x02", "truncated header"),
    ])
    def test_bad_headers(self, raw, match):
        with pytest.raises(FormatError, match=match):
            D.parse_idx(raw)

    def test_load_pair_scales_pixels(self, tmp_path):
        imgs = np.array([[[0, 255], [128, 1]], [[3, 4], [5, 6]]], np.uint8)
        (tmp_path / "i").write_bytes(idx_bytes(imgs))
        (tmp_path / "l.gz").write_bytes(gzip.compress(idx_bytes(np.array([4, 9]))))
        ds = D.load_idx(tmp_path / "i", tmp_path / "l.gz")
        assert ds.images.shape == (2, 1, 2, 2) and ds.images.dtype == np.float32
        assert ds.images[0, 0, 0, 1] == 1.0 and ds.images[0, 0, 1, 0] == pytest.approx(128 / 255)
        assert ds.labels.tolist() == [4, 9]

    def test_count_mismatch(self, tmp_path):
        (tmp_path / "i").write_bytes(idx_bytes(np.zeros((3, 2, 2))))
        (tmp_path / "l").write_bytes(idx_bytes(np.zeros(2)))
        with pytest.raises(FormatError, match="3 images vs 2 labels"):
            D.load_idx(tmp_path / "i", tmp_path / "l")

    def test_labels_out_of_range(self, tmp_path):
        (tmp_path / "i").write_bytes(idx_bytes(np.zeros((1, 2, 2))))
        (tmp_path / "l").write_bytes(idx_bytes(np.array([12])))
        with pytest.raises(FormatError):
            D.load_idx(tmp_path / "i", tmp_path / "l")

    def test_pure_function_of_bytes(self, tmp_path):
        r = np.random.default_rng(0)
        (tmp_path / "i").write_bytes(idx_bytes(r.integers(0, 256, (5, 3, 3))))
        (tmp_path / "l").write_bytes(idx_bytes(r.integers(0, 10, 5)))
        a, b = D.load_idx(tmp_path / "i", tmp_path / "l"), D.load_idx(tmp_path / "i", tmp_path / "l")
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    @pytest.mark.skipif(mnist_dir() is None, reason="MNIST files not available")
    def test_published_mnist(self):
        train, test = D.load_dataset("mnist", mnist_dir())
        assert len(train) == 60000 and train.image_shape == (1, 28, 28)
        assert len(test) == 10000
        assert train.labels.min() == 0 and train.labels.max() == 9
        assert 0 <= train.images.min() and train.images.max() <= 1


class TestCifar:
    def test_synthetic_record(self, tmp_path):
        rec = bytes([3]) + bytes(i % 256 for i in range(1, 3073))
        (tmp_path / "b.bin").write_bytes(rec)
        ds = D.load_cifar10_bin([tmp_path / "b.bin"])
        assert len(ds) == 1 and ds.labels.tolist() == [3]
        assert ds.images.shape == (1, 3, 32, 32)
        assert ds.images[0, 0, 0, 0] == pytest.approx(1 / 255)
        assert ds.images[0, 1, 0, 0] == pytest.approx((1025 % 256) / 255)

    def test_several_files(self, tmp_path):
        paths = []
        for i in range(3):
            p = tmp_path / f"{i}.bin"
            p.write_bytes((bytes([i]) + bytes(3072)) * (i + 1))
            paths.append(p)
        ds = D.load_cifar10_bin(paths)
        assert len(ds) == 6 and ds.labels.tolist() == [0, 1, 1, 2, 2, 2]

    def test_bad_size(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(bytes(3074))
        with pytest.raises(FormatError, match="3073"):
            D.load_cifar10_bin([tmp_path / "b.bin"])


class TestSplit:
    def ds(self, n=100):
        return D.Dataset(np.zeros((n, 1, 1, 1), np.float32), np.arange(n) % 10, 10)

    def test_ratio(self):
        train, val = D.split_train_val(self.ds(), 0.9, Rng(0))
        assert (len(train), len(val)) == (90, 10)
        assert train.split == "train" and val.split == "val"

    def test_disjoint_and_exhaustive(self):
        ds = D.Dataset(np.arange(50, dtype=np.float32).reshape(50, 1, 1, 1), np.zeros(50, np.int64), 1)
        train, val = D.split_train_val(ds, 0.9, Rng(3))
        a, b = set(train.images.ravel()), set(val.images.ravel())
        assert not a & b and a | b == set(range(50))

    def test_deterministic(self):
        a, _ = D.split_train_val(self.ds(), 0.9, Rng(5))
        b, _ = D.split_train_val(self.ds(), 0.9, Rng(5))
        c, _ = D.split_train_val(self.ds(), 0.9, Rng(6))
        assert np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.labels, c.labels)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.5])
    def test_bad_fraction(self, fraction):
        with pytest.raises(ConfigError):
            D.split_train_val(self.ds(), fraction)


class TestNormalizer:
    def test_zero_mean_unit_std(self):
        r = np.random.default_rng(0)
        ds = D.Dataset(r.random((40, 3, 4, 4)).astype(np.float32), np.zeros(40, np.int64), 1)
        norm = D.Normalizer.fit(ds)
        x = norm(ds.images)
        assert np.allclose(x.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        assert np.allclose(x.std(axis=(0, 2, 3)), 1, atol=1e-4)
        assert set(norm.to_dict()) == {"mean", "std"}

    def test_constant_channel(self):
        ds = D.Dataset(np.full((4, 1, 2, 2), 0.5, np.float32), np.zeros(4, np.int64), 1)
        assert np.all(np.isfinite(D.Normalizer.fit(ds)(ds.images)))


class TestBatches:
    def test_covers_all_indices(self):
        batches = list(D.iterate_batches(10, 4, Rng(0)))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))

    def test_unshuffled_order(self):
        assert np.concatenate(list(D.iterate_batches(5, 2))).tolist() == [0, 1, 2, 3, 4]

    def test_sealed_test_opens_once(self):
        sealed = D.SealedTest(D.Dataset(np.zeros((2, 1, 1, 1), np.float32), np.zeros(2, np.int64), 1, "test"))
        assert len(sealed.open()) == 2
        with pytest.raises(RuntimeError):
            sealed.open()


class TestAugment:
    def images(self, n=6, c=1, size=12, seed=0):
        return np.random.default_rng(seed).random((n, c, size, size)).astype(np.float32)

    def test_identity_config(self):
        x = self.images()
        out = D.augment(x, D.NO_AUGMENT, Rng(0))
        assert np.array_equal(out, x) and out is not x

    def test_hflip_twice(self):
        x = self.images()
        assert np.array_equal(D.hflip(D.hflip(x)), x)
        assert np.array_equal(D.augment(x, D.AugmentConfig(1.0, 0.0, 0), Rng(0)), x[..., ::-1])

    def test_rotate_zero(self):
        x = self.images(1, 3)[0]
        assert np.abs(D.rotate(x, 0.0) - x).max() <= 1e-6

    @pytest.mark.parametrize("deg", [7.0, -13.0, 45.0, 90.0])
    def test_rotation_matches_scipy(self, deg):
        x = self.images(2, 2, 11)
        ref = ndimage.rotate(x, deg, axes=(3, 2), reshape=False, order=1, mode="constant", cval=0.0)
        got = D.rotate_and_shift(x, np.full(2, deg), np.zeros((2, 2)))
        assert np.abs(got - np.clip(ref, 0, 1)).max() < 1e-5

    def test_shift_is_padded_crop(self):
        x = self.images(1, 1, 8)
        got = D.rotate_and_shift(x, np.zeros(1), np.array([[2, -1]]))
        padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
        assert np.array_equal(got, padded[:, :, 4 + 2 : 4 + 2 + 8, 4 - 1 : 4 - 1 + 8])

    def test_shape_and_range(self):
        x = self.images(32, 3, 16)
        out = D.augment(x, D.AugmentConfig(), Rng(1))
        assert out.shape == x.shape and out.dtype == np.float32
        assert out.min() >= 0 and out.max() <= 1
        assert not np.array_equal(out, x)

    def test_seeded(self):
        x = self.images(8)
        cfg = D.AugmentConfig()
        assert np.array_equal(D.augment(x, cfg, Rng(4)), D.augment(x, cfg, Rng(4)))

    def test_digit_defaults_disable_flip(self):
        assert D.AugmentConfig.for_dataset("mnist").hflip_prob == 0
        assert D.AugmentConfig.for_dataset("cifar10").hflip_prob == 0.5

    @pytest.mark.parametrize("kw", [dict(hflip_prob=1.5), dict(max_rotation_deg=-1), dict(crop_padding=-2)])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            D.AugmentConfig(**kw)


def test_blobs_deterministic():
    a, _ = D.load_dataset("blobs", seed=3)
    b, _ = D.load_dataset("blobs", seed=3)
    assert np.array_equal(a.images, b.images) and a.num_classes == 2


def test_unknown_dataset():
    with pytest.raises(ConfigError):
        D.load_dataset("imagenette")


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.load_dataset("mnist", tmp_path)
