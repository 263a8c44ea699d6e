"""
Tests for IDX ingestion, preprocessing, perturbations and dataset splits.
"""

import gzip
import math
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import chisquare

from avae.affine import AffineParams, TransformMode, inverse, warp
from avae.data import (
    MNIST_FILES,
    MnistSet,
    PerturbationSpec,
    load_idx,
    load_mnist,
    make_splits,
    perturb,
    pixel_stats,
    preprocess,
    subsample,
    write_idx,
)
from avae.exceptions import ConfigError, DataError, IdxFormatError, ShapeError
from avae.tensor import Tensor

from .conftest import make_images


def idx_bytes(magic, dims, payload):
    return struct.pack(">I" + "I" * len(dims), magic, *dims) + bytes(payload)


# ============================================================================
# IDX files
# ============================================================================

class TestIdx:

    def test_images(self, tmp_path):
        payload = [0] * (2 * 28 * 28)
        payload[5] = 255
        path = tmp_path / "images"
        path.write_bytes(idx_bytes(0x803, (2, 28, 28), payload))
        images = load_idx(path)
        assert images.shape == (2, 28, 28)
        assert images[0, 0, 5] == 1.0
        assert images.sum() == 1.0

    def test_labels(self, tmp_path):
        path = tmp_path / "labels"
        path.write_bytes(idx_bytes(0x801, (3,), [7, 0, 9]))
        labels = load_idx(path)
        assert labels.dtype == np.int64
        assert_array_equal(labels, [7, 0, 9])

    def test_header_layout(self, tmp_path):
        path = write_idx(tmp_path / "images", np.zeros((1, 28, 28)))
        assert path.read_bytes()[:4] == b"\x00\x00\x08\x03"

    def test_gzip(self, tmp_path):
        path = tmp_path / "labels.gz"
        with gzip.open(path, "wb") as f:
            f.write(idx_bytes(0x801, (2,), [1, 2]))
        assert_array_equal(load_idx(path), [1, 2])

    def test_write_then_read(self, tmp_path):
        images = np.random.default_rng(0).integers(0, 256, size=(3, 28, 28)).astype(np.uint8)
        assert_allclose(load_idx(write_idx(tmp_path / "x.gz", images)), images / 255.0)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(idx_bytes(0x802, (2,), [0, 0]))
        with pytest.raises(IdxFormatError) as excinfo:
            load_idx(path)
        assert excinfo.value.detail["magic"] == "0x00000802"
        assert excinfo.value.code == 31

    @pytest.mark.parametrize("content", [
        b"\x00\x00",
        b"\x00\x00\x08\x03\x00\x00\x00\x02",
        idx_bytes(0x803, (2, 28, 28), [0] * 100),
        idx_bytes(0x801, (2,), [0, 0, 0]),
    ])
    def test_malformed(self, tmp_path, content):
        path = tmp_path / "broken"
        path.write_bytes(content)
        with pytest.raises(IdxFormatError):
            load_idx(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError) as excinfo:
            load_idx(tmp_path / "nope")
        assert excinfo.value.code == 30

    def test_write_rejects_other_ranks(self, tmp_path):
        with pytest.raises(ShapeError):
            write_idx(tmp_path / "x", np.zeros((2, 2)))


# ============================================================================
# Preprocessing and datasets
# ============================================================================

class TestPreprocess:

    def test_zero_image(self):
        assert_array_equal(preprocess(np.zeros((1, 28, 28))), np.zeros((1, 1, 40, 40)))

    def test_corner_moves_to_offset(self):
        raw = np.zeros((1, 28, 28))
        raw[0, 0, 0] = 1.0
        out = preprocess(raw)
        assert out[0, 0, 6, 6] == 1.0
        assert out.sum() == 1.0

    def test_mass_preserved(self):
        raw = np.random.default_rng(0).uniform(size=(4, 28, 28))
        assert_allclose(preprocess(raw).sum(axis=(1, 2, 3)), raw.sum(axis=(1, 2)))

    def test_wrong_size(self):
        with pytest.raises(ShapeError):
            preprocess(np.zeros((1, 32, 32)))


class TestLoadMnist:

    def test_loads_both_splits(self, mnist_dir):
        train = load_mnist(mnist_dir, "train", dtype=np.float64)
        val = load_mnist(mnist_dir, "val", dtype=np.float64)
        assert train.images.shape == (64, 1, 40, 40)
        assert len(val) == 24
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0
        assert_array_equal(train.indices, np.arange(64))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError) as excinfo:
            load_mnist(tmp_path / "absent")
        assert MNIST_FILES["train"][0] in str(excinfo.value.path)

    def test_count_mismatch(self, tmp_path):
        image_name, label_name = MNIST_FILES["train"]
        write_idx(tmp_path / image_name, np.zeros((3, 28, 28)))
        write_idx(tmp_path / label_name, np.zeros(2, dtype=np.uint8))
        with pytest.raises(IdxFormatError):
            load_mnist(tmp_path)

    def test_unknown_split(self, mnist_dir):
        with pytest.raises(DataError):
            load_mnist(mnist_dir, "test")

    def test_pixel_stats(self, mnist_dir):
        train = load_mnist(mnist_dir, dtype=np.float64)
        mean, std = pixel_stats(train)
        assert 0.0 < mean < 0.5
        assert std > 0.0


class TestMnistSet:

    @pytest.fixture
    def dataset(self, rng):
        return MnistSet(make_images(30, rng), np.arange(30) % 10)

    def test_rejects_bad_labels(self, rng):
        with pytest.raises(DataError):
            MnistSet(make_images(2, rng), [0, 10])

    def test_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            MnistSet(np.zeros((2, 1, 28, 28)), [0, 1])

    def test_splits_are_disjoint_and_reproducible(self, dataset):
        train, val = make_splits(dataset, 20, 5, seed=3)
        again, _ = make_splits(dataset, 20, 5, seed=3)
        other, _ = make_splits(dataset, 20, 5, seed=4)
        assert len(train) == 20 and len(val) == 5
        assert not set(train.indices) & set(val.indices)
        assert_array_equal(train.indices, again.indices)
        assert not np.array_equal(train.indices, other.indices)

    def test_split_too_large(self, dataset):
        with pytest.raises(DataError):
            make_splits(dataset, 25, 6, seed=0)

    def test_subsample_keeps_order(self, dataset):
        sub = subsample(dataset, 10, seed=1)
        assert len(sub) == 10
        assert np.all(np.diff(sub.indices) > 0)
        assert subsample(dataset, None, seed=1) is dataset

    def test_tensor_dtype(self, dataset):
        assert dataset.tensor([0, 1], dtype=np.float32).dtype == np.float32


# ============================================================================
# Perturbations
# ============================================================================

class TestPerturbationSpec:

    def test_presets(self):
        assert PerturbationSpec.canonical().is_identity
        assert PerturbationSpec.rotation_augmented().rotation == (0.0, 360.0)
        suite = PerturbationSpec.affine_suite()
        assert (suite.shear, suite.scale) == (55.0, 0.5)
        assert not suite.rotation_only

    def test_invalid_ranges(self):
        with pytest.raises(ConfigError) as excinfo:
            PerturbationSpec(rotation=(10.0, 0.0), scale=1.5)
        assert set(excinfo.value.errors) == {"rotation", "scale"}

    def test_sample_modes(self):
        rng = np.random.default_rng(0)
        assert PerturbationSpec.rotation_augmented().sample(3, rng).mode is TransformMode.ROTATION
        assert PerturbationSpec.affine_suite().sample(3, rng).mode is TransformMode.RSST

    def test_suite_ranges(self):
        alpha = PerturbationSpec.affine_suite().sample(2000, np.random.default_rng(1), dtype=np.float64)
        values = alpha.values.data
        assert np.all(np.abs(values[:, 2]) <= math.radians(55.0))
        assert np.all((np.exp(values[:, 1]) >= 0.5) & (np.exp(values[:, 1]) <= 1.5))
        assert_array_equal(values[:, 3:], 0.0)

    def test_rotations_are_uniform(self):
        alpha = PerturbationSpec.rotation_augmented().sample(10_000, np.random.default_rng(0), dtype=np.float64)
        degrees = np.mod(np.rad2deg(alpha.angles()), 360.0)
        counts, _ = np.histogram(degrees, bins=36, range=(0.0, 360.0))
        assert chisquare(counts).pvalue > 0.01


class TestPerturb:

    @pytest.fixture
    def batch(self, rng):
        return make_images(6, rng)

    def test_identity_spec(self, batch, rng):
        out, alpha = perturb(batch, PerturbationSpec.canonical(), rng)
        assert_array_equal(out, batch)
        assert_array_equal(alpha.values.data, 0.0)

    def test_fixed_quarter_turn(self, batch, rng):
        out, _ = perturb(batch, PerturbationSpec(rotation=(90.0, 90.0)), rng)
        expected = warp(Tensor(batch), AffineParams.rotation([math.pi / 2] * 6, dtype=np.float64)).data
        assert_allclose(out, expected, atol=1e-12)
        assert_allclose(out, np.rot90(batch, k=1, axes=(2, 3)), atol=1e-5)

    def test_stays_in_unit_range(self, batch, rng):
        out, _ = perturb(batch, PerturbationSpec.affine_suite(), rng)
        assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-12

    def test_inverse_recovers_interior(self, batch, rng):
        out, alpha = perturb(batch, PerturbationSpec.rotation_augmented(), rng)
        restored = warp(Tensor(out), inverse(alpha)).data
        error = np.abs(restored - batch)[..., 8:-8, 8:-8].mean()
        assert error < 0.05

    def test_float32_input(self, batch, rng):
        out, alpha = perturb(batch.astype(np.float32), PerturbationSpec.rotation_augmented(), rng)
        assert out.dtype == np.float32
        assert alpha.values.dtype == np.float32
