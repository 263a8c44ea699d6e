import os
from pathlib import Path

import numpy as np
import pytest

from avae.data import MNIST_FILES, write_idx
from avae.tensor import Tensor, set_default_dtype
from avae.vae import VaeConfig, VaeModel


@pytest.fixture(autouse=True)
def restore_default_dtype():
    yield
    set_default_dtype("f32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    set_default_dtype("f64")
    yield np.float64


def make_strokes(n: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """Asymmetric L-shaped strokes with soft edges, values in [0, 1]: [n, size, size]."""
    images = np.zeros((n, size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for k in range(n):
        cx, cy = rng.uniform(0.4 * size, 0.6 * size, size=2)
        length = rng.uniform(0.2 * size, 0.3 * size)
        vertical = np.exp(-((xx - cx) ** 2) / 2.0) * (np.abs(yy - cy) < length)
        foot = np.exp(-((yy - cy - length) ** 2) / 2.0) * ((xx > cx) & (xx < cx + 0.6 * length))
        images[k] = np.clip(vertical + foot, 0.0, 1.0)
    return images


def make_images(n: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """[n, 1, 40, 40] padded strokes."""
    out = np.zeros((n, 1, 40, 40), dtype=dtype)
    out[:, 0, 6:34, 6:34] = make_strokes(n, rng)
    return out


@pytest.fixture
def images(rng):
    return make_images(4, rng)


@pytest.fixture
def small_model(float64):
    return VaeModel.init(VaeConfig(latent_size=2), np.random.default_rng(7), dtype=np.float64)


@pytest.fixture
def mnist_dir(tmp_path: Path) -> Path:
    """A tiny MNIST lookalike in IDX format: 64 training and 24 validation images."""
    gen = np.random.default_rng(99)
    for split, n in (("train", 64), ("val", 24)):
        image_name, label_name = MNIST_FILES[split]
        write_idx(tmp_path / image_name, make_strokes(n, gen))
        write_idx(tmp_path / label_name, np.arange(n) % 10)
    return tmp_path


def mnist_dir_from_env():
    path = os.environ.get("AVAE_MNIST_DIR")
    return Path(path) if path else None


def as_tensor(array, requires_grad=False):
    return Tensor(np.array(array, dtype=np.float64), requires_grad=requires_grad)
