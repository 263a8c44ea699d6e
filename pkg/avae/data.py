"""MNIST ingestion, 40x40 padding and affine perturbations.

IDX files are read with ``struct`` (big-endian header: magic, then one uint32
per dimension) and may be gzip-compressed. Loaded pixels are scaled to [0, 1].
"""

import gzip
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .affine import AffineParams, warp
from .exceptions import DataError, IdxFormatError, ShapeError
from .tensor import Tensor, get_default_dtype, no_grad
from .validation import validate

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
UBYTE = 0x08
RAW_HW = 28
PAD = 6
IMAGE_HW = RAW_HW + 2 * PAD

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "val": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

PERTURB_CHUNK = 1024


@dataclass
class MnistSet:
    """Images [N, 1, 40, 40] in [0, 1], integer labels and stable sample indices."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.indices is None:
            self.indices = np.arange(len(self.labels), dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1:] != (1, IMAGE_HW, IMAGE_HW):
            raise ShapeError("MnistSet images must be [N, 1, 40, 40]", op="MnistSet",
                             dim=(1, 2, 3), expected=(1, IMAGE_HW, IMAGE_HW), got=self.images.shape)
        if not (len(self.images) == len(self.labels) == len(self.indices)):
            raise DataError("images, labels and indices differ in length",
                            images=len(self.images), labels=len(self.labels))
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise DataError("labels must lie in [0, 9]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, positions: Any) -> "MnistSet":
        positions = np.asarray(positions, dtype=np.int64)
        return MnistSet(self.images[positions], self.labels[positions], self.split, self.indices[positions])

    def tensor(self, positions: Any = None, dtype: Any = None) -> Tensor:
        images = self.images if positions is None else self.images[positions]
        return Tensor(images, dtype=dtype or get_default_dtype())


@dataclass
class PerturbationSpec:
    """Ranges for random affine perturbations.

    ``rotation`` is a [lo, hi) range in degrees, ``shear`` a maximum angle in
    degrees, ``scale`` a maximum fractional deviation from 1 and
    ``translation`` a maximum shift in normalized image units.
    """

    rotation: Tuple[float, float] = (0.0, 0.0)
    shear: float = 0.0
    scale: float = 0.0
    translation: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        self.rotation = (float(self.rotation[0]), float(self.rotation[1]))
        validate(
            self,
            rotation='ordered',
            shear={'min': 0.0, 'max': 89.0},
            scale={'min': 0.0, 'max': 0.99},
            translation={'min': 0.0, 'max': 1.0},
        )

    @classmethod
    def canonical(cls) -> "PerturbationSpec":
        return cls()

    @classmethod
    def rotation_augmented(cls, seed: Optional[int] = None) -> "PerturbationSpec":
        return cls(rotation=(0.0, 360.0), seed=seed)

    @classmethod
    def affine_suite(cls, seed: Optional[int] = None) -> "PerturbationSpec":
        return cls(rotation=(0.0, 360.0), shear=55.0, scale=0.5, seed=seed)

    @property
    def rotation_only(self) -> bool:
        return self.shear == 0 and self.scale == 0 and self.translation == 0

    @property
    def is_identity(self) -> bool:
        return self.rotation_only and self.rotation == (0.0, 0.0)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['rotation'] = list(self.rotation)
        return data

    def sample(self, n: int, rng: np.random.Generator, dtype: Any = None) -> AffineParams:
        """Draw ``n`` transforms; every field is drawn for every sample."""
        lo, hi = self.rotation
        theta = np.deg2rad(rng.uniform(lo, hi, size=n))
        shear = np.deg2rad(rng.uniform(-self.shear, self.shear, size=n))
        log_scale = np.log(rng.uniform(1.0 - self.scale, 1.0 + self.scale, size=n))
        shift = rng.uniform(-self.translation, self.translation, size=(2, n))
        if self.rotation_only:
            return AffineParams.rotation(theta, dtype=dtype)
        return AffineParams.rsst(theta, log_scale, shear, shift[0], shift[1], dtype=dtype)


def _open(path: Path):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def load_idx(path: Union[str, Path]) -> np.ndarray:
    """Read an unsigned-byte IDX file.

    Image files (magic 0x803) come back as float [N, H, W] scaled to [0, 1];
    label files (magic 0x801) as int64 [N].
    """
    path = Path(path)
    try:
        with _open(path) as f:
            payload = f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}", path=path) from exc

    if len(payload) < 4:
        raise IdxFormatError("file is too short for an IDX header", path=path, size=len(payload))
    (magic,) = struct.unpack(">I", payload[:4])
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise IdxFormatError("bad IDX magic", path=path, magic=f"0x{magic:08x}")

    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(payload) < header:
        raise IdxFormatError("truncated IDX header", path=path, size=len(payload))
    dims = struct.unpack(">" + "I" * ndim, payload[4:header])
    expected = int(np.prod(dims))
    body = len(payload) - header
    if body < expected:
        raise IdxFormatError("truncated IDX payload", path=path, expected=expected, got=body)
    if body > expected:
        raise IdxFormatError("IDX payload longer than its declared dimensions",
                             path=path, expected=expected, got=body)

    data = np.frombuffer(payload, dtype=np.uint8, offset=header).reshape(dims)
    logger.debug("read %s: magic=0x%08x dims=%s", path, magic, dims)
    if magic == LABEL_MAGIC:
        return data.astype(np.int64)
    return data.astype(np.float64) / 255.0


def write_idx(path: Union[str, Path], array: np.ndarray) -> Path:
    """Write images [N, H, W] (floats in [0, 1] or uint8) or labels [N] as IDX."""
    path = Path(path)
    array = np.asarray(array)
    if array.ndim == 3:
        magic = IMAGE_MAGIC
    elif array.ndim == 1:
        magic = LABEL_MAGIC
    else:
        raise ShapeError("write_idx takes images [N, H, W] or labels [N]", op="write_idx",
                         dim="rank", expected=(1, 3), got=array.ndim)
    if array.dtype.kind == "f":
        array = np.rint(np.clip(array, 0.0, 1.0) * 255.0)
    raw = array.astype(np.uint8)
    header = struct.pack(">I" + "I" * raw.ndim, magic, *raw.shape)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + raw.tobytes())
    return path


def preprocess(raw: np.ndarray, dtype: Any = None) -> np.ndarray:
    """Centre 28x28 images on a zero 40x40 canvas: [N, 28, 28] -> [N, 1, 40, 40]."""
    raw = np.asarray(raw)
    if raw.ndim == 2:
        raw = raw[None]
    if raw.ndim != 3 or raw.shape[1:] != (RAW_HW, RAW_HW):
        raise ShapeError("preprocess expects 28x28 images", op="preprocess",
                         dim=(1, 2), expected=(RAW_HW, RAW_HW), got=raw.shape)
    out = np.zeros((raw.shape[0], 1, IMAGE_HW, IMAGE_HW), dtype=dtype or raw.dtype)
    out[:, 0, PAD:PAD + RAW_HW, PAD:PAD + RAW_HW] = raw
    return out


def load_mnist(data_dir: Union[str, Path], split: str = "train", dtype: Any = None) -> MnistSet:
    if split not in MNIST_FILES:
        raise DataError(f"unknown split {split!r}", choices=sorted(MNIST_FILES))
    data_dir = Path(data_dir)
    found = []
    for name in MNIST_FILES[split]:
        candidates = [data_dir / name, data_dir / f"{name}.gz"]
        match = next((c for c in candidates if c.exists()), None)
        if match is None:
            raise DataError(f"missing MNIST file {name}", path=data_dir / name)
        found.append(match)

    images = load_idx(found[0])
    labels = load_idx(found[1])
    if images.ndim != 3 or labels.ndim != 1:
        raise IdxFormatError("image/label files are swapped or malformed", path=found[0])
    if len(images) != len(labels):
        raise IdxFormatError("image and label counts differ", path=found[1],
                             expected=len(images), got=len(labels))
    dataset = MnistSet(preprocess(images, dtype or get_default_dtype()), labels, split)
    logger.info("loaded %d %s images from %s", len(dataset), split, data_dir)
    return dataset


def perturb(x: np.ndarray, spec: PerturbationSpec,
            rng: np.random.Generator) -> Tuple[np.ndarray, AffineParams]:
    """Warp every image by a transform drawn from ``spec``; returns the drawn transforms too."""
    x = np.asarray(x)
    alpha = spec.sample(len(x), rng, dtype=x.dtype)
    out = np.empty_like(x)
    with no_grad():
        for start in range(0, len(x), PERTURB_CHUNK):
            chunk = slice(start, start + PERTURB_CHUNK)
            out[chunk] = warp(Tensor(x[chunk]), alpha.take(chunk)).data
    return out, alpha


def make_splits(dataset: MnistSet, train_n: int, val_n: int, seed: int) -> Tuple[MnistSet, MnistSet]:
    """Disjoint seed-reproducible random subsets."""
    if train_n < 0 or val_n < 0 or train_n + val_n > len(dataset):
        raise DataError("requested split is larger than the dataset",
                        requested=train_n + val_n, available=len(dataset))
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(order[:train_n]), dataset.subset(order[train_n:train_n + val_n])


def subsample(dataset: MnistSet, n: Optional[int], seed: int) -> MnistSet:
    """``n`` random samples in their original order; the full set when ``n`` is None."""
    if n is None or n >= len(dataset):
        return dataset
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(order[:n]))


def pixel_stats(dataset: MnistSet) -> Tuple[float, float]:
    """Mean and standard deviation of all pixels, for encoder-input normalization."""
    return float(dataset.images.mean()), float(dataset.images.std())
