"""Differentiable affine layers: parameterization, sampling grids, bilinear sampling.

Conventions
-----------
* Images span [-1, 1]^2 in normalized coordinates; the centre of pixel
  (row i, col j) of an H x W image sits at x = (2j+1)/W - 1, y = (2i+1)/H - 1.
* A sampling grid maps every *output* pixel to the *input* location it reads
  from: ``warp(x, a)(p) = x(M(a) [p, 1])``.
* ``RSST`` parameters (theta, log_scale, shear, tx, ty) compose as
  translate . rotate . shear . scale, i.e. ``M = [e^s R(theta) Sh(shear) | t]``
  with ``Sh = [[1, tan(shear)], [0, 1]]``.
* Out-of-range taps read zero.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional

import numpy as np

from .exceptions import ShapeError, SingularTransformError
from .tensor import Function, Tensor, get_default_dtype, reshape

SINGULAR_DET = 1e-8


class TransformMode(str, Enum):
    FULL6 = "full6"
    ROTATION = "rotation"
    RSST = "rsst"

    @property
    def n_params(self) -> int:
        return {"full6": 6, "rotation": 1, "rsst": 5}[self.value]

    def identity_values(self) -> np.ndarray:
        return {
            "full6": np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            "rotation": np.zeros(1),
            "rsst": np.zeros(5),
        }[self.value]


@dataclass
class AffineParams:
    """A batch of affine transforms: ``values`` is [N, mode.n_params]."""

    mode: TransformMode
    values: Tensor

    def __post_init__(self):
        self.mode = TransformMode(self.mode)
        if not isinstance(self.values, Tensor):
            self.values = Tensor(np.asarray(self.values, dtype=float), dtype=get_default_dtype())
        if self.values.ndim == 1:
            self.values = reshape(self.values, (1, self.values.shape[0]))
        if self.values.ndim != 2 or self.values.shape[1] != self.mode.n_params:
            raise ShapeError(f"{self.mode.value} parameters need {self.mode.n_params} values per transform",
                             op="AffineParams", dim=1, expected=self.mode.n_params, got=self.values.shape)

    @classmethod
    def identity(cls, mode: TransformMode = TransformMode.ROTATION, n: int = 1,
                 dtype: Any = None) -> "AffineParams":
        mode = TransformMode(mode)
        values = np.tile(mode.identity_values(), (n, 1))
        return cls(mode, Tensor(values, dtype=dtype or get_default_dtype()))

    @classmethod
    def rotation(cls, theta: Any, dtype: Any = None) -> "AffineParams":
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return cls(TransformMode.ROTATION, Tensor(theta[:, None], dtype=dtype or get_default_dtype()))

    @classmethod
    def rsst(cls, theta: Any = 0.0, log_scale: Any = 0.0, shear: Any = 0.0,
             tx: Any = 0.0, ty: Any = 0.0, dtype: Any = None) -> "AffineParams":
        cols = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float))
                                     for v in (theta, log_scale, shear, tx, ty)))
        return cls(TransformMode.RSST, Tensor(np.stack(cols, axis=1), dtype=dtype or get_default_dtype()))

    @classmethod
    def from_matrix(cls, matrix: Any, dtype: Any = None) -> "AffineParams":
        m = np.asarray(matrix, dtype=float).reshape(-1, 6)
        return cls(TransformMode.FULL6, Tensor(m, dtype=dtype or get_default_dtype()))

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    def detach(self) -> "AffineParams":
        return AffineParams(self.mode, self.values.detach())

    def numpy(self) -> np.ndarray:
        return self.values.data

    def take(self, indices: Any) -> "AffineParams":
        return AffineParams(self.mode, Tensor(self.values.data[indices].copy()))

    def angles(self) -> np.ndarray:
        """Rotation component in radians, wrapped to (-pi, pi]."""
        if self.mode is TransformMode.FULL6:
            m = self.values.data
            theta = np.arctan2(m[:, 3], m[:, 0])
        else:
            theta = self.values.data[:, 0]
        return wrap_angle(theta)

    def matrix(self) -> np.ndarray:
        """[N, 2, 3] numpy matrices, no graph."""
        return _matrix_and_jacobian(self.values.data, self.mode)[0]


def wrap_angle(theta: Any) -> np.ndarray:
    wrapped = np.mod(np.asarray(theta) + math.pi, 2 * math.pi) - math.pi
    return np.where(wrapped == -math.pi, math.pi, wrapped)


def homogeneous(matrix: np.ndarray) -> np.ndarray:
    """[..., 2, 3] -> [..., 3, 3] with a (0, 0, 1) bottom row."""
    matrix = np.asarray(matrix)
    bottom = np.broadcast_to(np.array([0.0, 0.0, 1.0], dtype=matrix.dtype), matrix.shape[:-2] + (1, 3))
    return np.concatenate([matrix, bottom], axis=-2)


def _matrix_and_jacobian(values: np.ndarray, mode: TransformMode):
    """Flat row-major matrices [N, 6] reshaped to [N, 2, 3] and d(flat)/d(values) [N, 6, k]."""
    n = values.shape[0]
    dtype = values.dtype
    if mode is TransformMode.FULL6:
        jac = np.broadcast_to(np.eye(6, dtype=dtype), (n, 6, 6))
        return values.reshape(n, 2, 3).copy(), jac

    theta = values[:, 0]
    c, s = np.cos(theta), np.sin(theta)
    zero = np.zeros_like(theta)
    if mode is TransformMode.ROTATION:
        flat = np.stack([c, -s, zero, s, c, zero], axis=1)
        d_theta = np.stack([-s, -c, zero, c, -s, zero], axis=1)
        return flat.reshape(n, 2, 3), d_theta[:, :, None]

    log_scale, shear, tx, ty = values[:, 1], values[:, 2], values[:, 3], values[:, 4]
    k = np.tan(shear)
    scale = np.exp(log_scale)
    one = np.ones_like(theta)
    l00, l01 = scale * c, scale * (c * k - s)
    l10, l11 = scale * s, scale * (s * k + c)
    flat = np.stack([l00, l01, tx, l10, l11, ty], axis=1)
    sec2 = 1.0 + k * k
    jac = np.stack([
        np.stack([-s, -s * k - c, zero, c, c * k - s, zero], axis=1) * scale[:, None],
        np.stack([l00, l01, zero, l10, l11, zero], axis=1),
        np.stack([zero, c * sec2, zero, zero, s * sec2, zero], axis=1) * scale[:, None],
        np.stack([zero, zero, one, zero, zero, zero], axis=1),
        np.stack([zero, zero, zero, zero, zero, one], axis=1),
    ], axis=2)
    return flat.reshape(n, 2, 3), jac


class ToMatrix(Function):
    def forward(self, values, mode: TransformMode = TransformMode.FULL6):
        matrix, self.jac = _matrix_and_jacobian(values, mode)
        return matrix

    def backward(self, grad):
        n = grad.shape[0]
        return np.einsum("ni,nik->nk", grad.reshape(n, 6), self.jac)


def to_matrix(alpha: AffineParams) -> Tensor:
    """[N, 2, 3] matrices, differentiable w.r.t. ``alpha.values``."""
    return ToMatrix.apply(alpha.values, mode=alpha.mode)


def _det_2x2(a: np.ndarray) -> np.ndarray:
    return a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]


def _inverse_2x2(a: np.ndarray):
    det = _det_2x2(a)
    inv = np.empty_like(a)
    inv[:, 0, 0] = a[:, 1, 1] / det
    inv[:, 0, 1] = -a[:, 0, 1] / det
    inv[:, 1, 0] = -a[:, 1, 0] / det
    inv[:, 1, 1] = a[:, 0, 0] / det
    return inv, det


class InvertAffine(Function):
    def forward(self, m):
        self.t = m[:, :, 2]
        self.b, _ = _inverse_2x2(m[:, :, :2])
        u = -np.einsum("nij,nj->ni", self.b, self.t)
        return np.concatenate([self.b, u[:, :, None]], axis=2)

    def backward(self, grad):
        g_b = grad[:, :, :2] - np.einsum("ni,nj->nij", grad[:, :, 2], self.t)
        bt = self.b.transpose(0, 2, 1)
        g_a = -np.einsum("nij,njk,nkl->nil", bt, g_b, bt)
        g_t = -np.einsum("nij,nj->ni", bt, grad[:, :, 2])
        return np.concatenate([g_a, g_t[:, :, None]], axis=2)


def inverse(alpha: AffineParams) -> AffineParams:
    """The inverse transform as Full6 parameters, differentiable w.r.t. ``alpha``."""
    matrix = to_matrix(alpha)
    det = _det_2x2(matrix.data[:, :, :2])
    worst = int(np.argmin(np.abs(det)))
    if np.abs(det[worst]) <= SINGULAR_DET:
        raise SingularTransformError(f"affine transform {worst} is not invertible", det=float(det[worst]))
    inv = InvertAffine.apply(matrix)
    return AffineParams(TransformMode.FULL6, reshape(inv, (alpha.batch_size, 6)))


@dataclass
class SamplingGrid:
    """Per-output-pixel input coordinates; ``coords`` is [N, H, W, 2] as (x, y)."""

    height: int
    width: int
    coords: Tensor


def identity_coords(height: int, width: int, dtype: Any = None) -> np.ndarray:
    """[H, W, 2] normalized pixel-centre coordinates."""
    dtype = dtype or get_default_dtype()
    xs = (2 * np.arange(width, dtype=dtype) + 1) / dtype.type(width) - 1
    ys = (2 * np.arange(height, dtype=dtype) + 1) / dtype.type(height) - 1
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1).astype(dtype)


class AffineGrid(Function):
    def forward(self, matrix, base: np.ndarray = None, height: int = 0, width: int = 0):
        self.base = base
        coords = np.einsum("pj,nij->npi", base, matrix)
        return coords.reshape(matrix.shape[0], height, width, 2)

    def backward(self, grad):
        n = grad.shape[0]
        return np.einsum("npi,pj->nij", grad.reshape(n, -1, 2), self.base)


def grid_generate(alpha: AffineParams, height: int, width: int) -> SamplingGrid:
    if height < 2 or width < 2:
        raise ShapeError("grid_generate needs at least 2x2 outputs", op="grid_generate",
                         dim=(0, 1), expected=">= 2", got=(height, width))
    matrix = to_matrix(alpha)
    pts = identity_coords(height, width, matrix.dtype).reshape(-1, 2)
    base = np.concatenate([pts, np.ones((pts.shape[0], 1), dtype=matrix.dtype)], axis=1)
    coords = AffineGrid.apply(matrix, base=base, height=height, width=width)
    return SamplingGrid(height, width, coords)


def _snap(index: np.ndarray, extent: int) -> np.ndarray:
    # Rounding noise from the normalize/unnormalize round trip would otherwise
    # leak a 1e-16 share of the neighbouring pixel into exact lattice hits.
    tol = 16 * np.finfo(index.dtype).eps * max(extent, 1)
    nearest = np.rint(index)
    return np.where(np.abs(index - nearest) < tol, nearest, index)


class BilinearSample(Function):
    def forward(self, image, coords):
        n, c, h, w = image.shape
        ix = _snap(((coords[..., 0] + 1) * w - 1) / 2, w)
        iy = _snap(((coords[..., 1] + 1) * h - 1) / 2, h)
        x0f, y0f = np.floor(ix), np.floor(iy)
        wx, wy = ix - x0f, iy - y0f
        x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
        x1, y1 = x0 + 1, y0 + 1

        self.image_shape = image.shape
        self.n_idx = np.broadcast_to(np.arange(n)[:, None, None], ix.shape)
        self.scale = (w / 2.0, h / 2.0)
        self.wx, self.wy = wx, wy
        img = image.transpose(0, 2, 3, 1)

        self.taps = []
        values = []
        for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
            valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            yc, xc = np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)
            v = img[self.n_idx, yc, xc] * valid[..., None]
            self.taps.append((yc, xc, valid))
            values.append(v)
        self.values = values

        v00, v01, v10, v11 = values
        wx_, wy_ = wx[..., None], wy[..., None]
        out = (v00 * ((1 - wy_) * (1 - wx_)) + v01 * ((1 - wy_) * wx_)
               + v10 * (wy_ * (1 - wx_)) + v11 * (wy_ * wx_))
        return out.transpose(0, 3, 1, 2)

    def backward(self, grad):
        g = grad.transpose(0, 2, 3, 1)
        wx, wy = self.wx[..., None], self.wy[..., None]
        weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)

        n, c, h, w = self.image_shape
        g_img = np.zeros((n, h, w, c), dtype=grad.dtype)
        for (yc, xc, valid), weight in zip(self.taps, weights):
            np.add.at(g_img, (self.n_idx, yc, xc), g * weight * valid[..., None])

        v00, v01, v10, v11 = self.values
        d_ix = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy) * g
        d_iy = ((v10 - v00) * (1 - wx) + (v11 - v01) * wx) * g
        g_coords = np.stack([d_ix.sum(axis=-1) * self.scale[0],
                             d_iy.sum(axis=-1) * self.scale[1]], axis=-1)
        return g_img.transpose(0, 3, 1, 2), g_coords


def bilinear_sample(image: Tensor, grid: SamplingGrid) -> Tensor:
    """Read ``image`` [N, C, H, W] at ``grid`` coordinates with zeros padding."""
    if image.ndim != 4:
        raise ShapeError("bilinear_sample: image must be 4-D", op="bilinear_sample",
                         dim="rank", expected=4, got=image.ndim)
    if grid.coords.shape[0] != image.shape[0]:
        raise ShapeError("bilinear_sample: grid batch differs from image batch",
                         op="bilinear_sample", dim=0, expected=image.shape[0], got=grid.coords.shape[0])
    return BilinearSample.apply(image, grid.coords)


def warp(image: Tensor, alpha: AffineParams) -> Tensor:
    """Resample ``image`` through ``alpha``; output keeps the input size."""
    return bilinear_sample(image, grid_generate(alpha, image.shape[2], image.shape[3]))
