"""Fused neural-network operations built on :class:`avae.tensor.Function`.

Convolutions use an im2col layout from ``sliding_window_view``; the
transposed convolution is implemented as the exact adjoint of :func:`conv2d`
so the two share their scatter/gather helpers.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import ShapeError
from .tensor import Function, Tensor

BCE_EPS = 1e-7


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[N, C, Hp, Wp] -> [N, C, Ho, Wo, kh, kw] strided view."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], stride: int) -> np.ndarray:
    """Scatter-add [N, Ho, Wo, C, kh, kw] patches into an [N, C, Hp, Wp] canvas."""
    out = np.zeros(shape, dtype=cols.dtype)
    _, ho, wo, _, kh, kw = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _require_rank(op: str, name: str, t: Tensor, rank: int) -> None:
    if t.ndim != rank:
        raise ShapeError(f"{op}: {name} must be {rank}-D", op=op, dim="rank", expected=rank, got=t.ndim)


class Conv2d(Function):
    def forward(self, x, w, b, stride: int = 1, padding: int = 0):
        self.stride, self.padding = stride, padding
        self.x_shape = x.shape
        self.w = w
        xp = _pad(x, padding)
        self.xp_shape = xp.shape
        self.win = _windows(xp, w.shape[2], w.shape[3], stride)
        out = np.tensordot(self.win, w, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + b[None, :, None, None]

    def backward(self, grad):
        gw = np.tensordot(grad, self.win, axes=([0, 2, 3], [0, 2, 3]))
        gb = grad.sum(axis=(0, 2, 3))
        cols = np.tensordot(grad, self.w, axes=([1], [0]))
        gxp = _col2im(cols, self.xp_shape, self.stride)
        p = self.padding
        h, w = self.x_shape[2], self.x_shape[3]
        gx = gxp[:, :, p:p + h, p:p + w]
        return gx, gw, gb


class ConvTranspose2d(Function):
    def forward(self, x, w, b, stride: int = 1, padding: int = 0):
        self.stride, self.padding = stride, padding
        self.x, self.w = x, w
        n, _, h, wd = x.shape
        _, cout, kh, kw = w.shape
        full = (n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw)
        cols = np.tensordot(x, w, axes=([1], [0])).reshape(n, h, wd, cout, kh, kw)
        canvas = _col2im(cols, full, stride)
        ho, wo = full[2] - 2 * padding, full[3] - 2 * padding
        return canvas[:, :, padding:padding + ho, padding:padding + wo] + b[None, :, None, None]

    def backward(self, grad):
        kh, kw = self.w.shape[2], self.w.shape[3]
        win = _windows(_pad(grad, self.padding), kh, kw, self.stride)
        gx = np.tensordot(win, self.w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(self.x, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = grad.sum(axis=(0, 2, 3))
        return gx, gw, gb


def _zero_bias(weight: Tensor, channels: int) -> Tensor:
    return Tensor(np.zeros(channels, dtype=weight.dtype))


def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N, C, H, W] with [K, C, kh, kw] kernels."""
    _require_rank("conv2d", "input", input, 4)
    _require_rank("conv2d", "weight", weight, 4)
    n, c, h, w = input.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError("conv2d: weight channels differ from input channels",
                         op="conv2d", dim=1, expected=c, got=wc)
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d: kernel larger than padded input", op="conv2d",
                         dim=(2, 3), expected=(h + 2 * padding, w + 2 * padding), got=(kh, kw))
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1", op="conv2d", dim="stride", got=stride)
    bias = bias if bias is not None else _zero_bias(weight, k)
    if bias.shape != (k,):
        raise ShapeError("conv2d: bias must have one entry per output channel",
                         op="conv2d", dim=0, expected=(k,), got=bias.shape)
    return Conv2d.apply(input, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; weight is [C_in, C_out, kh, kw]."""
    _require_rank("conv_transpose2d", "input", input, 4)
    _require_rank("conv_transpose2d", "weight", weight, 4)
    n, c, h, w = input.shape
    wc, cout, kh, kw = weight.shape
    if wc != c:
        raise ShapeError("conv_transpose2d: weight channels differ from input channels",
                         op="conv_transpose2d", dim=1, expected=c, got=wc)
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1 or stride < 1:
        raise ShapeError("conv_transpose2d: geometry gives an empty output",
                         op="conv_transpose2d", dim=(2, 3), got=(ho, wo))
    bias = bias if bias is not None else _zero_bias(weight, cout)
    if bias.shape != (cout,):
        raise ShapeError("conv_transpose2d: bias must have one entry per output channel",
                         op="conv_transpose2d", dim=0, expected=(cout,), got=bias.shape)
    return ConvTranspose2d.apply(input, weight, bias, stride=stride, padding=padding)


class Elu(Function):
    def forward(self, x):
        self.positive = x >= 0
        self.out = np.where(self.positive, x, np.expm1(np.minimum(x, 0)))
        return self.out

    def backward(self, grad):
        return grad * np.where(self.positive, 1.0, self.out + 1.0)


def elu(x: Tensor) -> Tensor:
    return Elu.apply(x)


class Sigmoid(Function):
    def forward(self, x):
        self.out = expit(x)
        return self.out

    def backward(self, grad):
        return grad * self.out * (1.0 - self.out)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


class Linear(Function):
    def forward(self, x, w, b):
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, grad):
        return grad @ self.w, grad.T @ self.x, grad.sum(axis=0)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x [N, in] @ weight[out, in].T + bias[out]."""
    _require_rank("linear", "input", x, 2)
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError("linear: weight does not match input features", op="linear",
                         dim=1, expected=x.shape[1], got=weight.shape)
    if bias.shape != (weight.shape[0],):
        raise ShapeError("linear: bias does not match output features", op="linear",
                         dim=0, expected=(weight.shape[0],), got=bias.shape)
    return Linear.apply(x, weight, bias)


@dataclass
class RunningStats:
    """Per-channel batch-norm statistics used in eval mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)

    def astype(self, dtype) -> "RunningStats":
        return RunningStats(self.mean.astype(dtype), self.var.astype(dtype), self.momentum, self.eps)


class BatchNorm2dTrain(Function):
    def forward(self, x, gamma, beta, running: RunningStats = None):
        axes = (0, 2, 3)
        self.count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        self.inv_std = 1.0 / np.sqrt(var + running.eps)
        self.xhat = (x - mu[None, :, None, None]) * self.inv_std[None, :, None, None]
        self.gamma = gamma
        m = running.momentum
        running.mean[...] = (1 - m) * running.mean + m * mu
        running.var[...] = (1 - m) * running.var + m * var * self.count / (self.count - 1)
        return gamma[None, :, None, None] * self.xhat + beta[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        gxhat = grad * self.gamma[None, :, None, None]
        s1 = gxhat.sum(axis=axes)[None, :, None, None]
        s2 = (gxhat * self.xhat).sum(axis=axes)[None, :, None, None]
        gx = (self.inv_std[None, :, None, None] / self.count) * (
            self.count * gxhat - s1 - self.xhat * s2
        )
        return gx, (grad * self.xhat).sum(axis=axes), grad.sum(axis=axes)


class BatchNorm2dEval(Function):
    def forward(self, x, gamma, beta, running: RunningStats = None):
        inv_std = 1.0 / np.sqrt(running.var + running.eps)
        self.scale = (gamma * inv_std)[None, :, None, None]
        self.xhat = (x - running.mean[None, :, None, None]) * inv_std[None, :, None, None]
        return gamma[None, :, None, None] * self.xhat + beta[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        return grad * self.scale, (grad * self.xhat).sum(axis=axes), grad.sum(axis=axes)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                training: bool) -> Tensor:
    """Per-channel normalization; train mode also updates ``running`` in place."""
    _require_rank("batchnorm2d", "input", x, 4)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d: gamma/beta must have one entry per channel",
                         op="batchnorm2d", dim=1, expected=(c,), got=(gamma.shape, beta.shape))
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("batchnorm2d: train mode needs at least 2 values per channel",
                             op="batchnorm2d", dim="N*H*W", expected=">= 2", got=count)
        return BatchNorm2dTrain.apply(x, gamma, beta, running=running)
    return BatchNorm2dEval.apply(x, gamma, beta, running=running)


class BinaryCrossEntropy(Function):
    def forward(self, p, target: np.ndarray = None, eps: float = BCE_EPS):
        self.target = target
        self.inside = (p > eps) & (p < 1 - eps)
        self.pc = np.clip(p, eps, 1 - eps)
        return -(target * np.log(self.pc) + (1 - target) * np.log(1 - self.pc))

    def backward(self, grad):
        t, pc = self.target, self.pc
        return grad * np.where(self.inside, (pc - t) / (pc * (1 - pc)), 0.0)


def binary_cross_entropy(p: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise Bernoulli negative log-likelihood of ``target`` under mean ``p``."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    if target.shape != p.shape:
        raise ShapeError("binary_cross_entropy: target shape differs", op="binary_cross_entropy",
                         expected=p.shape, got=target.shape)
    return BinaryCrossEntropy.apply(p, target=target)
