"""Convolutional VAE on 40x40 single-channel images.

Encoder: four stride-2 convolutions (kernel 4, padding 1), 40 -> 20 -> 10 -> 5
-> 2, batch norm on the first three, ELU everywhere, then two linear heads for
the posterior mean and log-variance. Decoder: a linear layer back to the
encoder's final 2x2 feature map followed by four transposed convolutions
2 -> 5 -> 10 -> 20 -> 40 and a sigmoid giving Bernoulli means.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .exceptions import ConfigError, DomainError, ShapeError
from .functional import (
    RunningStats,
    batchnorm2d,
    binary_cross_entropy,
    conv2d,
    conv_transpose2d,
    elu,
    linear,
    sigmoid,
)
from .tensor import Tensor, exp, get_default_dtype, reshape
from .validation import validate

logger = logging.getLogger(__name__)

ENCODER_KERNEL = 4
DECODER_KERNELS = (5, 4, 4, 4)
FEATURE_HW = 2


@dataclass
class VaeConfig:
    latent_size: int = 8
    encoder_channels: Tuple[int, ...] = (32, 32, 64, 16)
    decoder_channels: Tuple[int, ...] = (32, 16, 16, 1)
    input_hw: int = 40
    batchnorm_layers: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    normalize_input: bool = False
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        validate(
            self,
            latent_size='positive',
            input_hw={'choices': (40,)},
            batchnorm_layers={'min': 0, 'max': 3},
            bn_momentum={'min': 0.0, 'max': 1.0},
            bn_eps={'min': 1e-12},
            input_std={'min': 1e-12},
        )
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 4:
            raise ConfigError({'channels': 'encoder and decoder need four layers each'})
        if self.decoder_channels[-1] != 1:
            raise ConfigError({'decoder_channels': 'last decoder layer must output one channel'})

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['encoder_channels'] = list(self.encoder_channels)
        data['decoder_channels'] = list(self.decoder_channels)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VaeConfig":
        return cls(**data)


@dataclass
class LatentStats:
    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ShapeError("mu and logvar shapes differ", op="LatentStats",
                             expected=self.mu.shape, got=self.logvar.shape)


@dataclass
class LossReport:
    """Negative ELBO split into its terms.

    ``recon``/``kl``/``total`` are batch means (scalar tensors); the
    ``sample_*`` fields keep the per-sample values [N] they average.
    """

    recon: Tensor
    kl: Tensor
    total: Tensor
    sample_recon: Tensor
    sample_kl: Tensor
    sample_total: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {'total': self.total.item(), 'recon': self.recon.item(), 'kl': self.kl.item()}

    def detach(self) -> "LossReport":
        return LossReport(*(t.detach() for t in (self.recon, self.kl, self.total,
                                                  self.sample_recon, self.sample_kl, self.sample_total)))

    @classmethod
    def from_samples(cls, sample_recon: np.ndarray, sample_kl: np.ndarray) -> "LossReport":
        """Build a detached report from per-sample values."""
        sample_recon = np.asarray(sample_recon)
        sample_kl = np.asarray(sample_kl, dtype=sample_recon.dtype)
        recon = Tensor(np.asarray(sample_recon.mean(), dtype=sample_recon.dtype))
        kl = Tensor(np.asarray(sample_kl.mean(), dtype=sample_recon.dtype))
        return cls(recon, kl, Tensor(recon.data + kl.data),
                   Tensor(sample_recon), Tensor(sample_kl), Tensor(sample_recon + sample_kl))


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype: np.dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class VaeModel:
    """Parameters, batch-norm running statistics and the train/eval flag.

    Parameters are kept in a name-ordered dict; the order is the one used by
    :meth:`parameters`, the optimizer's moment buffers and checkpoints.
    """

    def __init__(self, config: VaeConfig, params: Dict[str, Tensor],
                 running: Dict[str, RunningStats], training: bool = True):
        self.config = config
        self.params = params
        self.running = running
        self.training = training

    @classmethod
    def init(cls, config: Optional[VaeConfig] = None, rng: Optional[np.random.Generator] = None,
             dtype: Any = None) -> "VaeModel":
        config = config or VaeConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = np.dtype(dtype or get_default_dtype())
        params: Dict[str, Tensor] = {}
        running: Dict[str, RunningStats] = {}

        def batchnorm(prefix: str, channels: int):
            params[f"{prefix}.gamma"] = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
            params[f"{prefix}.beta"] = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
            running[prefix] = RunningStats.init(channels, dtype, config.bn_momentum, config.bn_eps)

        k = ENCODER_KERNEL
        c_in = 1
        for i, c_out in enumerate(config.encoder_channels):
            fan_in = c_in * k * k
            params[f"enc.conv{i}.weight"] = _uniform(rng, (c_out, c_in, k, k), fan_in, dtype)
            params[f"enc.conv{i}.bias"] = _uniform(rng, (c_out,), fan_in, dtype)
            if i < config.batchnorm_layers:
                batchnorm(f"enc.bn{i}", c_out)
            c_in = c_out

        features = config.encoder_channels[-1] * FEATURE_HW * FEATURE_HW
        for head in ("mu", "logvar"):
            params[f"enc.{head}.weight"] = _uniform(rng, (config.latent_size, features), features, dtype)
            params[f"enc.{head}.bias"] = _uniform(rng, (config.latent_size,), features, dtype)

        params["dec.fc.weight"] = _uniform(rng, (features, config.latent_size), config.latent_size, dtype)
        params["dec.fc.bias"] = _uniform(rng, (features,), config.latent_size, dtype)
        c_in = config.encoder_channels[-1]
        for i, (c_out, kernel) in enumerate(zip(config.decoder_channels, DECODER_KERNELS)):
            fan_in = c_out * kernel * kernel
            params[f"dec.tconv{i}.weight"] = _uniform(rng, (c_in, c_out, kernel, kernel), fan_in, dtype)
            params[f"dec.tconv{i}.bias"] = _uniform(rng, (c_out,), fan_in, dtype)
            if i < config.batchnorm_layers:
                batchnorm(f"dec.bn{i}", c_out)
            c_in = c_out

        logger.debug("initialized VAE with %d tensors, latent=%d, dtype=%s",
                     len(params), config.latent_size, dtype)
        return cls(config, params, running)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def train(self) -> "VaeModel":
        self.training = True
        return self

    def eval(self) -> "VaeModel":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def frozen(self) -> "VaeModel":
        """Eval-mode view sharing storage with this model but recording no parameter grads."""
        params = {name: p.detach() for name, p in self.params.items()}
        return VaeModel(self.config, params, self.running, training=False)

    def astype(self, dtype: Any) -> "VaeModel":
        params = {name: Tensor(p.data.astype(dtype), requires_grad=True) for name, p in self.params.items()}
        running = {name: r.astype(dtype) for name, r in self.running.items()}
        return VaeModel(self.config, params, running, self.training)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.params.items()}
        for name, r in self.running.items():
            state[f"{name}.running_mean"] = r.mean
            state[f"{name}.running_var"] = r.var
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ShapeError("state does not match the model layout", op="load_state_dict",
                             expected=missing, got=extra)
        for name, p in self.params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name} has the wrong shape", op="load_state_dict",
                                 expected=p.shape, got=value.shape)
            p.data[...] = value
            p.grad = None
        for name, r in self.running.items():
            r.mean[...] = state[f"{name}.running_mean"]
            r.var[...] = state[f"{name}.running_var"]


def _norm_act(model: VaeModel, h: Tensor, prefix: str, index: int) -> Tensor:
    if index < model.config.batchnorm_layers:
        name = f"{prefix}.bn{index}"
        h = batchnorm2d(h, model.params[f"{name}.gamma"], model.params[f"{name}.beta"],
                        model.running[name], model.training)
    return elu(h)


def encode(model: VaeModel, x: Tensor) -> LatentStats:
    hw = model.config.input_hw
    if x.ndim != 4 or x.shape[1:] != (1, hw, hw):
        raise ShapeError(f"encode expects [N, 1, {hw}, {hw}] images", op="encode",
                         dim=(1, 2, 3), expected=(1, hw, hw), got=x.shape[1:])
    p = model.params
    h = x
    if model.config.normalize_input:
        h = (h - model.config.input_mean) / model.config.input_std
    for i in range(len(model.config.encoder_channels)):
        h = conv2d(h, p[f"enc.conv{i}.weight"], p[f"enc.conv{i}.bias"], stride=2, padding=1)
        h = _norm_act(model, h, "enc", i)
    h = reshape(h, (x.shape[0], -1))
    mu = linear(h, p["enc.mu.weight"], p["enc.mu.bias"])
    logvar = linear(h, p["enc.logvar.weight"], p["enc.logvar.bias"])
    return LatentStats(mu, logvar)


def draw_latent_noise(rng: np.random.Generator, n: int, latent_size: int, dtype: Any = None) -> np.ndarray:
    """Standard normal draws for :func:`reparameterize`, always sampled in f64."""
    return rng.standard_normal((n, latent_size)).astype(dtype or get_default_dtype())


def reparameterize(stats: LatentStats, rng: Optional[np.random.Generator] = None,
                   eps: Optional[np.ndarray] = None) -> Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) from ``rng`` unless given."""
    if eps is None:
        if rng is None:
            raise ConfigError({"eps": "reparameterize needs an rng or pre-drawn eps"})
        eps = draw_latent_noise(rng, *stats.mu.shape, dtype=stats.mu.dtype)
    eps = np.asarray(eps, dtype=stats.mu.dtype)
    if eps.shape != stats.mu.shape:
        raise ShapeError("latent noise shape differs from mu", op="reparameterize",
                         expected=stats.mu.shape, got=eps.shape)
    return stats.mu + exp(stats.logvar * 0.5) * Tensor(eps)


def decode(model: VaeModel, z: Tensor) -> Tensor:
    latent = model.config.latent_size
    if z.ndim != 2 or z.shape[1] != latent:
        raise ShapeError("decode: latent dimension differs from the model", op="decode",
                         dim=1, expected=latent, got=z.shape)
    p = model.params
    h = elu(linear(z, p["dec.fc.weight"], p["dec.fc.bias"]))
    h = reshape(h, (z.shape[0], model.config.encoder_channels[-1], FEATURE_HW, FEATURE_HW))
    last = len(model.config.decoder_channels) - 1
    for i in range(last + 1):
        h = conv_transpose2d(h, p[f"dec.tconv{i}.weight"], p[f"dec.tconv{i}.bias"], stride=2, padding=1)
        if i < last:
            h = _norm_act(model, h, "dec", i)
    return sigmoid(h)


def elbo_loss(x: Any, x_recon: Tensor, stats: LatentStats) -> LossReport:
    """Single-sample negative ELBO: summed Bernoulli NLL plus analytic Gaussian KL."""
    target = x.data if isinstance(x, Tensor) else np.asarray(x)
    if target.shape != x_recon.shape:
        raise ShapeError("elbo_loss: target and reconstruction shapes differ", op="elbo_loss",
                         expected=x_recon.shape, got=target.shape)
    if target.size and (target.min() < 0 or target.max() > 1):
        raise DomainError("pixel values must lie in [0, 1]",
                          low=float(target.min()), high=float(target.max()))

    sample_recon = binary_cross_entropy(x_recon, target).sum(axis=(1, 2, 3))
    mu, logvar = stats.mu, stats.logvar
    sample_kl = ((mu * mu + exp(logvar) - 1.0 - logvar) * 0.5).sum(axis=1)
    recon = sample_recon.mean()
    kl = sample_kl.mean()
    return LossReport(recon, kl, recon + kl, sample_recon, sample_kl, sample_recon + sample_kl)


def vae_forward(model: VaeModel, x: Tensor, rng: Optional[np.random.Generator] = None,
                eps: Optional[np.ndarray] = None) -> Tuple[Tensor, LossReport]:
    stats = encode(model, x)
    z = reparameterize(stats, rng, eps)
    x_recon = decode(model, z)
    return x_recon, elbo_loss(x, x_recon, stats)
