"""The affine VAE: a VAE between two affine layers whose parameters are fitted.

``avae_loss`` warps the input by alpha, runs the VAE, warps the reconstruction
back through the inverse of alpha and scores it against the original input.
``fit_transform`` minimizes that loss over alpha with the model frozen:
every restart candidate is scored, the best ``survivors`` per sample are
descended for ``steps`` iterations, and the best iterate seen anywhere is
returned. Fitting is batched but per sample; nothing couples the samples of a
batch once batch norm runs in eval mode.
"""

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .affine import AffineParams, TransformMode, inverse, warp
from .caching import AlphaCache
from .data import MnistSet, PerturbationSpec, perturb
from .exceptions import CacheError
from .optim import OPTIMIZER_MODES, OptimizerState, step
from .tensor import Tensor, no_grad
from .validation import validate
from .vae import LossReport, VaeModel, draw_latent_noise, elbo_loss, vae_forward, decode, encode, reparameterize

logger = logging.getLogger(__name__)


class RestartSource(str, Enum):
    ROTATION_GRID = "rotation-grid"
    RANDOM = "random-near-identity"
    GRID_AND_RANDOM = "grid+random"
    CACHED = "cached"


@dataclass
class FitConfig:
    mode: TransformMode = TransformMode.ROTATION
    restarts: int = 8
    restart_source: RestartSource = RestartSource.ROTATION_GRID
    steps: int = 50
    lr_alpha: float = 0.05
    survivors: int = 1
    optimizer: str = "adam"
    # spread of the non-rotation parameters of random candidates
    jitter_log_scale: float = 0.2
    jitter_shear: float = 0.3
    jitter_translation: float = 0.1

    def __post_init__(self):
        self.mode = TransformMode(self.mode)
        self.restart_source = RestartSource(self.restart_source)
        validate(
            self,
            restarts='positive',
            steps='non_negative',
            survivors=['positive', {'max': self.restarts}],
            lr_alpha={'min': 0.0},
            optimizer={'choices': OPTIMIZER_MODES},
        )

    @classmethod
    def rotation_defaults(cls, **overrides: Any) -> "FitConfig":
        return cls(**{**dict(mode=TransformMode.ROTATION, restarts=8,
                             restart_source=RestartSource.ROTATION_GRID,
                             survivors=1, steps=50, lr_alpha=0.05), **overrides})

    @classmethod
    def affine_defaults(cls, **overrides: Any) -> "FitConfig":
        return cls(**{**dict(mode=TransformMode.RSST, restarts=16,
                             restart_source=RestartSource.GRID_AND_RANDOM,
                             survivors=2, steps=100, lr_alpha=0.05), **overrides})

    @classmethod
    def training_defaults(cls, **overrides: Any) -> "FitConfig":
        return cls(**{**dict(mode=TransformMode.ROTATION, restarts=8,
                             restart_source=RestartSource.ROTATION_GRID,
                             survivors=1, steps=10, lr_alpha=0.05), **overrides})

    def warm_start(self) -> "FitConfig":
        """Single cached candidate, same descent settings."""
        return replace(self, restarts=1, survivors=1, restart_source=RestartSource.CACHED)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['mode'] = self.mode.value
        data['restart_source'] = self.restart_source.value
        return data


@dataclass
class FitTrace:
    """``initial_losses`` [R, N] per candidate; ``curves`` [S, steps + 1, N] per survivor."""

    initial_losses: np.ndarray
    survivors: np.ndarray
    curves: np.ndarray

    @property
    def best_initial(self) -> np.ndarray:
        return self.initial_losses.min(axis=0)


@dataclass
class TransformFit:
    alpha_star: AffineParams
    loss: LossReport
    trace: FitTrace

    def angles(self) -> np.ndarray:
        """Recovered rotation per sample, degrees in (-180, 180]."""
        return np.rad2deg(self.alpha_star.angles())


def avae_loss(model: VaeModel, x: Tensor, alpha: AffineParams,
              rng: Optional[np.random.Generator] = None,
              eps: Optional[np.ndarray] = None) -> Tuple[Tensor, LossReport]:
    """Loss of ``x`` through warp -> VAE -> inverse warp, differentiable in alpha and the model."""
    x_a = warp(x, alpha)
    stats = encode(model, x_a)
    z = reparameterize(stats, rng, eps)
    recon_a = decode(model, z)
    x_out = warp(recon_a, inverse(alpha))
    return x_out, elbo_loss(x, x_out, stats)


def _rsst_to_mode(values: np.ndarray, mode: TransformMode, dtype: Any) -> AffineParams:
    if mode is TransformMode.ROTATION:
        return AffineParams(mode, Tensor(values[:, :1].copy(), dtype=dtype))
    if mode is TransformMode.RSST:
        return AffineParams(mode, Tensor(values, dtype=dtype))
    return AffineParams.from_matrix(AffineParams(TransformMode.RSST, Tensor(values)).matrix(), dtype=dtype)


def _grid_rows(count: int, n: int) -> List[np.ndarray]:
    rows = []
    for r in range(count):
        values = np.zeros((n, 5))
        values[:, 0] = 2 * np.pi * r / count
        rows.append(values)
    return rows


def _random_rows(count: int, n: int, cfg: FitConfig, rng: np.random.Generator) -> List[np.ndarray]:
    rows = []
    for _ in range(count):
        values = np.zeros((n, 5))
        values[:, 0] = rng.uniform(-np.pi, np.pi, size=n)
        if cfg.mode is not TransformMode.ROTATION:
            values[:, 1] = rng.uniform(-cfg.jitter_log_scale, cfg.jitter_log_scale, size=n)
            values[:, 2] = rng.uniform(-cfg.jitter_shear, cfg.jitter_shear, size=n)
            values[:, 3:] = rng.uniform(-cfg.jitter_translation, cfg.jitter_translation, size=(n, 2))
        rows.append(values)
    return rows


def restart_candidates(cfg: FitConfig, n: int, rng: np.random.Generator, dtype: Any,
                       cached: Optional[AffineParams] = None) -> List[AffineParams]:
    """Candidate transforms [N, k] per restart; identity is always the first non-cached one."""
    source = cfg.restart_source
    if source is RestartSource.ROTATION_GRID:
        rows = _grid_rows(cfg.restarts, n)
    elif source is RestartSource.RANDOM:
        rows = _grid_rows(1, n) + _random_rows(cfg.restarts - 1, n, cfg, rng)
    elif source is RestartSource.GRID_AND_RANDOM:
        n_random = cfg.restarts // 2
        rows = _grid_rows(cfg.restarts - n_random, n) + _random_rows(n_random, n, cfg, rng)
    else:
        if cached is None:
            raise CacheError("cached restarts need stored parameters")
        if cached.mode is not cfg.mode:
            raise CacheError(f"cached parameters are {cached.mode.value}, fit mode is {cfg.mode.value}",
                             expected=cfg.mode.value, got=cached.mode.value)
        seeded = AffineParams(cached.mode, Tensor(cached.values.data, dtype=dtype))
        return [seeded] + [_rsst_to_mode(r, cfg.mode, dtype) for r in _grid_rows(cfg.restarts - 1, n)]
    return [_rsst_to_mode(r, cfg.mode, dtype) for r in rows]


def fit_transform(model: VaeModel, x: Any, cfg: FitConfig, rng: np.random.Generator,
                  eps: Optional[np.ndarray] = None,
                  cached: Optional[AffineParams] = None) -> TransformFit:
    """Per-sample argmin over alpha of :func:`avae_loss` with the model frozen.

    One latent noise draw ``eps`` is shared by every candidate and iterate, so
    losses are comparable across candidates and with a plain VAE evaluation
    that uses the same draw.
    """
    frozen = model.frozen()
    dtype = frozen.dtype
    x = Tensor(x.data if isinstance(x, Tensor) else x, dtype=dtype)
    n = x.shape[0]
    if eps is None:
        eps = draw_latent_noise(rng, n, frozen.config.latent_size, dtype)
    candidates = restart_candidates(cfg, n, rng, dtype, cached)
    columns = np.arange(n)

    initial = np.empty((len(candidates), n))
    initial_recon = np.empty_like(initial)
    initial_kl = np.empty_like(initial)
    with no_grad():
        for r, candidate in enumerate(candidates):
            _, loss = avae_loss(frozen, x, candidate, eps=eps)
            initial[r] = loss.sample_total.data
            initial_recon[r] = loss.sample_recon.data
            initial_kl[r] = loss.sample_kl.data

    first = np.argmin(initial, axis=0)
    best_total = initial[first, columns]
    best_recon = initial_recon[first, columns]
    best_kl = initial_kl[first, columns]
    stacked = np.stack([c.values.data for c in candidates])
    best_values = stacked[first, columns].copy()

    def track(values: np.ndarray, loss: LossReport) -> np.ndarray:
        total = loss.sample_total.data.astype(np.float64)
        better = total < best_total
        best_total[better] = total[better]
        best_recon[better] = loss.sample_recon.data[better]
        best_kl[better] = loss.sample_kl.data[better]
        best_values[better] = values[better]
        return total

    order = np.argsort(initial, axis=0, kind="stable")[:cfg.survivors]
    curves = np.empty((cfg.survivors, cfg.steps + 1, n))
    for s in range(cfg.survivors):
        curves[s, 0] = initial[order[s], columns]
        if cfg.steps == 0:
            continue
        values = Tensor(stacked[order[s], columns].copy(), requires_grad=True)
        opt = OptimizerState(mode=cfg.optimizer, learning_rate=cfg.lr_alpha)
        for t in range(cfg.steps):
            values.grad = None
            _, loss = avae_loss(frozen, x, AffineParams(cfg.mode, values), eps=eps)
            if t > 0:
                curves[s, t] = track(values.data, loss)
            loss.sample_total.sum().backward()
            step([values], opt)
        with no_grad():
            _, loss = avae_loss(frozen, x, AffineParams(cfg.mode, values), eps=eps)
        curves[s, cfg.steps] = track(values.data, loss)

    logger.debug("fit %d samples: %d candidates, %d survivors x %d steps, mean %.3f -> %.3f",
                 n, len(candidates), cfg.survivors, cfg.steps,
                 float(initial[0].mean()), float(best_total.mean()))
    alpha_star = AffineParams(cfg.mode, Tensor(best_values.astype(dtype)))
    report = LossReport.from_samples(best_recon.astype(dtype), best_kl.astype(dtype))
    return TransformFit(alpha_star, report, FitTrace(initial, order, curves))


@dataclass
class EpochRecord:
    epoch: int
    mean_total: float
    mean_recon: float
    mean_kl: float
    n: int
    seconds: float


@dataclass
class TrainingLog:
    """Per-epoch records; wall-clock time is logged but kept out of :meth:`rows`."""

    COLUMNS = ("epoch", "mean_total", "mean_recon", "mean_kl", "n")

    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def totals(self) -> np.ndarray:
        return np.array([r.mean_total for r in self.records])

    def rows(self) -> List[Dict[str, Any]]:
        return [{k: v for k, v in asdict(r).items() if k in self.COLUMNS} for r in self.records]


@dataclass
class _Streams:
    order: np.random.Generator
    noise: np.random.Generator
    augment: np.random.Generator
    fit: np.random.Generator

    @classmethod
    def split(cls, rng: np.random.Generator) -> "_Streams":
        seeds = rng.integers(0, 2 ** 63 - 1, size=4)
        return cls(*(np.random.default_rng(int(s)) for s in seeds))


class _EpochMeter:
    def __init__(self):
        self.total = self.recon = self.kl = 0.0
        self.n = 0
        self.started = time.perf_counter()

    def add(self, loss: LossReport) -> None:
        self.total += float(loss.sample_total.data.sum(dtype=np.float64))
        self.recon += float(loss.sample_recon.data.sum(dtype=np.float64))
        self.kl += float(loss.sample_kl.data.sum(dtype=np.float64))
        self.n += loss.sample_total.shape[0]

    def record(self, epoch: int) -> EpochRecord:
        n = max(self.n, 1)
        return EpochRecord(epoch, self.total / n, self.recon / n, self.kl / n, self.n,
                           time.perf_counter() - self.started)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _log_epoch(kind: str, record: EpochRecord, epochs: int) -> None:
    logger.info("%s epoch %d/%d: total=%.3f recon=%.3f kl=%.3f n=%d (%.1fs)", kind, record.epoch,
                epochs, record.mean_total, record.mean_recon, record.mean_kl, record.n, record.seconds)


def train_vanilla(model: VaeModel, dataset: MnistSet, epochs: int, optimizer: OptimizerState,
                  rng: np.random.Generator, batch_size: int = 256,
                  augment: Optional[PerturbationSpec] = None, progress: bool = False,
                  on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainingLog:
    """Minibatch training on the plain VAE loss.

    ``augment`` draws a fresh transform per sample per epoch.
    """
    streams = _Streams.split(rng)
    log = TrainingLog()
    latent = model.config.latent_size
    for epoch in range(1, epochs + 1):
        meter = _EpochMeter()
        model.train()
        batches = _batches(len(dataset), batch_size, streams.order)
        for idx in tqdm(batches, desc=f"epoch {epoch}", disable=not progress, leave=False):
            x = dataset.images[idx]
            if augment is not None and not augment.is_identity:
                x, _ = perturb(x, augment, streams.augment)
            x = Tensor(x, dtype=model.dtype)
            eps = draw_latent_noise(streams.noise, len(idx), latent, model.dtype)
            model.zero_grad()
            _, loss = vae_forward(model, x, eps=eps)
            loss.total.backward()
            step(model.parameters(), optimizer)
            meter.add(loss)
        record = meter.record(epoch)
        log.append(record)
        _log_epoch("vae", record, epochs)
        if on_epoch is not None:
            on_epoch(record)
    return log


def _fit_batch(model: VaeModel, x: np.ndarray, idx: np.ndarray, fit_cfg: FitConfig,
               cache: AlphaCache, rng: np.random.Generator) -> AffineParams:
    cached, hit = cache.get_many(idx, dtype=model.dtype)
    values = np.empty_like(cached.values.data)
    if (~hit).any():
        fit = fit_transform(model, x[~hit], fit_cfg, rng)
        values[~hit] = fit.alpha_star.values.data
    if hit.any():
        fit = fit_transform(model, x[hit], fit_cfg.warm_start(), rng, cached=cached.take(hit))
        values[hit] = fit.alpha_star.values.data
    alpha = AffineParams(fit_cfg.mode, Tensor(values))
    cache.set_many(idx, alpha)
    return alpha


def train_transform_opt(model: VaeModel, dataset: MnistSet, epochs: int, optimizer: OptimizerState,
                        fit_cfg: FitConfig, cache: AlphaCache, rng: np.random.Generator,
                        batch_size: int = 256, augment: Optional[PerturbationSpec] = None,
                        progress: bool = False, snapshots: bool = True,
                        on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainingLog:
    """Training with per-sample transform fitting before every model step.

    Each batch: fit alpha per sample with the model frozen (restarts on a cache
    miss, a warm start from the cache otherwise), store it, then take one
    optimizer step on the model at the fitted, detached alpha. The cache is
    keyed by position in ``dataset``.
    """
    if cache.size < len(dataset):
        raise CacheError(f"alpha cache holds {cache.size} rows for {len(dataset)} samples",
                         expected=len(dataset), got=cache.size)
    streams = _Streams.split(rng)
    log = TrainingLog()
    latent = model.config.latent_size
    for epoch in range(1, epochs + 1):
        meter = _EpochMeter()
        batches = _batches(len(dataset), batch_size, streams.order)
        for idx in tqdm(batches, desc=f"epoch {epoch}", disable=not progress, leave=False):
            x = dataset.images[idx]
            if augment is not None and not augment.is_identity:
                x, _ = perturb(x, augment, streams.augment)
            x = Tensor(x, dtype=model.dtype)
            eps = draw_latent_noise(streams.noise, len(idx), latent, model.dtype)

            alpha = _fit_batch(model, x.data, idx, fit_cfg, cache, streams.fit)

            model.train()
            model.zero_grad()
            _, loss = avae_loss(model, x, alpha.detach(), eps=eps)
            loss.total.backward()
            step(model.parameters(), optimizer)
            meter.add(loss)
        if snapshots:
            cache.snapshot(epoch)
        record = meter.record(epoch)
        log.append(record)
        _log_epoch("avae-transopt", record, epochs)
        if on_epoch is not None:
            on_epoch(record)
    return log
