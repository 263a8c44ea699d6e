"""Experiment orchestration: configuration, command registry and the commands.

``Harness.run(cfg)`` dispatches ``cfg.command`` to a registered handler,
times it and maps failures to exit codes through registered exception
handlers. Every CSV written here carries the serialized config and seed.
"""

import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import circmean
from tqdm import tqdm

from . import __version__
from .affine import TransformMode
from .affine_vae import FitConfig, TrainingLog, fit_transform, train_transform_opt, train_vanilla
from .background import FitPool
from .caching import AlphaCache
from .checkpoint import load_checkpoint, save_checkpoint
from .data import MnistSet, PerturbationSpec, load_mnist, perturb, pixel_stats, subsample
from .exceptions import AvaeError, CacheError, ConfigError, DataError
from .optim import OPTIMIZER_MODES, OptimizerState
from .results import CsvResult
from .tensor import Tensor, no_grad, set_default_dtype
from .validation import validate
from .vae import VaeConfig, VaeModel, draw_latent_noise, vae_forward

logger = logging.getLogger(__name__)

TRAIN_MODES = ("vae", "avae", "avae-transopt")
DATASETS = ("canonical", "rot-aug", "affine-aug")
FIT_MODES = ("rotation", "rsst", "full6")
DESK_SCALE = {"train_n": 10000, "val_n": 2000, "epochs": 15}
FULL_SCALE = {"train_n": None, "val_n": None, "epochs": 30}
HIST_BIN_DEG = 10
VAL_SPLIT = "t10k"


def parse_angles(text: str) -> Tuple[float, ...]:
    """'LO:HI:STEP' (inclusive of HI when on the grid) or a comma list."""
    try:
        if ":" in text:
            lo, hi, step = (float(p) for p in text.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError("need lo <= hi and step > 0")
            count = int(np.floor((hi - lo) / step + 1e-9)) + 1
            return tuple(float(lo + i * step) for i in range(count))
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError({'angles': f"cannot parse {text!r}: {exc}"}) from exc


@dataclass
class ExperimentConfig:
    command: str = "train"
    data: Optional[str] = None
    out: Optional[str] = None
    mode: str = "vae"
    dataset: str = "canonical"
    latent: int = 8
    epochs: Optional[int] = None
    batch: int = 256
    lr: float = 0.001
    wd: float = 0.0005
    seed: int = 0
    restarts: Optional[int] = None
    fit_steps: Optional[int] = None
    survivors: Optional[int] = None
    alpha_lr: Optional[float] = None
    alpha_opt: str = "adam"
    fit_mode: str = "rotation"
    fit: bool = True
    angles: Tuple[float, ...] = tuple(float(a) for a in range(0, 181, 15))
    full: bool = False
    f64: bool = False
    normalize: bool = False
    train_n: Optional[int] = None
    val_n: Optional[int] = None
    ckpt: List[str] = field(default_factory=list)
    cache: Optional[str] = None
    fits: Optional[str] = None
    latent_sizes: Tuple[int, ...] = (2, 8, 32)
    seeds: int = 3
    digits: Tuple[int, ...] = (1, 6, 9)
    hist_epochs: Optional[Tuple[int, ...]] = None
    workers: int = 4
    chunk: int = 250
    quiet: bool = False

    def __post_init__(self):
        scale = FULL_SCALE if self.full else DESK_SCALE
        if self.epochs is None:
            self.epochs = scale["epochs"]
        if self.train_n is None:
            self.train_n = scale["train_n"]
        if self.val_n is None:
            self.val_n = scale["val_n"]
        self.angles = tuple(float(a) for a in self.angles)
        validate(
            self,
            mode={'choices': TRAIN_MODES},
            dataset={'choices': DATASETS},
            fit_mode={'choices': FIT_MODES},
            alpha_opt={'choices': OPTIMIZER_MODES},
            latent='positive',
            epochs='non_negative',
            batch='positive',
            lr={'min': 0.0},
            wd={'min': 0.0},
            seeds='positive',
            workers='positive',
            chunk='positive',
        )
        errors = {}
        for name in ("train_n", "val_n"):
            value = getattr(self, name)
            if value is not None and value < 1:
                errors[name] = f"{name} must be >= 1 or unset, got {value!r}"
        if any(d < 0 or d > 9 for d in self.digits):
            errors['digits'] = f"digits must lie in 0..9, got {list(self.digits)}"
        if errors:
            raise ConfigError(errors)

    @classmethod
    def from_args(cls, args: Any) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        values = {k: v for k, v in vars(args).items() if k in known and v is not None}
        if isinstance(values.get("angles"), str):
            values["angles"] = parse_angles(values["angles"])
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key in ("angles", "latent_sizes", "digits", "hist_epochs"):
            if data[key] is not None:
                data[key] = list(data[key])
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def perturbation(self, dataset: Optional[str] = None) -> PerturbationSpec:
        dataset = dataset or self.dataset
        if dataset == "rot-aug":
            return PerturbationSpec.rotation_augmented(seed=self.seed)
        if dataset == "affine-aug":
            return PerturbationSpec.affine_suite(seed=self.seed)
        return PerturbationSpec.canonical()

    def _fit_overrides(self) -> Dict[str, Any]:
        overrides = dict(mode=TransformMode(self.fit_mode), optimizer=self.alpha_opt)
        for key, value in (("restarts", self.restarts), ("steps", self.fit_steps),
                           ("survivors", self.survivors), ("lr_alpha", self.alpha_lr)):
            if value is not None:
                overrides[key] = value
        return overrides

    def fit_config(self) -> FitConfig:
        """Test-time fitting settings: the rotation or affine preset plus CLI overrides."""
        if self.fit_mode == "rotation":
            return FitConfig.rotation_defaults(**self._fit_overrides())
        return FitConfig.affine_defaults(**self._fit_overrides())

    def training_fit_config(self) -> FitConfig:
        overrides = self._fit_overrides()
        if self.fit_mode != "rotation":
            overrides.setdefault("restart_source", "grid+random")
        return FitConfig.training_defaults(**overrides)

    def metadata(self, **extra: Any) -> Dict[str, Any]:
        return {"avae": __version__, "config": self.to_dict(), "seed": self.seed, **extra}


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _require(value: Any, flag: str) -> Any:
    if value in (None, [], ()):
        raise ConfigError({flag: f"--{flag.replace('_', '-')} is required for this command"})
    return value


class Harness:
    """Command registry with per-command timing and exception-to-exit-code handlers."""

    def __init__(self, workers: int = 4):
        self.commands: Dict[str, Callable[["Harness", ExperimentConfig], Any]] = {}
        self.exception_handlers: Dict[type, Callable[[BaseException], int]] = {}
        self.fit_pool = FitPool(max_workers=workers)
        self.command_times: List[Tuple[str, float]] = []
        self._setup_default_handlers()
        self._setup_default_commands()

    def _setup_default_handlers(self):
        self.add_exception_handler(AvaeError, self._handle_avae_error)
        self.add_exception_handler(OSError, self._handle_os_error)

    def _setup_default_commands(self):
        self.add_command("train", cmd_train)
        self.add_command("eval-sweep", cmd_eval_sweep)
        self.add_command("latent-sweep", cmd_latent_sweep)
        self.add_command("affine-eval", cmd_affine_eval)
        self.add_command("rotation-hist", cmd_rotation_hist)
        self.add_command("table", cmd_table)

    def add_command(self, name: str, handler: Callable[["Harness", ExperimentConfig], Any]):
        self.commands[name] = handler

    def command(self, name: str):
        """Decorator form of :meth:`add_command`."""
        def decorator(handler):
            self.add_command(name, handler)
            return handler
        return decorator

    def add_exception_handler(self, exc_class: type, handler: Callable[[BaseException], int]):
        self.exception_handlers[exc_class] = handler

    def run(self, cfg: ExperimentConfig) -> int:
        """Execute one command; returns the process exit code."""
        started = time.perf_counter()
        try:
            handler = self.commands.get(cfg.command)
            if handler is None:
                raise ConfigError({'command': f"unknown command {cfg.command!r}; "
                                              f"choose from {sorted(self.commands)}"})
            set_default_dtype("f64" if cfg.f64 else "f32")
            logger.info("%s: starting (seed=%d, dtype=%s)", cfg.command, cfg.seed, "f64" if cfg.f64 else "f32")
            handler(self, cfg)
            code = 0
        except Exception as exc:
            code = self._handle_exception(exc)
        elapsed = time.perf_counter() - started
        self.command_times.append((cfg.command, elapsed))
        logger.info("%s: finished with exit code %d in %.1fs", cfg.command, code, elapsed)
        return code

    def _handle_exception(self, exc: BaseException) -> int:
        for exc_class, handler in self.exception_handlers.items():
            if isinstance(exc, exc_class):
                return handler(exc)
        logger.exception("unhandled error")
        self._emit_error(type(exc).__name__, 1, str(exc), {})
        return 1

    def _handle_avae_error(self, exc: AvaeError) -> int:
        detail = dict(exc.detail)
        if isinstance(exc, ConfigError):
            detail = {f"field.{k}": v for k, v in exc.errors.items()}
        self._emit_error(type(exc).__name__, exc.code, exc.message, detail)
        return exc.code

    def _handle_os_error(self, exc: OSError) -> int:
        code = DataError.code
        self._emit_error(type(exc).__name__, code, exc.strerror or str(exc),
                         {"path": exc.filename} if exc.filename else {})
        return code

    @staticmethod
    def _emit_error(kind: str, code: int, message: str, detail: Dict[str, Any]) -> None:
        parts = [f"error type={kind}", f"code={code}", f"message={json.dumps(str(message))}"]
        parts += [f"{k}={json.dumps(v) if isinstance(v, str) else v}" for k, v in detail.items()]
        print(" ".join(parts), file=sys.stderr)

    def get_stats(self) -> Dict[str, Any]:
        """Timing statistics over the commands run so far."""
        if not self.command_times:
            return {}
        times = [t for _, t in self.command_times]
        return {
            "total_commands": len(times),
            "avg_seconds": sum(times) / len(times),
            "min_seconds": min(times),
            "max_seconds": max(times),
            "per_command": {name: sum(t for n, t in self.command_times if n == name)
                            for name, _ in self.command_times},
        }

    def cleanup(self) -> None:
        self.fit_pool.cleanup()


# ----------------------------------------------------------------- helpers
def _load_data(cfg: ExperimentConfig, splits: Sequence[str] = ("train", "val")) -> Dict[str, MnistSet]:
    data_dir = _require(cfg.data, "data")
    loaded = {}
    for offset, split in enumerate(splits):
        n = cfg.train_n if split == "train" else cfg.val_n
        loaded[split] = subsample(load_mnist(data_dir, split), n, cfg.seed + offset)
    return loaded


def _vae_config(cfg: ExperimentConfig, train: MnistSet) -> VaeConfig:
    if not cfg.normalize:
        return VaeConfig(latent_size=cfg.latent)
    mean, std = pixel_stats(train)
    return VaeConfig(latent_size=cfg.latent, normalize_input=True, input_mean=mean, input_std=std)


def _seeds(seed: int, count: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def _rotate(images: np.ndarray, angle_deg: float) -> np.ndarray:
    spec = PerturbationSpec(rotation=(angle_deg, angle_deg))
    rotated, _ = perturb(images, spec, np.random.default_rng(0))
    return rotated


@dataclass
class EvalResult:
    """Per-sample losses of one evaluated image set."""

    off_total: np.ndarray
    off_recon: np.ndarray
    off_kl: np.ndarray
    on_total: Optional[np.ndarray] = None
    on_recon: Optional[np.ndarray] = None
    on_kl: Optional[np.ndarray] = None
    fit_angles: Optional[np.ndarray] = None

    @classmethod
    def concat(cls, parts: Sequence["EvalResult"]) -> "EvalResult":
        merged = {}
        for name in cls.__dataclass_fields__:
            values = [getattr(p, name) for p in parts]
            merged[name] = None if values[0] is None else np.concatenate(values)
        return cls(**merged)

    def summary(self, fitted: bool) -> Dict[str, Any]:
        total, recon, kl = ((self.on_total, self.on_recon, self.on_kl) if fitted
                            else (self.off_total, self.off_recon, self.off_kl))
        return {"mean_total": float(total.mean()), "mean_recon": float(recon.mean()),
                "mean_kl": float(kl.mean()), "n": int(total.size)}


def evaluate(harness: Harness, model: VaeModel, images: np.ndarray, seed: int,
             fit_cfg: Optional[FitConfig], chunk: int) -> EvalResult:
    """Plain VAE losses and, with ``fit_cfg``, fitted AVAE losses on the same noise draws.

    Chunks run on the harness pool; chunk ``i`` uses the ``i``-th seed child.
    """
    if len(images) == 0:
        raise DataError("no images to evaluate")
    model = model.frozen()
    latent = model.config.latent_size

    def run_chunk(part: slice, rng: np.random.Generator) -> EvalResult:
        x = images[part]
        eps = draw_latent_noise(rng, len(x), latent, model.dtype)
        with no_grad():
            _, off = vae_forward(model, Tensor(x, dtype=model.dtype), eps=eps)
        result = EvalResult(off.sample_total.data.astype(np.float64), off.sample_recon.data.astype(np.float64),
                            off.sample_kl.data.astype(np.float64))
        if fit_cfg is not None:
            fit = fit_transform(model, x, fit_cfg, rng, eps=eps)
            result.on_total = fit.loss.sample_total.data.astype(np.float64)
            result.on_recon = fit.loss.sample_recon.data.astype(np.float64)
            result.on_kl = fit.loss.sample_kl.data.astype(np.float64)
            result.fit_angles = fit.angles()
        return result

    parts = harness.fit_pool.map_chunks(run_chunk, len(images), chunk, seed)
    return EvalResult.concat(parts)


def _concentration(angles_rad: np.ndarray) -> Dict[str, float]:
    if angles_rad.size == 0:
        return {"resultant_length": float("nan"), "folded_resultant_length": float("nan"),
                "circular_mean_deg": float("nan")}
    return {
        "resultant_length": float(np.abs(np.exp(1j * angles_rad).mean())),
        "folded_resultant_length": float(np.abs(np.exp(2j * angles_rad).mean())),
        "circular_mean_deg": float(np.rad2deg(circmean(angles_rad, high=2 * np.pi, low=0.0))),
    }


def composite_angles(cache: AlphaCache, epoch: int) -> np.ndarray:
    """Orientation each sample is encoded at: applied perturbation plus fitted rotation (radians)."""
    fitted = cache.snapshot_angles(epoch)
    applied = cache.applied_angles if cache.applied_angles is not None else np.zeros_like(fitted)
    return np.mod(applied + fitted, 2 * np.pi)


def angle_histogram(cache: AlphaCache, digits: Sequence[int],
                    epochs: Optional[Sequence[int]] = None) -> Tuple[CsvResult, CsvResult]:
    """10-degree histograms and concentration summaries of fitted rotations per epoch and digit."""
    if not cache.snapshots:
        raise CacheError("alpha cache has no epoch snapshots; train with mode avae-transopt")
    if cache.labels is None:
        raise CacheError("alpha cache has no labels")
    epochs = sorted(cache.snapshots) if epochs is None else list(epochs)
    hist = CsvResult(["epoch", "digit", "bin_lo_deg", "count"])
    summary = CsvResult(["epoch", "digit", "n", "resultant_length", "folded_resultant_length",
                         "circular_mean_deg"])
    edges = np.arange(0, 360 + HIST_BIN_DEG, HIST_BIN_DEG)
    for epoch in epochs:
        angles = composite_angles(cache, epoch)
        for digit in digits:
            selected = angles[cache.labels == digit]
            counts, _ = np.histogram(np.rad2deg(selected), bins=edges)
            for lo, count in zip(edges[:-1], counts):
                hist.add_row(epoch=epoch, digit=digit, bin_lo_deg=int(lo), count=int(count))
            summary.add_row(epoch=epoch, digit=digit, n=int(selected.size), **_concentration(selected))
    return hist, summary


def _train_model(harness: Harness, cfg: ExperimentConfig, train: MnistSet,
                 seed: int) -> Tuple[VaeModel, Any, Optional[AlphaCache], np.random.Generator]:
    """Train one model; also returns the training generator in its post-training state."""
    rng = np.random.default_rng(seed)
    model = VaeModel.init(_vae_config(cfg, train), rng)
    optimizer = OptimizerState.adam(cfg.lr, cfg.wd)
    augment = cfg.perturbation()
    if cfg.mode != "avae-transopt":
        log = train_vanilla(model, train, cfg.epochs, optimizer, rng, cfg.batch,
                            augment=augment, progress=not cfg.quiet)
        return model, log, None, rng

    fit_cfg = cfg.training_fit_config()
    applied = np.zeros(len(train))
    if not augment.is_identity:
        # one fixed pose per sample keeps the cached transforms meaningful across epochs
        images, alpha = perturb(train.images, augment, np.random.default_rng(seed + 1))
        applied = alpha.angles()
        train = MnistSet(images, train.labels, train.split, train.indices)
    cache = AlphaCache(len(train), fit_cfg.mode)
    cache.labels = train.labels.copy()
    cache.applied_angles = applied
    log = train_transform_opt(model, train, cfg.epochs, optimizer, fit_cfg, cache, rng,
                              cfg.batch, progress=not cfg.quiet)
    return model, log, cache, rng


# ----------------------------------------------------------------- commands
def cmd_train(harness: Harness, cfg: ExperimentConfig) -> Path:
    out = Path(_require(cfg.out, "out"))
    train = _load_data(cfg, ("train",))["train"]
    model, log, cache, rng = _train_model(harness, cfg, train, cfg.seed)

    save_checkpoint(out, model, cfg.metadata(train_n=len(train)), rng=rng)
    CsvResult(list(TrainingLog.COLUMNS), log.rows(),
              cfg.metadata()).write(_sibling(out, "_log.csv"))
    if cache is not None:
        cache.save(Path(cfg.cache) if cfg.cache else _sibling(out, "_cache.npz"))
        hist, summary = angle_histogram(cache, range(10))
        hist.metadata = summary.metadata = cfg.metadata()
        hist.write(_sibling(out, "_angles.csv"))
        summary.write(_sibling(out, "_angles_concentration.csv"))
    return out


def cmd_eval_sweep(harness: Harness, cfg: ExperimentConfig) -> Path:
    out = Path(_require(cfg.out, "out"))
    checkpoint = load_checkpoint(_require(cfg.ckpt, "ckpt")[0])
    model = checkpoint.build_model()
    val = _load_data(cfg, ("val",))["val"]
    fit_cfg = cfg.fit_config() if cfg.fit else None

    meta = cfg.metadata(checkpoint=checkpoint.config, val_split=VAL_SPLIT, val_n=len(val),
                        fit=fit_cfg.to_dict() if fit_cfg else "off")
    sweep = CsvResult(["angle_deg", "mean_total", "mean_recon", "mean_kl", "n"], metadata=meta)
    fits = CsvResult(["angle_deg", "sample", "label", "fit_angle_deg", "loss_off", "loss_on"], metadata=meta)
    for i, angle in enumerate(tqdm(cfg.angles, desc="angles", disable=cfg.quiet)):
        result = evaluate(harness, model, _rotate(val.images, angle), cfg.seed + i, fit_cfg, cfg.chunk)
        sweep.add_row(angle_deg=angle, **result.summary(fit_cfg is not None))
        logger.info("angle %.1f: %s", angle, result.summary(fit_cfg is not None))
        if fit_cfg is not None:
            for k in range(len(val)):
                fits.add_row(angle_deg=angle, sample=int(val.indices[k]), label=int(val.labels[k]),
                             fit_angle_deg=float(result.fit_angles[k]), loss_off=float(result.off_total[k]),
                             loss_on=float(result.on_total[k]))
    sweep.write(out)
    if cfg.fits and fit_cfg is not None:
        fits.write(cfg.fits)
    return out


def cmd_latent_sweep(harness: Harness, cfg: ExperimentConfig) -> Path:
    out = Path(_require(cfg.out, "out"))
    data = _load_data(cfg)
    table = CsvResult(["latent", "dataset", "final_loss"],
                      metadata=cfg.metadata(val_split=VAL_SPLIT, val_n=len(data["val"])))
    for latent in cfg.latent_sizes:
        for dataset in ("canonical", "rot-aug"):
            run_cfg = ExperimentConfig(**{**asdict(cfg), "latent": latent, "dataset": dataset, "mode": "vae"})
            val_images = data["val"].images
            if dataset == "rot-aug":
                val_images, _ = perturb(val_images, run_cfg.perturbation(), np.random.default_rng(cfg.seed))
            for seed in _seeds(cfg.seed, cfg.seeds):
                model, _, _, _ = _train_model(harness, run_cfg, data["train"], seed)
                result = evaluate(harness, model.eval(), val_images, seed, None, cfg.chunk)
                loss = float(result.off_total.mean())
                logger.info("latent=%d dataset=%s seed=%d: %.3f", latent, dataset, seed, loss)
                table.add_row(latent=latent, dataset=dataset, final_loss=loss)
    return table.write(out)


def cmd_affine_eval(harness: Harness, cfg: ExperimentConfig) -> Path:
    out = Path(_require(cfg.out, "out"))
    checkpoint = load_checkpoint(_require(cfg.ckpt, "ckpt")[0])
    model = checkpoint.build_model()
    val = _load_data(cfg, ("val",))["val"]
    spec = cfg.perturbation()
    fit_cfg = cfg.fit_config()

    images, _ = perturb(val.images, spec, np.random.default_rng(cfg.seed))
    result = evaluate(harness, model, images, cfg.seed, fit_cfg, cfg.chunk)
    vae_mean = float(result.off_total.mean())
    avae_mean = float(result.on_total.mean())
    reduction = 100.0 * (vae_mean - avae_mean) / vae_mean
    logger.info("affine eval: vae=%.3f avae=%.3f reduction=%.2f%%", vae_mean, avae_mean, reduction)
    summary = CsvResult(["vae_mean", "avae_mean", "reduction_pct", "n"],
                        metadata=cfg.metadata(checkpoint=checkpoint.config, perturbation=spec.to_dict(),
                                              fit=fit_cfg.to_dict(), val_split=VAL_SPLIT, val_n=len(val)))
    summary.add_row(vae_mean=vae_mean, avae_mean=avae_mean, reduction_pct=reduction, n=len(images))
    return summary.write(out)


def cmd_rotation_hist(harness: Harness, cfg: ExperimentConfig) -> Path:
    out = Path(_require(cfg.out, "out"))
    if cfg.cache:
        cache_path = Path(cfg.cache)
    else:
        cache_path = _sibling(Path(_require(cfg.ckpt, "ckpt")[0]), "_cache.npz")
    cache = AlphaCache.load(cache_path)
    if cfg.hist_epochs:
        missing = [e for e in cfg.hist_epochs if e not in cache.snapshots]
        if missing:
            raise CacheError("requested epochs have no cache snapshot", path=cache_path,
                             missing=missing, available=sorted(cache.snapshots))
    hist, summary = angle_histogram(cache, cfg.digits, cfg.hist_epochs)
    hist.metadata = summary.metadata = cfg.metadata(cache=str(cache_path))
    summary.write(_sibling(out, "_concentration.csv"))
    return hist.write(out)


def cmd_table(harness: Harness, cfg: ExperimentConfig) -> Path:
    out = Path(_require(cfg.out, "out"))
    val = _load_data(cfg, ("val",))["val"]
    table = CsvResult(["model", "training_data", "fit", "avg_loss", "n"],
                      metadata=cfg.metadata(val_split=VAL_SPLIT, val_n=len(val)))
    for path in _require(cfg.ckpt, "ckpt"):
        checkpoint = load_checkpoint(path)
        model = checkpoint.build_model()
        trained = checkpoint.config.get("config", {})
        fitted = trained.get("mode", "vae") != "vae"
        fit_cfg = cfg.fit_config() if fitted else None
        totals = []
        for i, angle in enumerate(tqdm(cfg.angles, desc=Path(path).name, disable=cfg.quiet)):
            result = evaluate(harness, model, _rotate(val.images, angle), cfg.seed + i, fit_cfg, cfg.chunk)
            totals.append(result.on_total if fitted else result.off_total)
        losses = np.concatenate(totals)
        table.add_row(model=trained.get("mode", "vae"), training_data=trained.get("dataset", "canonical"),
                      fit="on" if fitted else "off", avg_loss=float(losses.mean()), n=int(losses.size))
    return table.write(out)
