"""AVAE - variational autoencoders with test-time affine transform fitting, on a numpy autograd core"""

__version__ = "0.1.0"

from .tensor import Tensor, Function, Graph, no_grad, set_default_dtype, get_default_dtype
from .optim import OptimizerState, step, zero_grad
from .gradcheck import gradcheck, GradcheckResult
from .affine import (
    AffineParams, TransformMode, SamplingGrid, to_matrix, inverse, grid_generate, bilinear_sample, warp,
)
from .vae import VaeConfig, VaeModel, LatentStats, LossReport, encode, reparameterize, decode, elbo_loss, vae_forward
from .affine_vae import (
    FitConfig, RestartSource, TransformFit, TrainingLog, avae_loss, fit_transform, train_vanilla,
    train_transform_opt,
)
from .caching import AlphaCache
from .background import FitPool
from .data import MnistSet, PerturbationSpec, load_idx, write_idx, load_mnist, preprocess, perturb, make_splits
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .results import CsvResult
from .harness import ExperimentConfig, Harness
from .validation import validate, Validator
from .exceptions import (
    AvaeError, TensorError, ShapeError, DTypeError, GradientError, SingularTransformError, DomainError,
    DataError, IdxFormatError, CheckpointError, CacheError, ConfigError,
)

__all__ = [
    "Tensor", "Function", "Graph", "no_grad", "set_default_dtype", "get_default_dtype",
    "OptimizerState", "step", "zero_grad",
    "gradcheck", "GradcheckResult",
    "AffineParams", "TransformMode", "SamplingGrid", "to_matrix", "inverse", "grid_generate",
    "bilinear_sample", "warp",
    "VaeConfig", "VaeModel", "LatentStats", "LossReport", "encode", "reparameterize", "decode",
    "elbo_loss", "vae_forward",
    "FitConfig", "RestartSource", "TransformFit", "TrainingLog", "avae_loss", "fit_transform",
    "train_vanilla", "train_transform_opt",
    "AlphaCache", "FitPool",
    "MnistSet", "PerturbationSpec", "load_idx", "write_idx", "load_mnist", "preprocess", "perturb",
    "make_splits",
    "Checkpoint", "save_checkpoint", "load_checkpoint",
    "CsvResult",
    "ExperimentConfig", "Harness",
    "validate", "Validator",
    "AvaeError", "TensorError", "ShapeError", "DTypeError", "GradientError", "SingularTransformError",
    "DomainError", "DataError", "IdxFormatError", "CheckpointError", "CacheError", "ConfigError",
]
