import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .exceptions import GradientError, ShapeError
from .tensor import Tensor
from .validation import validate

logger = logging.getLogger(__name__)

OPTIMIZER_MODES = ("adam", "sgd")


@dataclass
class OptimizerState:
    """Update rule settings plus per-parameter moment buffers.

    Weight decay is an L2 term added to the gradient before the update, in
    both modes. Moment buffers are created on the first :func:`step` and are
    matched to parameters by position.
    """

    mode: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    moments: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        validate(
            self,
            mode={'choices': OPTIMIZER_MODES},
            learning_rate={'min': 0.0},
            weight_decay={'min': 0.0},
            step_count='non_negative',
        )

    @classmethod
    def adam(cls, learning_rate: float = 1e-3, weight_decay: float = 0.0) -> "OptimizerState":
        return cls(mode="adam", learning_rate=learning_rate, weight_decay=weight_decay)

    @classmethod
    def sgd(cls, learning_rate: float = 1e-3, weight_decay: float = 0.0) -> "OptimizerState":
        return cls(mode="sgd", learning_rate=learning_rate, weight_decay=weight_decay)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """Update ``params`` in place from their ``grad``; grads are left untouched."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradientError(f"parameter {i} has no gradient; run backward before step")

    if state.mode == "adam":
        if not state.moments:
            state.moments = [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params]
        if len(state.moments) != len(params):
            raise ShapeError("optimizer state tracks a different parameter list",
                             op="step", dim="params", expected=len(state.moments), got=len(params))

    state.step_count += 1
    lr, wd = state.learning_rate, state.weight_decay

    for i, p in enumerate(params):
        g = p.grad if wd == 0 else p.grad + wd * p.data
        if state.mode == "sgd":
            p.data -= lr * g
            continue

        m, v = state.moments[i]
        if m.shape != p.shape:
            raise ShapeError("moment buffer does not match parameter", op="step",
                             dim=i, expected=p.shape, got=m.shape)
        beta1, beta2 = state.betas
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g

        bias_correction1 = 1 - beta1 ** state.step_count
        bias_correction2 = 1 - beta2 ** state.step_count
        denom = np.sqrt(v / bias_correction2) + state.eps
        p.data -= (lr / bias_correction1) * m / denom
