"""Central finite-difference oracle for analytic gradients."""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .exceptions import DTypeError
from .tensor import Tensor, no_grad


@dataclass
class GradcheckResult:
    max_rel_error: float
    errors: List[float] = field(default_factory=list)
    checked: int = 0

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], which: int,
                       indices: Optional[np.ndarray] = None, h: float = 1e-5) -> np.ndarray:
    """d fn / d inputs[which] by central differences at flat ``indices`` (all when None)."""
    target = inputs[which]
    flat = target.data.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    grads = np.zeros(len(indices), dtype=np.float64)
    with no_grad():
        for k, idx in enumerate(indices):
            original = flat[idx]
            flat[idx] = original + h
            plus = float(fn(*inputs).data)
            flat[idx] = original - h
            minus = float(fn(*inputs).data)
            flat[idx] = original
            grads[k] = (plus - minus) / (2 * h)
    return grads


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              floor: float = 1e-3, max_elements: Optional[int] = None,
              rng: Optional[np.random.Generator] = None) -> GradcheckResult:
    """Compare backward() against central differences for every input that requires grad.

    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
    elementwise; ``max_elements`` samples that many entries per input.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise DTypeError("gradcheck needs f64 inputs")
        t.zero_grad()
    out = fn(*inputs)
    out.backward()
    analytic = [None if t.grad is None else t.grad.reshape(-1).copy() for t in inputs]

    rng = rng or np.random.default_rng(0)
    result = GradcheckResult(max_rel_error=0.0)
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        if max_elements is not None and t.size > max_elements:
            indices = rng.choice(t.size, size=max_elements, replace=False)
        else:
            indices = np.arange(t.size)
        numeric = numerical_gradient(fn, inputs, i, indices, h)
        a = analytic[i][indices] if analytic[i] is not None else np.zeros_like(numeric)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        err = float(np.max(np.abs(a - numeric) / denom)) if len(indices) else 0.0
        result.errors.append(err)
        result.checked += len(indices)
        result.max_rel_error = max(result.max_rel_error, err)
    return result
