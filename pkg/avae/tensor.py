"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array of dtype float32 or float64. Every
differentiable operation is a :class:`Function` subclass; applying one records
the function as the output's ``creator`` when any input requires a gradient.
Calling :meth:`Tensor.backward` on a scalar builds a :class:`Graph` from those
links, walks it in reverse topological order and accumulates ``grad`` on every
tensor that requires one. The graph is released afterwards.

Broadcasting is deliberately absent: binary ops need equal shapes, except for
Python/numpy scalars which act as constants. Bias-add and per-channel scale
live inside the fused ops in :mod:`avae.functional`.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import DTypeError, GradientError, ShapeError

logger = logging.getLogger(__name__)

DTYPES: Dict[str, type] = {"f32": np.float32, "f64": np.float64}

_default_dtype = np.dtype(np.float32)
_grad_mode = threading.local()

Scalar = Union[int, float, np.floating]


def _as_dtype(dtype: Any) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        dtype = DTYPES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise DTypeError(f"unsupported dtype {dtype}; expected f32 or f64")
    return dtype


def set_default_dtype(dtype: Any) -> None:
    """Set the dtype used for tensors built from non-float data ('f32' or 'f64')."""
    global _default_dtype
    _default_dtype = _as_dtype(dtype)
    logger.debug("default dtype set to %s", _default_dtype)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Function:
    """Base class for differentiable operations.

    ``forward`` receives the numpy data of the input tensors (plus keyword
    constants) and returns the output array. ``backward`` receives
    d(loss)/d(output) and returns one gradient per input tensor, or ``None``
    for inputs that are not differentiable.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors: Tuple["Tensor", ...] = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Union[Optional[np.ndarray], Tuple[Optional[np.ndarray], ...]]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        dtypes = {t.dtype for t in tensors}
        if len(dtypes) > 1:
            raise DTypeError(
                f"{cls.__name__} mixes dtypes {sorted(str(d) for d in dtypes)}; "
                "a graph must use one dtype"
            )
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        out = np.asarray(out, dtype=tensors[0].dtype)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=requires_grad)
        if requires_grad:
            result.creator = func
        return result


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        if dtype is not None:
            dtype = _as_dtype(dtype)
        elif isinstance(data, Tensor):
            dtype = data.dtype
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dtype = data.dtype
        else:
            dtype = _default_dtype
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same storage, no gradient tracking."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype: Any) -> "Tensor":
        return Tensor(self.data.astype(_as_dtype(dtype)), requires_grad=self.requires_grad)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ------------------------------------------------------------- autograd
    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``grad`` on every reachable tensor that requires one.

        Gradients accumulate across calls; reset them with :meth:`zero_grad`.
        """
        if self.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("loss does not depend on any tensor that requires grad")
        graph = Graph(self)
        graph.run()
        if not retain_graph:
            graph.free()

    # ------------------------------------------------------------ operators
    def __add__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Scalar) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Scalar) -> "Tensor":
        return add(neg(self), other)

    def __mul__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Scalar) -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


class Graph:
    """Executed operations reachable from one output, in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = self._toposort(output)

    @staticmethod
    def _toposort(output: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def run(self) -> None:
        grads: Dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.data)}
        for node in reversed(self.nodes):
            grad = grads.get(id(node))
            if grad is None or node.creator is None:
                continue
            input_grads = node.creator.backward(grad)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)
            for parent, g in zip(node.creator.tensors, input_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(
                        f"{type(node.creator).__name__} produced a gradient of the wrong shape",
                        op=type(node.creator).__name__, expected=parent.shape, got=g.shape,
                    )
                key = id(parent)
                grads[key] = grads[key] + g if key in grads else g
        for node in self.nodes:
            g = grads.get(id(node))
            if g is None:
                continue
            g = np.asarray(g, dtype=node.dtype)
            node.grad = np.array(g) if node.grad is None else node.grad + g

    def free(self) -> None:
        for node in self.nodes:
            node.creator = None


# ---------------------------------------------------------------- primitives
def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        dim = next(
            (i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y),
            min(len(a.shape), len(b.shape)),
        )
        raise ShapeError(f"{op}: operand shapes differ", op=op, dim=dim, expected=a.shape, got=b.shape)


def as_tensor(value: Any, dtype: Any = None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


class Add(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return x + y

    def backward(self, grad: np.ndarray):
        return grad, grad


class Sub(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return x - y

    def backward(self, grad: np.ndarray):
        return grad, -grad


class Mul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self.x, self.y = x, y
        return x * y

    def backward(self, grad: np.ndarray):
        return grad * self.y, grad * self.x


class Div(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self.x, self.y = x, y
        return x / y

    def backward(self, grad: np.ndarray):
        return grad / self.y, -grad * self.x / (self.y * self.y)


class AddScalar(Function):
    def forward(self, x: np.ndarray, c: float = 0.0) -> np.ndarray:
        return x + x.dtype.type(c)

    def backward(self, grad: np.ndarray):
        return grad


class MulScalar(Function):
    def forward(self, x: np.ndarray, c: float = 1.0) -> np.ndarray:
        self.c = x.dtype.type(c)
        return x * self.c

    def backward(self, grad: np.ndarray):
        return grad * self.c


class Neg(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return -x

    def backward(self, grad: np.ndarray):
        return -grad


class Exp(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.exp(x)
        return self.out

    def backward(self, grad: np.ndarray):
        return grad * self.out


class Log(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        return np.log(x)

    def backward(self, grad: np.ndarray):
        return grad / self.x


class Sum(Function):
    def forward(self, x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad, self.shape)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: Sequence[int] = ()) -> np.ndarray:
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad: np.ndarray):
        return grad.reshape(self.shape)


class MatMul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad: np.ndarray):
        return grad @ self.y.T, self.x.T @ grad


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return AddScalar.apply(a, c=float(b))
    _check_same_shape("add", a, b)
    return Add.apply(a, b)


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return AddScalar.apply(a, c=-float(b))
    _check_same_shape("sub", a, b)
    return Sub.apply(a, b)


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return MulScalar.apply(a, c=float(b))
    _check_same_shape("mul", a, b)
    return Mul.apply(a, b)


def div(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return MulScalar.apply(a, c=1.0 / float(b))
    _check_same_shape("div", a, b)
    return Div.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def tsum(a: Tensor, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod([s for s in shape if s != -1])) == 0 or (
        -1 not in shape and int(np.prod(shape)) != a.size
    ):
        raise ShapeError("reshape: element count changes", op="reshape", expected=a.size, got=shape)
    return Reshape.apply(a, shape=shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands", op="matmul", expected=2, got=(a.ndim, b.ndim))
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul inner dimensions differ", op="matmul", dim=1,
                         expected=a.shape[1], got=b.shape[0])
    return MatMul.apply(a, b)
