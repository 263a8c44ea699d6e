from typing import Any, Dict, Optional


class AvaeError(Exception):
    """Base error. ``code`` doubles as the CLI exit code."""

    code = 1

    def __init__(self, message: str, code: Optional[int] = None, **detail: Any):
        super().__init__(message)
        self.message = message
        if code is not None:
            self.code = code
        self.detail: Dict[str, Any] = {k: v for k, v in detail.items() if v is not None}

    def __str__(self) -> str:
        if not self.detail:
            return self.message
        extra = ", ".join(f"{k}={v}" for k, v in self.detail.items())
        return f"{self.message} ({extra})"


class TensorError(AvaeError):
    code = 10


class ShapeError(TensorError):
    """Shape contract violated; names the operation and offending dimension."""

    def __init__(self, message: str, op: Optional[str] = None, dim: Any = None,
                 expected: Any = None, got: Any = None):
        super().__init__(message, op=op, dim=dim, expected=expected, got=got)
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got


class DTypeError(TensorError):
    code = 11


class GradientError(TensorError):
    code = 12


class SingularTransformError(AvaeError):
    code = 20

    def __init__(self, message: str, det: Optional[float] = None):
        super().__init__(message, det=det)
        self.det = det


class DomainError(AvaeError):
    code = 21


class DataError(AvaeError):
    code = 30

    def __init__(self, message: str, path: Optional[str] = None, **detail: Any):
        super().__init__(message, path=str(path) if path is not None else None, **detail)
        self.path = path


class IdxFormatError(DataError):
    code = 31


class CheckpointError(DataError):
    code = 32


class CacheError(DataError):
    code = 33


class ConfigError(AvaeError):
    code = 2

    def __init__(self, errors: Dict[str, str]):
        summary = "; ".join(f"{k}: {v}" for k, v in errors.items())
        super().__init__(f"invalid configuration: {summary}")
        self.errors = errors
