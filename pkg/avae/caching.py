import logging
import os
import threading
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .affine import AffineParams, TransformMode
from .exceptions import CacheError
from .tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)


class AlphaCache:
    """Fitted affine parameters per training sample, keyed by the sample's index.

    Values live in one dense float64 array so batched reads and writes are
    plain fancy indexing; ``filled`` marks which rows hold a fitted value.
    Epoch snapshots keep a copy of every row for the rotation histograms.
    """

    def __init__(self, size: int, mode: TransformMode = TransformMode.ROTATION):
        if size < 0:
            raise CacheError(f"cache size must be >= 0, got {size}")
        self.size = size
        self.mode = TransformMode(mode)
        self._values = np.tile(self.mode.identity_values(), (size, 1))
        self._filled = np.zeros(size, dtype=bool)
        self._lock = threading.Lock()
        self.snapshots: Dict[int, np.ndarray] = {}
        self.labels: Optional[np.ndarray] = None
        self.applied_angles: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self._filled.sum())

    def _check(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if indices.size and (indices.min() < 0 or indices.max() >= self.size):
            raise CacheError("sample index outside the cache", size=self.size,
                             index=int(indices.max() if indices.max() >= self.size else indices.min()))
        return indices

    def get_many(self, indices: Sequence[int], dtype: Any = None) -> Tuple[AffineParams, np.ndarray]:
        """Stored parameters for ``indices`` (identity where missing) and the hit mask."""
        indices = self._check(indices)
        values = self._values[indices].astype(dtype or get_default_dtype())
        return AffineParams(self.mode, Tensor(values)), self._filled[indices].copy()

    def set_many(self, indices: Sequence[int], alpha: AffineParams) -> None:
        indices = self._check(indices)
        if alpha.mode is not self.mode:
            raise CacheError(f"cache stores {self.mode.value} parameters, got {alpha.mode.value}")
        if alpha.batch_size != indices.size:
            raise CacheError("one parameter row is needed per index",
                             expected=int(indices.size), got=alpha.batch_size)
        with self._lock:
            self._values[indices] = alpha.values.data
            self._filled[indices] = True

    def fill_identity(self) -> None:
        with self._lock:
            self._values[:] = self.mode.identity_values()
            self._filled[:] = True

    def snapshot(self, epoch: int) -> None:
        with self._lock:
            self.snapshots[epoch] = self._values.copy()

    def snapshot_angles(self, epoch: int) -> np.ndarray:
        """Rotation component (radians) of every row of one snapshot."""
        if epoch not in self.snapshots:
            raise CacheError(f"no cache snapshot for epoch {epoch}",
                             available=sorted(self.snapshots))
        return AffineParams(self.mode, Tensor(self.snapshots[epoch])).angles()

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        epochs = sorted(self.snapshots)
        stacked = (np.stack([self.snapshots[e] for e in epochs]) if epochs
                   else np.zeros((0, self.size, self.mode.n_params)))
        payload = {
            'mode': np.array(self.mode.value),
            'values': self._values,
            'filled': self._filled,
            'snapshot_epochs': np.array(epochs, dtype=np.int64),
            'snapshot_values': stacked,
        }
        if self.labels is not None:
            payload['labels'] = self.labels
        if self.applied_angles is not None:
            payload['applied_angles'] = self.applied_angles
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            np.savez(f, **payload)
        os.replace(tmp, path)
        logger.info("saved alpha cache (%d rows, %d snapshots) to %s", self.size, len(epochs), path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AlphaCache":
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as archive:
                cache = cls(int(archive['values'].shape[0]), TransformMode(str(archive['mode'])))
                cache._values[...] = archive['values']
                cache._filled[...] = archive['filled']
                for epoch, values in zip(archive['snapshot_epochs'], archive['snapshot_values']):
                    cache.snapshots[int(epoch)] = values.copy()
                if 'labels' in archive:
                    cache.labels = archive['labels'].copy()
                if 'applied_angles' in archive:
                    cache.applied_angles = archive['applied_angles'].copy()
        except (OSError, KeyError, ValueError) as exc:
            raise CacheError(f"cannot read alpha cache: {exc}", path=path) from exc
        return cache
