"""Binary model checkpoints.

Layout (little-endian)::

    b"AVAE1"  uint16 version
    uint32 n  config JSON (n bytes, utf-8)
    uint32 count
    count x [uint16 n  name  uint8 dtype  uint8 rank  rank x uint32 dim  payload]
    uint32 n  rng state JSON (n = 0 when absent)

dtype 0 is f32, 1 is f64. Running batch-norm statistics are stored as ordinary
tensors named ``<layer>.running_mean`` / ``<layer>.running_var``.
"""

import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional, Union

import numpy as np

from .exceptions import CheckpointError
from .vae import VaeConfig, VaeModel

logger = logging.getLogger(__name__)

MAGIC = b"AVAE1"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: Optional[Dict[str, Any]] = None

    def build_model(self) -> VaeModel:
        if "vae" not in self.config:
            raise CheckpointError("checkpoint config has no 'vae' section")
        dtype = next(iter(self.tensors.values())).dtype if self.tensors else None
        model = VaeModel.init(VaeConfig.from_dict(self.config["vae"]), dtype=dtype)
        model.load_state_dict(self.tensors)
        return model.eval()

    def restore_rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng


def _write_blob(f: BinaryIO, blob: bytes) -> None:
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<H", VERSION))
    _write_blob(f, json.dumps(checkpoint.config, sort_keys=True).encode("utf-8"))
    f.write(struct.pack("<I", len(checkpoint.tensors)))
    for name, value in checkpoint.tensors.items():
        value = np.asarray(value)
        dtype = value.dtype.newbyteorder("<")
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {value.dtype}")
        encoded = name.encode("utf-8")
        f.write(struct.pack("<H", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<BB", DTYPE_CODES[dtype], value.ndim))
        f.write(struct.pack(f"<{value.ndim}I", *value.shape))
        f.write(np.ascontiguousarray(value, dtype=dtype).tobytes())
    state = json.dumps(checkpoint.rng_state, sort_keys=True).encode("utf-8") if checkpoint.rng_state else b""
    _write_blob(f, state)
    return f.getvalue()


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated", path=self.path, offset=self.pos, wanted=n)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


def decode_checkpoint(data: bytes, path: Union[str, Path] = "<memory>") -> Checkpoint:
    reader = _Reader(data, Path(path))
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an AVAE checkpoint (bad magic)", path=path)
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointError("unsupported checkpoint version", path=path, expected=VERSION, got=version)
    try:
        config = json.loads(reader.blob().decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint config: {exc}", path=path) from exc

    tensors: Dict[str, np.ndarray] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, rank = reader.unpack("<BB")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"tensor {name} has unknown dtype code {code}", path=path)
        dims = reader.unpack(f"<{rank}I")
        dtype = CODE_DTYPES[code]
        size = int(np.prod(dims)) * dtype.itemsize
        tensors[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))

    state_blob = reader.blob()
    rng_state = json.loads(state_blob.decode("utf-8")) if state_blob else None
    if reader.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint", path=path, extra=len(data) - reader.pos)
    return Checkpoint(config, tensors, rng_state)


def save_checkpoint(path: Union[str, Path], model: VaeModel, config: Dict[str, Any],
                    rng: Optional[np.random.Generator] = None) -> Path:
    """Write ``model`` and a config snapshot; the file appears atomically."""
    path = Path(path)
    snapshot = dict(config)
    snapshot["vae"] = model.config.to_dict()
    checkpoint = Checkpoint(snapshot, dict(model.state_dict()),
                            rng.bit_generator.state if rng is not None else None)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(encode_checkpoint(checkpoint))
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint: {exc.strerror or exc}", path=path) from exc
    logger.info("saved checkpoint with %d tensors to %s", len(checkpoint.tensors), path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc.strerror or exc}", path=path) from exc
    return decode_checkpoint(data, path)
