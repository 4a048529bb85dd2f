"""
Timbre Checkpoint Container.
Flat little-endian binary of named float32 tensors, shared by training
checkpoints and feature caches.

Layout: b"TMBR", u32 version, u32 count, then per tensor
u32 name length, utf-8 name, u32 rank, u32 dims[rank], float32 data.
"""
import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict

import numpy as np

from app.exceptions import CheckpointError, CheckpointVersionError
from app.features import is_coherent
from app.models import FeatureStack

logger = logging.getLogger(__name__)

MAGIC = b"TMBR"
FORMAT_VERSION = 1
COHERENCE_RTOL = 1e-5

_U32 = struct.Struct("<I")
_HEADER = struct.Struct("<4sII")


# ==================== Scalar and text encoding ====================


def encode_bytes(data: bytes) -> np.ndarray:
    """Bytes as exactly representable float32 values."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.float32)


def decode_bytes(values: np.ndarray) -> bytes:
    arr = np.asarray(values)
    if arr.size and (arr.min() < 0 or arr.max() > 255 or np.any(arr != np.round(arr))):
        raise CheckpointError("byte tensor holds values outside 0..255")
    return arr.astype(np.uint8).tobytes()


def encode_text(text: str) -> np.ndarray:
    return encode_bytes(text.encode("utf-8"))


def decode_text(values: np.ndarray) -> str:
    return decode_bytes(values).decode("utf-8")


def encode_json(obj: Any) -> np.ndarray:
    return encode_text(json.dumps(obj, sort_keys=True))


def decode_json(values: np.ndarray) -> Any:
    return json.loads(decode_text(values))


# ==================== Container ====================


def write_container(entries: Dict[str, np.ndarray], path: Path) -> None:
    """Write tensors atomically through a uniquely named sibling temp file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile(
        dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False
    )
    tmp = Path(handle.name)
    try:
        with handle:
            handle.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(entries)))
            for name, value in entries.items():
                arr = np.ascontiguousarray(value, dtype="<f4")
                encoded = name.encode("utf-8")
                handle.write(_U32.pack(len(encoded)))
                handle.write(encoded)
                handle.write(_U32.pack(arr.ndim))
                for dim in arr.shape:
                    handle.write(_U32.pack(dim))
                handle.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise CheckpointError(
                f"{self.path} is truncated while reading {what}",
                path=str(self.path),
                offset=self.offset,
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def read_container(path: Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}", path=str(path)) from e

    reader = _Reader(data, path)
    magic, version, count = _HEADER.unpack(reader.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a timbre container (magic {magic!r})", path=str(path))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {version}; this build reads version {FORMAT_VERSION}",
            path=str(path),
            version=version,
        )

    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u32("name length"), "name").decode("utf-8", errors="replace")
        rank = reader.u32(f"rank of {name}")
        shape = tuple(reader.u32(f"shape of {name}") for _ in range(rank))
        n_values = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(4 * n_values, f"data of {name}")
        entries[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if reader.offset != len(data):
        raise CheckpointError(f"{path} has trailing bytes after {count} tensors", path=str(path))
    return entries


def require(entries: Dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in entries:
        raise CheckpointError(f"container is missing tensor {name!r}", tensor=name)
    return entries[name]


# ==================== Feature cache ====================


def save_feature_stack(stack: FeatureStack, path: Path) -> None:
    entries = {name: value for name, value in stack.to_dict().items()}
    entries["meta"] = encode_json(
        {"gamma": stack.gamma, "eta": stack.eta, "sample_rate": stack.sample_rate}
    )
    write_container(entries, path)


def load_feature_stack(path: Path, check: bool = True) -> FeatureStack:
    """Read a cached stack; channel coherence is re-checked against the mel channel."""
    entries = read_container(path)
    meta = decode_json(require(entries, "meta"))
    stack = FeatureStack(
        mel=require(entries, "mel").astype(np.float64),
        mfcc=require(entries, "mfcc").astype(np.float64),
        sdiff=require(entries, "sdiff").astype(np.float64),
        senv=require(entries, "senv").astype(np.float64),
        phase=require(entries, "phase").astype(np.float64),
        **meta,
    )
    # float32 storage: tolerance follows the mel magnitude
    scale = float(np.max(np.abs(stack.mel), initial=0.0))
    if check and not is_coherent(stack, atol=COHERENCE_RTOL * scale, rtol=COHERENCE_RTOL):
        raise CheckpointError(f"feature cache {path} fails channel coherence", path=str(path))
    return stack
