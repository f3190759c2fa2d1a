"""
RNTENSOR container: 8-byte magic, little-endian u64 header length, UTF-8 JSON
header, then raw little-endian float32 data.
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import structlog

from app.utils.exceptions import (
    CheckpointNotFoundException,
    ContainerFormatException,
    DependencyException,
)

logger = structlog.get_logger(__name__)

MAGIC = b"RNTENSOR"
_DTYPE = "<f4"

PathLike = Union[str, Path]


def _write(path: PathLike, header: Dict[str, Any], payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<Q", len(header_bytes)))
        handle.write(header_bytes)
        handle.write(payload)


def _read(path: PathLike) -> Tuple[Dict[str, Any], bytes]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise
    except OSError as e:
        raise ContainerFormatException(
            f"Could not read container {path}",
            error_code="CONTAINER_IO",
            details={"path": str(path), "error": str(e)},
        )

    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise ContainerFormatException(
            f"{path} is not an RNTENSOR file",
            error_code="CONTAINER_MAGIC",
            details={"path": str(path)},
        )
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerFormatException(
            f"Corrupt header in {path}",
            error_code="CONTAINER_HEADER",
            details={"path": str(path), "error": str(e)},
        )
    if header.get("dtype") != "f32":
        raise ContainerFormatException(
            f"Unsupported dtype {header.get('dtype')!r} in {path}",
            error_code="CONTAINER_DTYPE",
            details={"path": str(path)},
        )
    return header, raw[start + header_len :]


def _decode(payload: bytes, offset: int, shape, path) -> np.ndarray:
    count = int(np.prod(shape)) if len(shape) else 1
    end = offset + count
    if end * 4 > len(payload):
        raise ContainerFormatException(
            f"Truncated data in {path}",
            error_code="CONTAINER_TRUNCATED",
            details={"path": str(path), "needed": end * 4, "available": len(payload)},
        )
    data = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=offset * 4)
    return data.astype(np.float32).reshape(shape)


def save_tensor(path: PathLike, array: np.ndarray, meta: Optional[Dict[str, Any]] = None):
    """Write a single array (images, sinograms)"""
    data = np.ascontiguousarray(np.asarray(array, dtype=_DTYPE))
    header = {"dtype": "f32", "shape": list(data.shape), "meta": meta or {}}
    _write(path, header, data.tobytes(order="C"))


def load_tensor(path: PathLike) -> Tuple[np.ndarray, Dict[str, Any]]:
    try:
        header, payload = _read(path)
    except FileNotFoundError:
        raise DependencyException(
            f"Input not found: {path}",
            error_code="INPUT_NOT_FOUND",
            details={"path": str(path)},
        )
    if "shape" not in header:
        raise ContainerFormatException(
            f"{path} holds a parameter store, not a tensor",
            error_code="CONTAINER_KIND",
            details={"path": str(path)},
        )
    return _decode(payload, 0, tuple(header["shape"]), path), header.get("meta", {})


def save_params(path: PathLike, store, meta: Optional[Dict[str, Any]] = None):
    """Write every entry of a ParamStore into one file, in name order"""
    entries = []
    chunks = []
    offset = 0
    for name in store.names():
        value = np.ascontiguousarray(np.asarray(store.value(name), dtype=_DTYPE))
        entries.append({"name": name, "shape": list(value.shape), "offset": offset})
        chunks.append(value.tobytes(order="C"))
        offset += value.size
    header = {"dtype": "f32", "entries": entries, "meta": meta or {}}
    _write(path, header, b"".join(chunks))
    logger.debug("params_saved", path=str(path), entries=len(entries), values=offset)


def load_params(path: PathLike):
    from app.services.autodiff import ParamStore

    try:
        header, payload = _read(path)
    except FileNotFoundError:
        raise CheckpointNotFoundException(
            f"Checkpoint not found: {path}",
            error_code="CHECKPOINT_NOT_FOUND",
            details={"path": str(path)},
        )
    if "entries" not in header:
        raise ContainerFormatException(
            f"{path} holds a tensor, not a parameter store",
            error_code="CONTAINER_KIND",
            details={"path": str(path)},
        )
    store = ParamStore()
    for entry in header["entries"]:
        store.add(entry["name"], _decode(payload, int(entry["offset"]), tuple(entry["shape"]), path))
    return store, header.get("meta", {})


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
