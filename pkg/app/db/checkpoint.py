"""Little-endian tensor checkpoint format.

Layout::

    magic     4 bytes  b"RFCK"
    version   u32
    header    u32 length + UTF-8 JSON (architecture, step, calibration constants)
    count     u32
    tensors   count x [u16 name length, name, u8 dtype code, u8 ndim, ndim x u32 dims, raw data]

Dtype codes: 0 float32, 1 float64.
"""
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from app.core.errors import ImageFormatError, MissingArtifactError

MAGIC = b"RFCK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointFormatError(ImageFormatError):
    pass


def encode_checkpoint(tensors: Mapping[str, np.ndarray], header: Mapping[str, Any]) -> bytes:
    header_bytes = json.dumps(dict(header), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header_bytes)), header_bytes, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        array = np.asarray(tensors[name])
        if array.dtype not in _DTYPE_CODES:
            raise CheckpointFormatError(f"Tensor {name} has unsupported dtype {array.dtype}")
        code = _DTYPE_CODES[array.dtype]
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<BB", code, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_CODE_DTYPES[code]).tobytes())
    return b"".join(chunks)


def decode_checkpoint(data: bytes, source="<bytes>") -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    def take(count: int, offset: int) -> tuple[bytes, int]:
        if offset + count > len(data):
            raise CheckpointFormatError(f"Truncated checkpoint {source}")
        return data[offset:offset + count], offset + count

    magic, offset = take(4, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source} is not a checkpoint (magic {magic!r})")
    raw, offset = take(8, offset)
    version, header_length = struct.unpack("<II", raw)
    if version != VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version} in {source}")
    raw, offset = take(header_length, offset)
    header = json.loads(raw.decode("utf-8"))
    raw, offset = take(4, offset)
    (count,) = struct.unpack("<I", raw)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, offset = take(2, offset)
        (name_length,) = struct.unpack("<H", raw)
        raw, offset = take(name_length, offset)
        name = raw.decode("utf-8")
        raw, offset = take(2, offset)
        code, ndim = struct.unpack("<BB", raw)
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"Unknown dtype code {code} for tensor {name} in {source}")
        raw, offset = take(4 * ndim, offset)
        shape = struct.unpack(f"<{ndim}I", raw)
        dtype = _CODE_DTYPES[code]
        raw, offset = take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize, offset)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return tensors, header


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], header: Mapping[str, Any]) -> Path:
    """Write-temp-then-rename so a reader never sees a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp = path.with_name(path.name + ".tmp")
    with open(temp, "wb") as handle:
        handle.write(encode_checkpoint(tensors, header))
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(temp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Checkpoint not found: {path}", path=path)
    return decode_checkpoint(path.read_bytes(), source=path)
