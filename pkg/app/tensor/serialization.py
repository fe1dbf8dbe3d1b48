"""MNTW binary tensor container.

Layout (little endian): ``b"MNTW"``, u32 version, u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, a u8 rank, rank u32 dimensions and
the float32 data in C order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"MNTW"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class TensorFormatError(ValueError):
    """Raised for malformed tensor files; carries the file and byte offset."""

    def __init__(self, path: Path, offset: int, message: str) -> None:
        self.path = Path(path)
        self.offset = offset
        super().__init__(f"{path}: {message} (at byte offset {offset})")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"Tensor name too long: {name[:40]}...")
        array = np.asarray(array)
        if array.ndim > 0xFF:
            raise ValueError(f"Tensor {name!r} rank {array.ndim} too large")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_F32).tobytes())
    return b"".join(chunks)


def decode_tensors(data: bytes, path: Path = Path("<memory>")) -> Dict[str, np.ndarray]:
    offset = 0

    def take(size: int, what: str) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise TensorFormatError(path, offset, f"truncated while reading {what}")
        chunk = data[offset : offset + size]
        offset += size
        return chunk

    if take(4, "magic") != MAGIC:
        raise TensorFormatError(path, 0, "bad magic, expected MNTW")
    version_offset = offset
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise TensorFormatError(path, version_offset, f"unsupported format version {version}")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name_offset = offset
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TensorFormatError(path, name_offset, "tensor name is not UTF-8") from exc
        if name in tensors:
            raise TensorFormatError(path, name_offset, f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dimensions"))
        size = int(np.prod(shape, dtype=np.int64))
        raw = take(size * _F32.itemsize, f"data of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=_F32).astype(np.float32).reshape(shape)
    if offset != len(data):
        raise TensorFormatError(path, offset, f"{len(data) - offset} trailing bytes")
    return tensors


def save_tensors(path: Path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))


def load_tensors(path: Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    return decode_tensors(path.read_bytes(), path)
