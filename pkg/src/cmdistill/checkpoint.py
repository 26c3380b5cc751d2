"""Binary checkpoint container.

Layout (little-endian): b"CMDL", version u32, tensor count u64, then per tensor
name length u32, UTF-8 name, rank u32, dims u64 x rank, dtype tag u8, raw values.
Tag 0 is float32; tag 1 (float64) is an extension used for f64 runs.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"CMDL"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {v: k for k, v in _TAGS.items()}


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", _TAGS[dt]))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, where: str = "checkpoint") -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"{where}: truncated at byte {pos} (needed {n} more)")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"{where}: bad magic, not a CMDL checkpoint")
    version, count = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise FormatError(f"{where}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{where}: tensor name is not UTF-8") from exc
        if name in out:
            raise FormatError(f"{where}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _DTYPES:
            raise FormatError(f"{where}: tensor {name!r} has unknown dtype tag {tag}")
        dt = _DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(bytes(take(size)), dtype=dt).reshape(dims).copy()
    if pos != len(view):
        raise FormatError(f"{where}: {len(view) - pos} trailing bytes after {count} tensors")
    return out


def save_checkpoint(tensors: Mapping[str, np.ndarray], path: str | Path) -> None:
    path = Path(path)
    data = encode_checkpoint(tensors)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write checkpoint {path}: {exc.strerror}") from exc


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def prefixed(prefix: str, state: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def section(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Sub-dictionary of names under ``prefix.``, with the prefix stripped."""
    p = prefix + "."
    out = {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}
    if not out:
        raise FormatError(f"checkpoint has no tensors under {prefix!r}")
    return out
