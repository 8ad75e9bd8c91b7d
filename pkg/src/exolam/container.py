"""Binary container shared by datasets and checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"EXOLAM\\x00\\x01"
    version    u32       currently 1
    json_len   u32
    json       utf-8     config block, keys sorted
    n_arrays   u32
    per array: name_len u16, name utf-8, dtype u8 (0=f64, 1=i64, 2=f32),
               ndim u8, shape u64 * ndim
    payloads   row-major, in table order, little-endian
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EXOLAM\x00\x01"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1, np.dtype("float32"): 2}


class ContainerError(ValueError):
    pass


def dumps(config: dict, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    prepared = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "b" or arr.dtype.kind in "iu":
            arr = arr.astype(np.int64)
        if arr.dtype not in _CODES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array {name!r}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        prepared.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]))
    for arr in prepared:
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        return _loads(data)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
        if isinstance(exc, ContainerError):
            raise
        raise ContainerError(f"corrupt or truncated container: {exc}") from None


def _loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise ContainerError("not an exolam container (bad magic)")
    off = 8
    version, jlen = struct.unpack_from("<II", data, off)
    off += 8
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    config = json.loads(data[off : off + jlen].decode("utf-8"))
    off += jlen
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    table = []
    for _ in range(n):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {code} for array {name!r}")
        table.append((name, _DTYPES[code], shape))
    arrays = {}
    for name, dt, shape in table:
        count = int(np.prod(shape)) if shape else 1
        if off + count * dt.itemsize > len(data):
            raise ContainerError(f"payload for {name!r} is truncated")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
        off += count * dt.itemsize
        arrays[name] = arr.astype(dt.newbyteorder("="))
    if off != len(data):
        raise ContainerError("trailing bytes after payload")
    return config, arrays


def write(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(config, arrays))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
