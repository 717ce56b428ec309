"""BTAR: a tiny binary container for named tensors.

Layout (all integers little-endian):
    magic "BTAR" | version u32 = 1 | record count u32
    per record: name length u16 | name UTF-8 | dtype code u8 | rank u8
                | dims u64 each | raw little-endian payload

dtype codes: 1 = f32, 2 = f64, 3 = u8. Round trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"BTAR"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODES_BY_KIND = {"<f4": 1, "<f8": 2, "|u1": 3}


class FormatError(ValueError):
    """Malformed archive bytes; the message carries the byte offset."""


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype
    if dt == np.float32:
        return 1
    if dt == np.float64:
        return 2
    if dt == np.uint8:
        return 3
    raise ValueError(f"unsupported dtype {dt} (use f32, f64 or u8)")


def archive_save(path, records: dict) -> None:
    """Write named arrays to `path`. Names must be unique (dict guarantees it)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(records)))
        for name, arr in records.items():
            arr = np.asarray(arr)
            code = _dtype_code(arr)
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"record name too long: {name[:32]}...")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def archive_load(path) -> dict:
    """Read all records from `path`; raises FormatError on malformed input."""
    with open(path, "rb") as f:
        data = f.read()

    offset = 0

    def take(n, what):
        nonlocal offset
        if offset + n > len(data):
            raise FormatError(f"truncated archive: {what} at offset {offset}")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    records = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} at offset {offset - 2}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        dtype = _DTYPE_CODES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = take(n_bytes, f"payload of {name!r}")
        if name in records:
            raise FormatError(f"duplicate record name {name!r} at offset {offset}")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return records
