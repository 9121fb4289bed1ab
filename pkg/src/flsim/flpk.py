"""FLPK binary container for named tensors.

Layout (little-endian)::

    "FLPK" | version u16 = 1 | tag u8 | element_type u8 | tensor_count u32
    per tensor: name_len u16 | name (UTF-8) | rank u8 | extents u32 * rank | payload
    FNV-1a-32 of every preceding byte (u32)

Tags: 0 base, 1 personal, 2 full, 3 dataset. Element types: 0 f32, 1 f64.
"""

from __future__ import annotations

import struct

import numpy as np

from . import kernels
from .errors import CorruptFileError

MAGIC = b"FLPK"
VERSION = 1
TAGS = {"base": 0, "personal": 1, "full": 2, "dataset": 3}
TAG_NAMES = {v: k for k, v in TAGS.items()}
ELEMENT_TYPES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

_HEADER = struct.Struct("<4sHBBI")
MAX_RANK = 32  # numpy arrays cannot hold more axes than this


def fnv1a_32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h = ((h ^ b) * 0x01000193) & 0xFFFFFFFF
    return h


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def pack(entries: dict[str, np.ndarray], tag: str, dtype=np.float32) -> bytes:
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in ELEMENT_TYPES:
        raise ValueError(f"unsupported element type {dtype}")
    parts = [_HEADER.pack(MAGIC, VERSION, TAGS[tag], ELEMENT_TYPES[dt], len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.ndim < 1 or arr.ndim > 255:
            raise ValueError(f"{name}: rank must be in [1, 255]")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", checksum(body))


def checksum(body: bytes) -> int:
    return kernels.fnv1a_32(body)


def packed_size(entries: dict[str, np.ndarray], dtype=np.float32) -> int:
    """Byte length ``pack`` would produce, without building the buffer."""
    size = _HEADER.size + 4
    item = np.dtype(dtype).itemsize
    for name, arr in entries.items():
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * np.ndim(arr) + item * np.size(arr)
    return size


def unpack(data: bytes) -> tuple[str, np.dtype, dict[str, np.ndarray]]:
    """Parse a container; returns ``(tag, dtype, entries)``."""
    data = bytes(data)
    if len(data) < _HEADER.size + 4:
        raise CorruptFileError("truncated header", len(data))
    magic, version, tag, etype, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CorruptFileError(f"unsupported version {version}", 4)
    if tag not in TAG_NAMES:
        raise CorruptFileError(f"unknown partition tag {tag}", 6)
    if etype not in DTYPES:
        raise CorruptFileError(f"unknown element type {etype}", 7)
    dt = DTYPES[etype]
    end = len(data) - 4
    pos = _HEADER.size

    def need(nbytes, what):
        if pos + nbytes > end:
            raise CorruptFileError(f"truncated {what}: need {nbytes} bytes, {end - pos} left", pos)

    entries = {}
    for _ in range(count):
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(nlen, "name")
        try:
            name = data[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError("name is not valid UTF-8", pos) from None
        pos += nlen
        need(1, "rank")
        rank = data[pos]
        pos += 1
        if not 1 <= rank <= MAX_RANK:
            raise CorruptFileError(f"{name}: rank {rank} outside [1, {MAX_RANK}]", pos - 1)
        need(4 * rank, "extents")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        if min(dims) < 1:
            raise CorruptFileError(f"{name}: zero extent in {dims}", pos - 4 * rank)
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"payload of {name}")
        if name in entries:
            raise CorruptFileError(f"duplicate tensor name {name}", pos)
        entries[name] = np.frombuffer(data[pos:pos + nbytes], dtype=dt).reshape(dims).copy()
        pos += nbytes
    if pos != end:
        raise CorruptFileError(f"{end - pos} unexpected bytes after last tensor", pos)
    (stored,) = struct.unpack_from("<I", data, end)
    if stored != checksum(data[:end]):
        raise CorruptFileError("checksum mismatch", end)
    return TAG_NAMES[tag], np.dtype(dt.newbyteorder("=")), entries
