"""Bit-exact named-tensor container.

Layout (all integers little-endian):

    magic   4 bytes         b"SNTP"
    version u16             currently 1
    count   u64             number of entries
    table   count records   name_len u16, name utf-8, dtype u8, rank u8,
                            dims rank * u64
    payload count blobs     row-major tensor bytes, in table order

The format is self-describing so readers in any language can decode it
without this module.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SNTP"
VERSION = 1

# dtype code <-> numpy dtype (little-endian on the wire)
_DTYPE_CODES = {
    1: np.dtype("<u1"),
    2: np.dtype("<i8"),
    3: np.dtype("<f4"),
    4: np.dtype("<f8"),
    5: np.dtype("<u2"),
    6: np.dtype("<u8"),
}
_CODE_FOR_KIND = {np.dtype(d).str.lstrip("<|="): c for c, d in _DTYPE_CODES.items()}


class ContainerError(ValueError):
    pass


class BadMagic(ContainerError):
    pass


class VersionMismatch(ContainerError):
    pass


class TruncatedTensor(ContainerError):
    """Raised when a payload (or the header) ends before its declared size."""


class UnsupportedDtype(ContainerError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    key = np.dtype(arr.dtype).str.lstrip("<|=")
    try:
        return _CODE_FOR_KIND[key]
    except KeyError:
        raise UnsupportedDtype(f"dtype {arr.dtype} has no container encoding") from None


def write_tensors(entries: dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays; iteration order of ``entries`` is preserved."""
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<Q", len(entries))]
    payloads = []
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr)
        wire = arr.astype(_DTYPE_CODES[code], copy=False)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", code, wire.ndim))
        parts.append(struct.pack(f"<{wire.ndim}Q", *wire.shape) if wire.ndim else b"")
        payloads.append(wire.tobytes(order="C"))
    return b"".join(parts) + b"".join(payloads)


def read_tensors(data: bytes) -> dict[str, np.ndarray]:
    """Decode a container back into {name: array}, in written order."""
    if data[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {bytes(data[:4])!r}")
    if len(data) < 14:
        raise TruncatedTensor("header ends before the entry count")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"container version {version}, reader supports {VERSION}")
    (count,) = struct.unpack_from("<Q", data, 6)
    pos = 14

    table = []
    for _ in range(count):
        if pos + 2 > len(data):
            raise TruncatedTensor("entry table ends mid-record")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 2 > len(data):
            raise TruncatedTensor(f"entry table ends inside {name!r}")
        code, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        if code not in _DTYPE_CODES:
            raise UnsupportedDtype(f"entry {name!r} carries unknown dtype code {code}")
        if pos + 8 * rank > len(data):
            raise TruncatedTensor(f"entry table ends inside dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        table.append((name, _DTYPE_CODES[code], dims))

    out: dict[str, np.ndarray] = {}
    for name, dtype, dims in table:
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize if dims else dtype.itemsize
        if pos + nbytes > len(data):
            raise TruncatedTensor(f"payload of {name!r} truncated "
                                  f"(need {nbytes} bytes, {len(data) - pos} remain)")
        flat = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
        out[name] = flat.reshape(dims).copy()
        pos += nbytes
    return out
