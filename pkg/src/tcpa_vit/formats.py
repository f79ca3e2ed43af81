"""Little-endian binary containers.

``TCPW`` holds named float64 arrays::

    magic "TCPW" | u32 version=1 | u32 count
    count x ( u16 name_len | utf-8 name | u8 rank | rank x u32 extent | float64 data )

There is no padding between records. Readers parse the whole file before
returning, so a failed load never yields a partially populated object.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

WEIGHTS_MAGIC = b"TCPW"
WEIGHTS_VERSION = 1


class FormatError(Exception):
    """Base class for container load failures."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class ShapeTableError(FormatError):
    pass


class LabelRangeError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(
                f"truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        if arr.ndim > 255 or len(raw_name) > 0xFFFF:
            raise ValueError(f"array {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_arrays(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != WEIGHTS_MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != WEIGHTS_VERSION:
        raise VersionError(f"unsupported version {version}, expected {WEIGHTS_VERSION}")
    (count,) = r.unpack("<I", "array count")
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of record {i}")
        try:
            name = r.take(name_len, f"name of record {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ShapeTableError(f"record {i} has an invalid utf-8 name") from exc
        if name in arrays:
            raise ShapeTableError(f"duplicate array name {name!r}")
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        shape = r.unpack(f"<{rank}I", f"extents of {name!r}")
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(8 * n, f"data of array {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if r.remaining:
        raise ShapeTableError(f"{r.remaining} trailing bytes after {count} declared arrays")
    return arrays


def save_arrays(arrays: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(encode_arrays(arrays))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())
