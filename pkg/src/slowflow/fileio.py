"""Binary field files (``NOMF``) and parameter checkpoints (``NOMW``).

All integers are little-endian u32 and all payloads little-endian float32.

Field file::

    b"NOMF" version n_lat n_lon n_channels n_records
    n_channels x (name_len, utf-8 name bytes)
    land mask, n_lat * n_lon bytes (1 = land)
    n_records x (day_index, float32[n_channels, n_lat, n_lon])

Checkpoint::

    b"NOMW" version
    repeated until EOF: name_len, name, rank, rank x extent, float32 payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .data import FieldState

FIELD_MAGIC = b"NOMF"
WEIGHT_MAGIC = b"NOMW"
FIELD_VERSION = 1
WEIGHT_VERSION = 1

_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: expected {n} bytes for {what}, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype=_F32).astype(np.float32)

    @property
    def at_end(self) -> bool:
        return self.pos >= len(self.buf)


def _header(r: _Reader, magic: bytes, version: int) -> None:
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    v = r.u32("version")
    if v != version:
        raise FormatError(f"unsupported version {v}, expected {version}", 4)


# ---------------------------------------------------------------- field files


def encode_fields(seq: list[FieldState], channels=None, land_mask=None) -> bytes:
    if seq:
        channels = seq[0].channels
        land_mask = seq[0].land_mask
        n_lat, n_lon = land_mask.shape
    else:
        channels = tuple(channels or ())
        land_mask = np.zeros((0, 0), bool) if land_mask is None else np.asarray(land_mask, bool)
        n_lat, n_lon = land_mask.shape
    parts = [FIELD_MAGIC, _U32.pack(FIELD_VERSION)]
    for v in (n_lat, n_lon, len(channels), len(seq)):
        parts.append(_U32.pack(v))
    for name in channels:
        b = name.encode("utf-8")
        parts += [_U32.pack(len(b)), b]
    parts.append(np.asarray(land_mask, dtype=np.uint8).tobytes())
    for s in seq:
        if s.channels != channels or s.values.shape != (len(channels), n_lat, n_lon):
            raise ValueError(f"record for day {s.day} does not match the file layout")
        parts += [_U32.pack(int(s.day)), np.ascontiguousarray(s.values, dtype=_F32).tobytes()]
    return b"".join(parts)


def decode_fields(buf: bytes) -> list[FieldState]:
    seq, _, _ = decode_fields_with_header(buf)
    return seq


def decode_fields_with_header(buf: bytes):
    r = _Reader(buf)
    _header(r, FIELD_MAGIC, FIELD_VERSION)
    n_lat, n_lon, n_ch, n_rec = (r.u32(w) for w in ("n_lat", "n_lon", "n_channels", "n_records"))
    names = []
    for k in range(n_ch):
        n = r.u32(f"name length of channel {k}")
        names.append(r.take(n, f"name of channel {k}").decode("utf-8"))
    mask = np.frombuffer(r.take(n_lat * n_lon, "land mask"), dtype=np.uint8).reshape(n_lat, n_lon).astype(bool)
    channels = tuple(names)
    seq = []
    for k in range(n_rec):
        day = r.u32(f"day index of record {k}")
        vals = r.floats(n_ch * n_lat * n_lon, f"payload of record {k}").reshape(n_ch, n_lat, n_lon)
        seq.append(FieldState(day, channels, vals, mask.copy()))
    if not r.at_end:
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last record", r.pos)
    return seq, channels, mask


def write_fields(seq: list[FieldState], path, channels=None, land_mask=None) -> None:
    atomic_write(path, encode_fields(seq, channels, land_mask))


def read_fields(path) -> list[FieldState]:
    return decode_fields(Path(path).read_bytes())


def field_file_size(n_lat: int, n_lon: int, channels, n_records: int) -> int:
    """Expected byte size from the header arithmetic."""
    names = sum(4 + len(c.encode("utf-8")) for c in channels)
    return 4 + 4 + 16 + names + n_lat * n_lon + n_records * (4 + 4 * len(channels) * n_lat * n_lon)


# ---------------------------------------------------------------- checkpoints


def encode_weights(params: dict[str, np.ndarray]) -> bytes:
    parts = [WEIGHT_MAGIC, _U32.pack(WEIGHT_VERSION)]
    for name, value in params.items():
        arr = np.asarray(value, dtype=_F32)  # tobytes() is C-order; ascontiguousarray would promote 0-d to 1-d
        b = name.encode("utf-8")
        parts += [_U32.pack(len(b)), b, _U32.pack(arr.ndim)]
        parts += [_U32.pack(n) for n in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_weights(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    _header(r, WEIGHT_MAGIC, WEIGHT_VERSION)
    out: dict[str, np.ndarray] = {}
    while not r.at_end:
        n = r.u32("name length")
        name = r.take(n, "parameter name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"extent {i} of {name}") for i in range(rank))
        out[name] = r.floats(int(np.prod(shape, dtype=np.int64)), f"payload of {name}").reshape(shape)
    return out


def write_weights(params: dict[str, np.ndarray], path) -> None:
    atomic_write(path, encode_weights(params))


def read_weights(path) -> dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes())
