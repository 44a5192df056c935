"""Versioned binary cache for Gram matrices, eigendecompositions, and banks.

Layout (all little-endian):

    magic   4 bytes  b"LACQ"
    version u16
    key     64 bytes sha256 hex of the content key
    count   u16      number of named arrays
    per array:
        name_len u16, name utf-8
        ndim     u8,  dims u32 each
        payload  complex64, C order

The payload is complex64 by design, which rounds float64 results; callers
that need full precision recompute instead of loading (the cache is an
opt-in accelerator, not the source of truth).
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "content_key",
    "preamble_grid_key",
    "bank_key",
    "write_cache",
    "read_cache",
    "CacheError",
]

MAGIC = b"LACQ"
VERSION = 1


class CacheError(RuntimeError):
    pass


def content_key(*parts) -> str:
    """sha256 over a canonical byte encoding of strings, numbers, arrays."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, np.ndarray):
            h.update(b"A")
            h.update(str(part.dtype).encode())
            h.update(np.ascontiguousarray(part).tobytes())
        elif isinstance(part, (bytes, bytearray)):
            h.update(b"B")
            h.update(bytes(part))
        elif isinstance(part, float):
            h.update(b"F")
            h.update(struct.pack("<d", part))
        elif isinstance(part, (int, np.integer)):
            h.update(b"I")
            h.update(struct.pack("<q", int(part)))
        else:
            h.update(b"S")
            h.update(str(part).encode())
    return h.hexdigest()


def preamble_grid_key(preambles, grid) -> str:
    """Content key of a (preamble set, grid) pair, the Gram cache identity."""
    parts = []
    for p in preambles:
        parts.append(np.asarray(p.chips))
        parts.append(p.pulse.kind)
        parts.append(p.pulse.chip_duration)
        parts.append(p.pulse.oversampling)
        parts.append(p.pulse.truncation_chips)
        parts.append(p.pulse.rolloff)
    parts += [grid.n_users, grid.doppler_half, grid.n_delays,
              grid.delay_step, grid.doppler_step, grid.shift_cells]
    return content_key(*parts)


def bank_key(gram_key: str, n_samplers: int, kind: str, seed: int) -> str:
    """Cache identity of a sampler bank derived from a Gram matrix."""
    return content_key(gram_key, n_samplers, kind, seed)


def write_cache(path, key: str, arrays: dict) -> None:
    if len(key) != 64:
        raise CacheError("key must be a 64-char sha256 hex digest")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(key.encode("ascii"))
        fh.write(struct.pack("<H", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype=np.complex64))
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<c8", copy=False).tobytes())


def read_cache(path, expected_key: str | None = None) -> tuple[str, dict]:
    path = Path(path)
    data = path.read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CacheError(f"{path}: truncated cache file")
        out = data[off:off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise CacheError(f"{path}: bad magic")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CacheError(f"{path}: cache version {version}, expected {VERSION}")
    key = take(64).decode("ascii")
    if expected_key is not None and key != expected_key:
        raise CacheError(f"{path}: cache key mismatch")
    (count,) = struct.unpack("<H", take(2))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * n_items), dtype="<c8").reshape(shape)
        arrays[name] = arr.astype(np.complex64)
    if off != len(data):
        raise CacheError(f"{path}: trailing bytes after payload")
    return key, arrays
