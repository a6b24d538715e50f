"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic   b"UKAN"
    u32     format version (currently 1)
    u8      endianness flag (0 = little-endian payload)
    u32     metadata length, then that many bytes of UTF-8 JSON
    u32     tensor count, then per tensor:
        u32     name length, then UTF-8 name
        u8      dtype code (0 = float64, 1 = float32)
        u8      ndim, then ndim x i64 extents
        u64     payload byte count, then raw array bytes

Raw bytes round-trip bit-exactly, so reloading reproduces forward passes
exactly. Metadata carries the config snapshot, epoch, rng state, and
optimizer step count.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UKAN"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    chunks = [MAGIC, struct.pack("<IB", VERSION, 0)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # never 0-d here: 0-d is contiguous
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple:
    """Returns (meta dict, {name: array})."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, endian = r.unpack("<IB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if endian != 0:
        raise CheckpointError("unsupported endianness flag")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        expect = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim \
            else dtype.itemsize
        if nbytes != expect:
            raise CheckpointError(f"{name}: payload size {nbytes} != {expect}")
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(r.blob):
        raise CheckpointError("trailing bytes after last tensor")
    return meta, arrays


def rng_state_to_meta(rng: np.random.Generator) -> dict:
    """Generator bit state as JSON-safe data (Python ints are exact)."""
    return json.loads(json.dumps(rng.bit_generator.state, default=int))


def rng_from_meta(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
