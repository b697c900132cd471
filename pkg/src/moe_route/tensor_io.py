"""Flat binary container for named float64 tensors.

Layout: magic bytes ``MOER1``, version u32, then per tensor (sorted by
name): name length u32, UTF-8 name, rank u32, dims u64 each, values as
little-endian 8-byte floats. Used for model checkpoints and corpus feature
files alike.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOER1"
VERSION = 1


def tensor_bytes(named: dict) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(named):
        arr = np.asarray(named[name], dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d would be promoted to 1-d
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        if arr.ndim:
            chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def save_tensors(path, named: dict) -> None:
    Path(path).write_bytes(tensor_bytes(named))


def load_tensors(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"not a {MAGIC.decode()} tensor file: {path}")
    off = len(MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise ValueError(f"truncated tensor file: {path}")
        out = raw[off: off + n]
        off += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ValueError(f"unsupported tensor file version {version}: {path}")
    named = {}
    while off < len(raw):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        count = 1
        for d in dims:
            count *= d
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims)
        named[name] = arr.astype(np.float64)
    return named


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def params_digest(named: dict) -> str:
    """Stable content hash of named tensors (Tensor objects or arrays)."""
    plain = {k: getattr(v, "data", v) for k, v in named.items()}
    return sha256_hex(tensor_bytes(plain))
