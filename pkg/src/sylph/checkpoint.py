"""Versioned binary checkpoint container.

Layout (little-endian): magic b"SYLC", u32 version, u32 tensor count, then one
record per tensor sorted by name: u32 name length, UTF-8 name, u32 rank,
u64 extents, raw float32 payload in row-major order. Sorting makes the byte
layout canonical, so hashing a checkpoint is well-defined.
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SYLC"
VERSION = 1

ParamDict = dict[str, torch.Tensor]


class CheckpointError(RuntimeError):
    pass


def serialize(tensors: ParamDict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name in sorted(tensors):
        t = tensors[name].detach().to(torch.float32).contiguous()
        arr = t.numpy()
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    return buf.getvalue()


def deserialize(data: bytes, source: str = "<bytes>") -> ParamDict:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated at byte {pos} while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError(f"{source}: bad magic at byte 0, not a checkpoint container")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported container version {version}")
    out: ParamDict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        shape = tuple(
            struct.unpack("<Q", take(8, f"extent of {name!r}"))[0] for _ in range(rank))
        n_elem = 1
        for extent in shape:
            n_elem *= extent
        payload = take(4 * n_elem, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        out[name] = torch.from_numpy(arr)
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes at byte {pos}")
    return out


def save_checkpoint(path: str | Path, tensors: ParamDict) -> None:
    Path(path).write_bytes(serialize(tensors))


def load_checkpoint(path: str | Path) -> ParamDict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint file")
    return deserialize(path.read_bytes(), source=str(path))


def checkpoint_hash(tensors: ParamDict) -> str:
    """SHA-256 of the canonical serialized bytes."""
    return hashlib.sha256(serialize(tensors)).hexdigest()
