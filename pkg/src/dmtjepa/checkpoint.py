"""Binary checkpoint container: config snapshot, step counters, RNG state,
and every tensor (parameters plus optimizer moments) as float32 records
with per-tensor CRC32, written atomically and byte-stable across
save/load/save round trips (tensors are serialized in sorted name order).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DMTC"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint bytes are malformed or from an incompatible version."""


@dataclass
class Checkpoint:
    config_json: str
    schedule_step: int = 0
    opt_step: int = 0
    rng_state: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _pack_blob(out: list[bytes], blob: bytes) -> None:
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    out: list[bytes] = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    _pack_blob(out, ckpt.config_json.encode("utf-8"))
    out.append(struct.pack("<QQ", ckpt.schedule_step, ckpt.opt_step))
    _pack_blob(out, json.dumps(ckpt.rng_state, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    names = sorted(ckpt.tensors)
    out.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(ckpt.tensors[name])
        if arr.ndim < 1:
            raise CheckpointFormatError(f"tensor {name!r} must be at least 1-D")
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(b"".join(out))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    (cfg_len,) = reader.unpack("<I")
    config_json = reader.take(cfg_len).decode("utf-8")
    schedule_step, opt_step = reader.unpack("<QQ")
    (rng_len,) = reader.unpack("<I")
    rng_state = json.loads(reader.take(rng_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        if ndim < 1:
            raise CheckpointFormatError(f"{path}: tensor {name!r} has no dimensions")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape))
        payload = reader.take(size * 4)
        (crc,) = reader.unpack("<I")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CheckpointFormatError(f"{path}: checksum mismatch in tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    if reader.pos != len(reader.raw):
        raise CheckpointFormatError(f"{path}: trailing bytes after last tensor")
    return Checkpoint(
        config_json=config_json,
        schedule_step=schedule_step,
        opt_step=opt_step,
        rng_state=rng_state,
        tensors=tensors,
    )
