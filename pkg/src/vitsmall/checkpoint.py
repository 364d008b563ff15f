"""Named-tensor checkpoint archive.

Layout (all integers little-endian)::

    magic        4 bytes  b"SVTC"
    version      u32
    meta_len     u32
    metadata     meta_len bytes, canonical JSON (sorted keys, utf-8)
    n_entries    u32
    n_entries x:
        name_len u16
        name     name_len bytes utf-8
        dtype    u8      0 = float32, 1 = float64
        rank     u8
        dims     rank x u32
        values   prod(dims) x itemsize, little-endian, row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SVTC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Entries under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _meta_bytes(metadata: dict) -> bytes:
    return json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(ckpt: Checkpoint) -> bytes:
    meta = _meta_bytes(ckpt.metadata)
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise CheckpointError(f"entry {name!r}: rank {arr.ndim} too large")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    metadata = json.loads(bytes(take(meta_len, "metadata")).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "entry count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2, f"descriptor of {name!r}"))
        if tag not in _DTYPES:
            raise CheckpointError(f"entry {name!r}: unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        dt = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        raw = take(nbytes, f"values of {name!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate entry name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last entry")
    return Checkpoint(tensors, metadata)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(ckpt)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def expected_size(ckpt: Checkpoint) -> int:
    """Byte size implied by the layout, for size accounting."""
    size = 4 + 8 + len(_meta_bytes(ckpt.metadata)) + 4
    for name, arr in ckpt.tensors.items():
        size += 2 + len(name.encode("utf-8")) + 2 + 4 * np.ndim(arr) + np.asarray(arr).nbytes
    return size
