"""Binary checkpoint container.

Layout (all integers little-endian):

    magic "FPDLAB" | u32 version | u32 len + fingerprint utf8
    | u32 len + canonical-JSON metadata
    | u32 block count
    | per block: u32 len + name, u32 array count,
        per array: u32 len + name, u32 ndim, u64*ndim extents, float64 data,
      then a 32-byte sha256 over the block payload

Blocks and arrays are written in sorted order, so load -> save -> load is
byte-identical. Integer-valued arrays (class templates) ride along as exact
float64.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FPDLAB"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _pack_str(text: str) -> bytes:
    raw = text.encode()
    return struct.pack("<I", len(raw)) + raw


def _block_bytes(name: str, arrays: dict[str, np.ndarray]) -> bytes:
    out = [_pack_str(name), struct.pack("<I", len(arrays))]
    for arr_name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[arr_name], dtype=np.float64))
        out.append(_pack_str(arr_name))
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        out.append(arr.astype("<f8").tobytes())
    payload = b"".join(out)
    return payload + hashlib.sha256(payload).digest()


def save_checkpoint(path: str | Path, fingerprint: str, meta: dict,
                    blocks: dict[str, dict[str, np.ndarray]]) -> None:
    """Atomic write (temp file + rename)."""
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(fingerprint),
             _pack_str(canonical_json(meta)), struct.pack("<I", len(blocks))]
    for name in sorted(blocks):
        parts.append(_block_bytes(name, blocks[name]))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode()


def load_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, dict[str, np.ndarray]]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    fingerprint = r.string()
    meta = json.loads(r.string())
    blocks: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(r.u32()):
        start = r.pos
        name = r.string()
        arrays: dict[str, np.ndarray] = {}
        for _ in range(r.u32()):
            arr_name = r.string()
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            arrays[arr_name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        payload = r.data[start : r.pos]
        if r.take(32) != hashlib.sha256(payload).digest():
            raise CheckpointError(f"{path}: checksum mismatch in block {name!r}")
        blocks[name] = arrays
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after last block")
    return fingerprint, meta, blocks
