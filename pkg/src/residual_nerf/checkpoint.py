"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    bytes 0..7    magic b"RNCKPT01"
    bytes 8..11   uint32 H, length of the JSON header in bytes
    bytes 12..    H bytes of UTF-8 JSON:
                  {"tensors": [{"name", "shape", "dtype": "float32"}, ...],
                   "meta": {...}}
    then          raw float32 little-endian values of every tensor, in header
                  order, each row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RNCKPT01"


class CheckpointError(ValueError):
    pass


def to_bytes(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, blobs = [], []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        blobs.append(arr.tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def from_bytes(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (hlen,) = struct.unpack("<I", buf[8:12])
    try:
        header = json.loads(buf[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    offset = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        if entry["dtype"] != "float32":
            raise CheckpointError(f"unsupported dtype {entry['dtype']}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(buf):
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(buf[offset:end], dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
        offset = end
    return tensors, header.get("meta", {})


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())


def digest(tensors: dict[str, np.ndarray]) -> str:
    """SHA-256 over parameter bytes, for freeze checks."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name]).tobytes())
    return h.hexdigest()
