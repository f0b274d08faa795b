"""Flat binary tensor checkpoints with a JSON header.

Layout: ``b"HFCK"``, a little-endian uint32 header length, the UTF-8 JSON
header, then each tensor's raw little-endian float64 bytes in header order.
The header lists ``name``/``shape``/``offset`` per tensor plus free-form
metadata (``kind``, ``seed``, ``config``, ``config_hash``).
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .validation import ContractError

MAGIC = b"HFCK"


def config_hash(config):
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors, **meta):
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    if "config" in meta:
        meta["config_hash"] = config_hash(meta["config"])
    header = json.dumps({"tensors": entries, **meta}, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks))


def load_checkpoint(path):
    """Return ``(tensors, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    body = memoryview(raw)[8 + n:]
    tensors = {}
    for e in header.pop("tensors"):
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return tensors, header


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
