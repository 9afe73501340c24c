"""Single-file checkpoints: JSON header followed by raw float32 weight blobs.

File layout::

    b"STPADCKP"            8-byte magic
    uint64 little-endian   header length in bytes
    header                 UTF-8 JSON (sorted keys); "tensors" lists name,
                           shape, offset and nbytes of every weight array
    blobs                  little-endian float32, row-major, concatenated
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from stpad.errors import CheckpointError

MAGIC = b"STPADCKP"


def save_checkpoint(path, header, state):
    """Write ``state`` (name -> tensor/array) atomically; returns the sha256 hex digest."""
    path = Path(path)
    tensors, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = state[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header)
    head["tensors"] = tensors
    head_bytes = json.dumps(head, sort_keys=True, allow_nan=False).encode()
    data = MAGIC + struct.pack("<Q", len(head_bytes)) + head_bytes + b"".join(blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, expected_hash=None):
    """Return ``(header, arrays, sha256)``; verifies ``expected_hash`` when given."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist", code="missing_checkpoint")
    data = path.read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    if expected_hash is not None and digest != expected_hash:
        raise CheckpointError(
            f"checkpoint {path} hash {digest[:12]} != expected {expected_hash[:12]}",
            code="hash_mismatch")
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode())
    base = 16 + n
    arrays = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        raw = data[start:start + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CheckpointError(f"{path}: tensor {t['name']} is truncated")
        arrays[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).copy()
    return header, arrays, digest


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_arrays(module):
    return {k: v for k, v in module.state_dict().items() if v.is_floating_point()}


def load_state(module, arrays, prefix=""):
    sd = module.state_dict()
    missing = [k for k, v in sd.items() if v.is_floating_point() and prefix + k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks weights {missing[:3]}")
    new = {k: torch.from_numpy(arrays[prefix + k]).to(v.dtype) if v.is_floating_point() else v
           for k, v in sd.items()}
    module.load_state_dict(new)
