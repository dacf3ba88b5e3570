"""Binary parameter checkpoints.

Layout: 8 magic bytes, a little-endian uint32 header length, a UTF-8 JSON
header, then every tensor as row-major little-endian float64 in header order.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import ContractViolation

MAGIC = b"LYRLCKP1"


def save_checkpoint(path, tensors: List[Tuple[str, np.ndarray]], *, seed: int, episodes: int, arch: Dict) -> None:
    header = {
        "arch": arch,
        "seed": int(seed),
        "episodes": int(episodes),
        "tensors": [{"name": n, "shape": list(np.shape(t))} for n, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Tuple[Dict, List[Tuple[str, np.ndarray]]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n])
    offset = 12 + n
    out = []
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ContractViolation(f"{path}: truncated tensor {spec['name']}")
        out.append((spec["name"], np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()))
        offset = end
    if offset != len(data):
        raise ContractViolation(f"{path}: {len(data) - offset} trailing bytes")
    return header, out
