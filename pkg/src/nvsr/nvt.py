"""NVT tensor file format.

Layout: magic b"NVT1", u32-LE rank, rank u32-LE dimension sizes, then the
row-major float32-LE payload. Used for checkpoints, planes, images and flow
fields.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NVT1"


def write_nvt(path, array):
    array = np.asarray(array, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array).tobytes())


def read_nvt(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not an NVT file (bad magic {magic!r})")
        (rank,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        payload = f.read(4 * n)
        if len(payload) != 4 * n:
            raise ValueError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_kv(path, mapping):
    """Plain-text key=value file (scene headers, layer manifests, configs)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}\n" for k, v in mapping.items()]
    path.write_text("".join(lines))


def read_kv(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
