"""Single-file binary checkpoint: versioned header plus raw float64 arrays.

Layout: 8-byte magic, uint32 format version, uint64 header length, JSON
header (metadata and an array manifest with offsets), then the arrays
themselves, little-endian float64 in manifest order. Reload reproduces
arrays bitwise.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"JAMLCKPT"
VERSION = 1


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes("C")
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([VERSION], dtype="<u4").tobytes())
        f.write(np.array([len(header)], dtype="<u8").tobytes())
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (version,) = np.frombuffer(f.read(4), dtype="<u4")
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = np.frombuffer(f.read(8), dtype="<u8")
        header = json.loads(f.read(int(hlen)).decode())
        body = f.read()
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body[start : start + count * 8], dtype="<f8")
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, header["meta"]
