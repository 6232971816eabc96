"""On-disk formats: binary images and point clouds, JSONL manifest.

Images are stored as an 8-byte header of two little-endian uint32 (height,
width) followed by height*width float32 values, row-major. Clouds are a
4-byte little-endian uint32 point count followed by N*3 float32 coordinates.

All reads funnel through ``_note_access`` so tests can assert which files a
code path actually opened (the 2D-only inference contract).
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path

import numpy as np

_access_log: list[str] | None = None


@contextmanager
def recording_file_access():
    """Collect every data file opened inside the block."""
    global _access_log
    prev = _access_log
    _access_log = []
    try:
        yield _access_log
    finally:
        _access_log = prev


def _note_access(path: Path) -> None:
    if _access_log is not None:
        _access_log.append(str(path))


def write_image(path: Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim != 2:
        raise ValueError(f"image must be 2-D, got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(np.array([h, w], dtype="<u4").tobytes())
        f.write(image.astype("<f4").tobytes())


def read_image(path: Path) -> np.ndarray:
    path = Path(path)
    _note_access(path)
    with open(path, "rb") as f:
        h, w = np.frombuffer(f.read(8), dtype="<u4")
        data = np.frombuffer(f.read(int(h) * int(w) * 4), dtype="<f4")
    return data.reshape(int(h), int(w), 1).astype(np.float64)


def write_cloud(path: Path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float32)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"cloud must be (N, 3), got {points.shape}")
    with open(path, "wb") as f:
        f.write(np.array([points.shape[0]], dtype="<u4").tobytes())
        f.write(points.astype("<f4").tobytes())


def read_cloud(path: Path) -> np.ndarray:
    path = Path(path)
    _note_access(path)
    with open(path, "rb") as f:
        (n,) = np.frombuffer(f.read(4), dtype="<u4")
        data = np.frombuffer(f.read(int(n) * 12), dtype="<f4")
    return data.reshape(int(n), 3).astype(np.float64)


def write_manifest(path: Path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path: Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    _note_access(path)
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
