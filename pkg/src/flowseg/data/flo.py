"""Middlebury .flo optical-flow file format.

Layout: float32 magic 202021.25, int32 width, int32 height, then
height*width*2 float32 values, (u, v) interleaved, row-major.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DataIntegrityError

_MAGIC = 202021.25


def write_flo(path: str | Path, flow: np.ndarray) -> None:
    """Write a (2, H, W) float32 flow field."""
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise DataIntegrityError(f"flow must be (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as f:
        np.float32(_MAGIC).tofile(f)
        np.int32(w).tofile(f)
        np.int32(h).tofile(f)
        flow.transpose(1, 2, 0).astype(np.float32).tofile(f)


def read_flo(path: str | Path) -> np.ndarray:
    """Read a .flo file into a (2, H, W) float32 array."""
    with open(path, "rb") as f:
        magic = np.fromfile(f, np.float32, 1)
        if magic.size != 1 or magic[0] != np.float32(_MAGIC):
            raise DataIntegrityError(f"bad .flo magic in {path}")
        w = int(np.fromfile(f, np.int32, 1)[0])
        h = int(np.fromfile(f, np.int32, 1)[0])
        data = np.fromfile(f, np.float32, h * w * 2)
    if data.size != h * w * 2:
        raise DataIntegrityError(f"truncated .flo file {path}")
    return data.reshape(h, w, 2).transpose(2, 0, 1)
