"""Flat binary label grids.

``<name>.bin``: 12-byte header of three little-endian u32 dims (L, W, H), then
one byte per cell in x-major order (index ``(ix*W + iy)*H + iz``); 255 marks an
unknown cell.  ``<name>.json`` is the sidecar naming the classes and carrying
any extra header fields.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParameterError
from .occupancy import UNKNOWN_ID, OccupancyLabelGrid

_HEADER = struct.Struct("<3I")


def encode_label_grid(grid: OccupancyLabelGrid) -> bytes:
    cells = grid.labels.copy()
    cells[grid.unknown] = UNKNOWN_ID
    return _HEADER.pack(*grid.dims) + np.ascontiguousarray(cells, dtype=np.uint8).tobytes()


def decode_label_grid(data: bytes, num_classes: int, resolution=1.0, origin=(0, 0, 0)) -> OccupancyLabelGrid:
    if len(data) < _HEADER.size:
        raise InvalidParameterError("truncated grid header")
    dims = _HEADER.unpack_from(data)
    n = dims[0] * dims[1] * dims[2]
    body = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if body.size != n:
        raise InvalidParameterError(f"expected {n} cells, found {body.size}")
    cells = body.reshape(dims)
    unknown = cells == UNKNOWN_ID
    labels = np.where(unknown, 0, cells).astype(np.uint8)
    return OccupancyLabelGrid(labels, num_classes, unknown, resolution, origin)


def save_label_grid(path, grid: OccupancyLabelGrid, class_names: Optional[Sequence[str]] = None,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path).with_suffix(".bin")
    path.write_bytes(encode_label_grid(grid))
    names = list(class_names) if class_names is not None else (
        ["empty"] + [f"class_{k}" for k in range(1, grid.num_classes + 1)])
    if len(names) != grid.num_classes + 1:
        raise InvalidParameterError("need one class name per label including empty")
    meta = {"classes": names, "unknown_id": UNKNOWN_ID,
            "resolution": grid.resolution, "origin": [float(v) for v in grid.origin]}
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def load_label_grid(path):
    """Return ``(grid, sidecar_dict)``."""
    path = Path(path).with_suffix(".bin")
    meta = json.loads(path.with_suffix(".json").read_text())
    grid = decode_label_grid(path.read_bytes(), len(meta["classes"]) - 1,
                             meta.get("resolution", 1.0), meta.get("origin", (0, 0, 0)))
    return grid, meta
