"""Full-grid Euclidean signed distance field, kept as a timing baseline for
the pair-based collision cost."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .mapping import MapView


def build_esdf(blocked: np.ndarray, resolution: float) -> np.ndarray:
    """Signed distance in meters: positive in free space, negative inside
    obstacles."""
    blocked = np.asarray(blocked, dtype=bool)
    if not blocked.any():
        return np.full(blocked.shape, np.inf)
    outside = ndimage.distance_transform_edt(~blocked, sampling=resolution)
    if blocked.all():
        return -np.full(blocked.shape, np.inf)
    inside = ndimage.distance_transform_edt(blocked, sampling=resolution)
    return np.where(blocked, -inside, outside)


def resample_blocked(view: MapView, resolution: float) -> np.ndarray:
    """Blocked mask of ``view`` re-gridded at a finer ``resolution`` (an
    integer subdivision of the view's resolution)."""
    factor = int(round(view.resolution / resolution))
    if factor < 1 or abs(factor * resolution - view.resolution) > 1e-9:
        raise ValueError("resolution must evenly divide the view resolution")
    b = view.blocked
    for axis in range(3):
        b = np.repeat(b, factor, axis=axis)
    return b


def esdf_collision_cost(points: np.ndarray, esdf: np.ndarray, resolution: float, origin,
                        clearance: float) -> float:
    """Same cubic barrier as the pair cost, evaluated on nearest-cell ESDF values."""
    idx = np.floor((np.asarray(points) - np.asarray(origin)) / resolution).astype(int)
    idx = np.clip(idx, 0, np.array(esdf.shape) - 1)
    d = esdf[idx[:, 0], idx[:, 1], idx[:, 2]]
    x = np.maximum(clearance - d, 0.0)
    return float(np.sum(x ** 3) / clearance ** 2)
