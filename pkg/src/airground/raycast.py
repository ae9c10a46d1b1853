"""Integer grid traversal (Amanatides & Woo) shared by mapping, completion and
pair generation."""
from __future__ import annotations

import math
from typing import Iterator, Tuple

import numpy as np

Cell = Tuple[int, int, int]


def grid_walk(start, direction, t_max: float, resolution: float,
              origin=(0.0, 0.0, 0.0)) -> Iterator[Tuple[Cell, float, float]]:
    """Yield ``(cell, t_enter, t_exit)`` for every cell pierced by the ray
    ``start + t * direction`` with ``0 <= t <= t_max``.

    ``t`` is measured in units of ``direction``; pass a unit vector to get meters.
    Bounds are not checked here.
    """
    sx, sy, sz = (float(start[k]) - float(origin[k]) for k in range(3))
    d = [float(direction[k]) for k in range(3)]
    s = (sx, sy, sz)
    cell = [math.floor(s[k] / resolution) for k in range(3)]
    step = [0, 0, 0]
    t_next = [math.inf] * 3
    t_delta = [math.inf] * 3
    for k in range(3):
        if d[k] > 0.0:
            step[k] = 1
            t_next[k] = ((cell[k] + 1) * resolution - s[k]) / d[k]
            t_delta[k] = resolution / d[k]
        elif d[k] < 0.0:
            step[k] = -1
            t_next[k] = (cell[k] * resolution - s[k]) / d[k]
            t_delta[k] = -resolution / d[k]
    t = 0.0
    while True:
        k = 0 if t_next[0] <= t_next[1] else 1
        if t_next[2] < t_next[k]:
            k = 2
        t_out = t_next[k]
        yield (cell[0], cell[1], cell[2]), t, min(t_out, t_max)
        if t_out >= t_max:
            return
        t = t_out
        cell[k] += step[k]
        t_next[k] += t_delta[k]


def cells_in_bounds(cells: np.ndarray, dims) -> np.ndarray:
    cells = np.asarray(cells)
    return np.all((cells >= 0) & (cells < np.asarray(dims)), axis=-1)
