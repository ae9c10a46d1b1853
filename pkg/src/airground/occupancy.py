"""Deterministic geometry of the occupancy perception path: voxelization with
max-pooled point features, bird's-eye-view projection, pluggable completion of
unobserved cells, and IoU / mIoU metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidParameterError
from .raycast import grid_walk

EMPTY = 0
UNKNOWN_ID = 255
# per-point feature layout: offset from voxel center (x, y, z), hit count
POINT_FEATURES = 4


@dataclass(frozen=True)
class PointCloud:
    """Points in meters.  ``misses`` holds unit directions of rays that returned
    nothing within range (used to clear free space); it is empty for clouds
    that do not come from a ray-casting sensor."""

    points: np.ndarray
    misses: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidParameterError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "misses",
                           np.asarray(self.misses, dtype=np.float64).reshape(-1, 3))

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_csv(cls, path) -> "PointCloud":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    rows.append([float(v) for v in row[:3]])
                except ValueError:
                    if rows:
                        raise
                    continue  # header line
        return cls(np.array(rows).reshape(-1, 3))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "z"])
            for p in self.points:
                w.writerow([repr(float(v)) for v in p])


@dataclass(frozen=True)
class VoxelFeatureGrid:
    dims: Tuple[int, int, int]
    resolution: float
    origin: np.ndarray
    voxel_index: np.ndarray   # (M,) flat index, x-major: (ix*W + iy)*H + iz
    features: np.ndarray      # (M, F)
    dropped: int = 0

    @property
    def coords(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.voxel_index, self.dims), axis=1)

    def centers(self) -> np.ndarray:
        return np.asarray(self.origin) + (self.coords + 0.5) * self.resolution

    def occupancy(self) -> np.ndarray:
        occ = np.zeros(self.dims, dtype=bool)
        occ.reshape(-1)[self.voxel_index] = True
        return occ


def _check_geometry(resolution, dims):
    if not resolution > 0:
        raise InvalidParameterError("resolution must be positive")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise InvalidParameterError(f"dims must be three positive counts, got {dims}")
    return float(resolution), dims


def voxelize(cloud: PointCloud, resolution: float, dims, origin=(0.0, 0.0, 0.0)) -> VoxelFeatureGrid:
    """Bin points into voxels; each occupied voxel gets the elementwise max of
    its points' center offsets plus the number of points that fell in it."""
    resolution, dims = _check_geometry(resolution, dims)
    origin = np.asarray(origin, dtype=np.float64)
    pts = cloud.points
    idx = np.floor((pts - origin) / resolution).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(dims)), axis=1)
    dropped = int(np.count_nonzero(~inside))
    idx, pts = idx[inside], pts[inside]
    if len(pts) == 0:
        return VoxelFeatureGrid(dims, resolution, origin, np.zeros(0, np.int64),
                                np.zeros((0, POINT_FEATURES)), dropped)
    flat = np.ravel_multi_index(idx.T, dims)
    offsets = pts - (origin + (idx + 0.5) * resolution)
    uniq, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    pooled = np.full((len(uniq), 3), -np.inf)
    np.maximum.at(pooled, inverse, offsets)
    feats = np.column_stack([pooled, counts.astype(np.float64)])
    return VoxelFeatureGrid(dims, resolution, origin, uniq, feats, dropped)


def voxelize_multiscale(cloud: PointCloud, resolution: float, dims, origin=(0.0, 0.0, 0.0),
                        levels: int = 3) -> VoxelFeatureGrid:
    """Voxelize at ``s, 2s, 4s, ...`` and concatenate each fine voxel's
    features with those of its enclosing coarse voxels."""
    base = voxelize(cloud, resolution, dims, origin)
    parts = [base.features]
    coords = base.coords
    for k in range(1, levels):
        f = 2 ** k
        cdims = tuple(-(-d // f) for d in base.dims)
        coarse = voxelize(cloud, resolution * f, cdims, origin)
        parent = np.ravel_multi_index((coords // f).T, cdims) if len(coords) else np.zeros(0, np.int64)
        pos = np.searchsorted(coarse.voxel_index, parent)
        parts.append(coarse.features[pos] if len(pos) else np.zeros((0, POINT_FEATURES)))
    return VoxelFeatureGrid(base.dims, base.resolution, base.origin, base.voxel_index,
                            np.hstack(parts), base.dropped)


@dataclass(frozen=True)
class BevGrid:
    features: np.ndarray   # (L, W, C) dense, zero where no voxel in the column
    occupied: np.ndarray   # (L, W) bool

    @property
    def dims(self):
        return self.features.shape[:2]

    @property
    def channels(self):
        return self.features.shape[2]

    def as_voxel_grid(self, resolution=1.0, origin=(0.0, 0.0, 0.0)) -> VoxelFeatureGrid:
        """View the BEV map as a one-layer voxel grid."""
        L, W = self.dims
        ix, iy = np.nonzero(self.occupied)
        return VoxelFeatureGrid((L, W, 1), resolution, np.asarray(origin, float),
                                ix * W + iy, self.features[ix, iy])


def bev_project(grid: VoxelFeatureGrid) -> BevGrid:
    """Max-pool voxel features over z into a dense (L, W, C) array."""
    L, W, H = grid.dims
    C = grid.features.shape[1] if grid.features.ndim == 2 else POINT_FEATURES
    col = grid.voxel_index // H
    dense = np.full((L * W, C), -np.inf)
    if len(col):
        np.maximum.at(dense, col, grid.features)
    occupied = np.zeros(L * W, dtype=bool)
    occupied[col] = True
    dense[~occupied] = 0.0
    return BevGrid(dense.reshape(L, W, C), occupied.reshape(L, W))


@dataclass(frozen=True)
class OccupancyLabelGrid:
    """Per-cell labels in ``0..num_classes`` (0 = empty) plus a mask of cells
    that were never observed."""

    labels: np.ndarray
    num_classes: int
    unknown: Optional[np.ndarray] = None
    resolution: float = 1.0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        if labels.ndim != 3:
            raise InvalidParameterError("labels must be a 3-D array")
        if labels.size and labels.max() > self.num_classes:
            raise InvalidParameterError(
                f"label {labels.max()} exceeds num_classes={self.num_classes}")
        unknown = (np.zeros(labels.shape, dtype=bool) if self.unknown is None
                   else np.asarray(self.unknown, dtype=bool))
        if unknown.shape != labels.shape:
            raise InvalidParameterError("unknown mask shape differs from labels")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "unknown", unknown)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))

    @property
    def dims(self):
        return self.labels.shape

    def with_labels(self, labels) -> "OccupancyLabelGrid":
        return OccupancyLabelGrid(labels, self.num_classes, self.unknown.copy(),
                                  self.resolution, self.origin)


class IdentityCompletion:
    name = "identity"

    def __call__(self, observed: OccupancyLabelGrid) -> OccupancyLabelGrid:
        return observed.with_labels(observed.labels.copy())


class ShadowExtrude:
    """Extend each observed occupied cell up to ``depth`` cells further along
    the sensor ray through it, relabeling only unobserved cells."""

    name = "shadow_extrude"

    def __init__(self, depth: int, sensor_origin):
        if int(depth) < 0:
            raise InvalidParameterError("shadow depth must be >= 0")
        self.depth = int(depth)
        self.sensor_origin = np.asarray(sensor_origin, dtype=np.float64)

    def __call__(self, observed: OccupancyLabelGrid) -> OccupancyLabelGrid:
        labels = observed.labels.copy()
        if self.depth == 0:
            return observed.with_labels(labels)
        res, origin, dims = observed.resolution, observed.origin, observed.dims
        unknown = observed.unknown
        written = np.zeros(dims, dtype=bool)
        for cell in np.argwhere((observed.labels != EMPTY) & ~unknown):
            center = origin + (cell + 0.5) * res
            ray = center - self.sensor_origin
            dist = float(np.linalg.norm(ray))
            if dist == 0.0:
                continue
            ray /= dist
            target = tuple(int(c) for c in cell)
            passed, shadowed = False, 0
            label = observed.labels[target]
            for c, _, _ in grid_walk(self.sensor_origin, ray, dist + (self.depth + 2) * res * 2.0,
                                     res, origin):
                if not passed:
                    passed = c == target
                    continue
                if not all(0 <= c[k] < dims[k] for k in range(3)):
                    break
                if shadowed >= self.depth:
                    break
                shadowed += 1
                if unknown[c] and not written[c]:
                    labels[c] = label
                    written[c] = True
        return observed.with_labels(labels)


class OracleCompletion:
    """Copy ground truth into unobserved cells, flipping each one (empty <-> a
    random class) with independent probability ``noise_p``."""

    name = "oracle"

    def __init__(self, truth: OccupancyLabelGrid, noise_p: float = 0.0, seed: int = 0):
        if not 0.0 <= noise_p <= 1.0:
            raise InvalidParameterError("noise_p must lie in [0, 1]")
        self.truth = truth
        self.noise_p = float(noise_p)
        self.seed = seed

    def __call__(self, observed: OccupancyLabelGrid) -> OccupancyLabelGrid:
        if observed.dims != self.truth.dims:
            raise InvalidParameterError("oracle truth dims differ from observed grid")
        labels = observed.labels.copy()
        mask = observed.unknown
        truth = self.truth.labels[mask]
        if self.noise_p > 0.0:
            rng = np.random.default_rng(self.seed)
            flip = rng.random(truth.size) < self.noise_p
            random_class = rng.integers(1, max(observed.num_classes, 1) + 1, size=truth.size)
            truth = np.where(flip, np.where(truth == EMPTY, random_class, EMPTY), truth)
        labels[mask] = truth
        return observed.with_labels(labels)


def complete(observed: OccupancyLabelGrid, completer) -> OccupancyLabelGrid:
    out = completer(observed)
    # observed cells are never relabeled, whatever the strategy does
    keep = ~observed.unknown
    if np.any(out.labels[keep] != observed.labels[keep]):
        labels = out.labels.copy()
        labels[keep] = observed.labels[keep]
        out = out.with_labels(labels)
    return out


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray   # indexed by label, 0..num_classes
    fp: np.ndarray
    fn: np.ndarray
    tp_o: int
    fp_o: int
    fn_o: int


def _check_pair(pred: OccupancyLabelGrid, truth: OccupancyLabelGrid):
    if pred.dims != truth.dims:
        raise InvalidParameterError(f"grid dims differ: {pred.dims} vs {truth.dims}")


def confusion_counts(pred: OccupancyLabelGrid, truth: OccupancyLabelGrid,
                     num_classes: Optional[int] = None) -> ConfusionCounts:
    _check_pair(pred, truth)
    n = num_classes if num_classes is not None else max(pred.num_classes, truth.num_classes)
    p = pred.labels.ravel().astype(np.int64)
    t = truth.labels.ravel().astype(np.int64)
    if p.size and max(p.max(), t.max()) > n:
        raise InvalidParameterError("label exceeds num_classes")
    cm = np.bincount(t * (n + 1) + p, minlength=(n + 1) ** 2).reshape(n + 1, n + 1)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    po, to = p != EMPTY, t != EMPTY
    return ConfusionCounts(tp, fp, fn,
                           int(np.count_nonzero(po & to)),
                           int(np.count_nonzero(po & ~to)),
                           int(np.count_nonzero(~po & to)))


def occupancy_iou(pred: OccupancyLabelGrid, truth: OccupancyLabelGrid) -> float:
    """IoU of the occupied class after collapsing all non-empty labels."""
    _check_pair(pred, truth)
    po = pred.labels != EMPTY
    to = truth.labels != EMPTY
    union = np.count_nonzero(po | to)
    if union == 0:
        return 1.0
    return np.count_nonzero(po & to) / union


def semantic_miou(pred: OccupancyLabelGrid, truth: OccupancyLabelGrid, num_classes: int) -> float:
    """Mean per-class IoU over classes ``1..num_classes``; classes absent from
    both grids are left out of the mean."""
    c = confusion_counts(pred, truth, num_classes)
    denom = (c.tp + c.fp + c.fn)[1:]
    present = denom > 0
    if not np.any(present):
        return 1.0
    return float(np.mean(c.tp[1:][present] / denom[present]))
