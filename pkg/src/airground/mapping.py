"""Local occupancy map, immutable planner snapshots, and the simulated world
(analytic obstacles, ray-cast sensor, ground-truth rasterization)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvalidParameterError
from .gridio import save_label_grid
from .occupancy import EMPTY, OccupancyLabelGrid, PointCloud
from .raycast import grid_walk

UNKNOWN, FREE, OCCUPIED, PREDICTED = 0, 1, 2, 3
STATE_NAMES = ("unknown", "free", "occupied", "predicted_occupied")

CLASS_CYLINDER, CLASS_RING, CLASS_BOX = 1, 2, 3
WORLD_CLASSES = ("empty", "cylinder", "ring", "box")


@dataclass(frozen=True)
class SensorModel:
    hfov_deg: float = 87.0
    vfov_deg: float = 58.0
    max_range: float = 5.0
    rays_h: int = 24
    rays_v: int = 12

    def __post_init__(self):
        if not self.max_range > 0:
            raise InvalidParameterError("sensor max range must be positive")
        if self.rays_h < 1 or self.rays_v < 1:
            raise InvalidParameterError("sensor needs at least one ray")

    @property
    def rays(self) -> int:
        return self.rays_h * self.rays_v

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame (x forward, y left, z up)."""
        def angles(fov, n):
            half = math.radians(fov) / 2.0
            return np.zeros(1) if n == 1 else np.linspace(-half, half, n)
        az, el = np.meshgrid(angles(self.hfov_deg, self.rays_h),
                             angles(self.vfov_deg, self.rays_v), indexing="ij")
        az, el = az.ravel(), el.ravel()
        return np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(p)) and math.isfinite(self.yaw)):
            raise InvalidParameterError("pose must be finite")
        object.__setattr__(self, "position", p)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts).reshape(-1, 3) @ self.rotation().T + self.position


class MapView:
    """Read-only snapshot of a :class:`LocalMap`.  Unknown cells are treated as
    free; occupied and predicted-occupied cells, and everything outside the
    map, are blocked."""

    def __init__(self, state: np.ndarray, resolution: float, origin, version: int,
                 blocked: Optional[np.ndarray] = None, inflation: float = 0.0):
        self.state = state
        self.resolution = float(resolution)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.version = version
        self.inflation = inflation
        self._blocked = blocked
        self._components = None

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.state.shape

    @property
    def blocked(self) -> np.ndarray:
        if self._blocked is None:
            b = (self.state == OCCUPIED) | (self.state == PREDICTED)
            b.setflags(write=False)
            self._blocked = b
        return self._blocked

    def cell_of(self, point) -> Tuple[int, int, int]:
        return tuple(int(v) for v in np.floor((np.asarray(point) - self.origin) / self.resolution))

    def cell_center(self, cell) -> np.ndarray:
        return self.origin + (np.asarray(cell) + 0.5) * self.resolution

    def in_bounds(self, cell) -> bool:
        return all(0 <= cell[k] < self.dims[k] for k in range(3))

    def is_blocked(self, cell) -> bool:
        cell = tuple(int(c) for c in cell)
        return (not self.in_bounds(cell)) or bool(self.blocked[cell])

    def is_blocked_point(self, point) -> bool:
        return self.is_blocked(self.cell_of(point))

    def points_blocked(self, points) -> np.ndarray:
        """Vectorized blocked test for an (..., 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        idx = np.floor((pts - self.origin) / self.resolution).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.dims)), axis=-1)
        out = np.ones(pts.shape[:-1], dtype=bool)
        sel = idx[inside]
        out[inside] = self.blocked[sel[:, 0], sel[:, 1], sel[:, 2]]
        return out

    def is_blocked_region(self, lo, hi) -> bool:
        """True if any cell overlapping the axis-aligned box [lo, hi] is blocked."""
        a = np.floor((np.asarray(lo) - self.origin) / self.resolution).astype(int)
        b = np.floor((np.asarray(hi) - self.origin) / self.resolution).astype(int)
        if np.any(a < 0) or np.any(b >= np.array(self.dims)):
            return True
        return bool(self.blocked[a[0]:b[0] + 1, a[1]:b[1] + 1, a[2]:b[2] + 1].any())

    def inflate(self, radius: float) -> "MapView":
        """New view with blocked cells dilated by ``radius`` meters (ball)."""
        cells = radius / self.resolution
        n = int(math.floor(cells + 1e-9))
        if n <= 0:
            return MapView(self.state, self.resolution, self.origin, self.version,
                           self.blocked, self.inflation)
        r = np.arange(-n, n + 1)
        ball = (r[:, None, None] ** 2 + r[None, :, None] ** 2 + r[None, None, :] ** 2) <= cells * cells + 1e-9
        grown = ndimage.binary_dilation(self.blocked, structure=ball)
        grown.setflags(write=False)
        return MapView(self.state, self.resolution, self.origin, self.version, grown,
                       self.inflation + radius)

    def components(self) -> np.ndarray:
        """Connected-component id of every blocked cell (0 = not blocked)."""
        if self._components is None:
            self._components, _ = ndimage.label(self.blocked)
        return self._components

    def component_of(self, point) -> int:
        cell = self.cell_of(point)
        if not self.in_bounds(cell):
            return -1
        return int(self.components()[cell])


class LocalMap:
    """The robot's occupancy map.  Mutations bump ``version``; snapshots share
    the state array until the next mutation (copy on write)."""

    def __init__(self, dims, resolution: float, origin=(0.0, 0.0, 0.0)):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 1 or not resolution > 0:
            raise InvalidParameterError("invalid map geometry")
        self.state = np.zeros(dims, dtype=np.uint8)
        self.stamp = np.full(dims, -np.inf)  # time of each cell's last observation
        self.resolution = float(resolution)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.version = 0
        self._shared = False

    @property
    def dims(self):
        return self.state.shape

    def _mutable_state(self) -> np.ndarray:
        if self._shared:
            self.state = self.state.copy()
            self._shared = False
        return self.state

    def snapshot(self) -> MapView:
        if not self._shared:
            self.state.setflags(write=False)
            self._shared = True
        return MapView(self.state, self.resolution, self.origin, self.version)

    def integrate_scan(self, pose: Pose, hits: PointCloud, sensor: SensorModel,
                       stamp: Optional[float] = None) -> "LocalMap":
        """Ray-trace each return: traversed cells become free, the hit cell
        occupied.  Returns beyond ``sensor.max_range`` and ``hits.misses`` only
        clear free space up to the range limit.  Touched cells are stamped
        with ``stamp`` (default: the current version)."""
        stamp = float(self.version) if stamp is None else float(stamp)
        origin = pose.position
        rot = pose.rotation()
        free, occ = [], []
        dims = self.dims
        rays = [(p, True) for p in hits.points] + [(m, False) for m in hits.misses]
        for vec, is_hit in rays:
            vec = np.asarray(vec, dtype=np.float64)
            dist = float(np.linalg.norm(vec))
            if dist == 0.0:
                continue
            direction = rot @ (vec / dist)
            if not is_hit or dist > sensor.max_range:
                length, mark_end = sensor.max_range, False
            else:
                length, mark_end = dist, True
            last = None
            for cell, _, _ in grid_walk(origin, direction, length, self.resolution, self.origin):
                if last is not None:
                    free.append(last)
                last = cell
            if last is not None:
                (occ if mark_end else free).append(last)
        state = self._mutable_state()
        for cells, value in ((free, FREE), (occ, OCCUPIED)):
            if not cells:
                continue
            arr = np.array(cells)
            arr = arr[np.all((arr >= 0) & (arr < np.array(dims)), axis=1)]
            state[arr[:, 0], arr[:, 1], arr[:, 2]] = value
            self.stamp[arr[:, 0], arr[:, 1], arr[:, 2]] = stamp
        self.version += 1
        return self

    def expire(self, now: float, max_age: float) -> "LocalMap":
        """Forget observations older than ``max_age``: those cells return to
        unknown so the next prediction can refill them."""
        old = (self.state == FREE) | (self.state == OCCUPIED)
        old &= (now - self.stamp) > max_age
        if old.any():
            state = self._mutable_state()
            state[old] = UNKNOWN
            self.stamp[old] = -np.inf
            self.version += 1
        return self

    def merge_prediction(self, predicted: OccupancyLabelGrid) -> "LocalMap":
        """Refresh every unobserved cell from the prediction: non-empty label
        -> predicted_occupied, empty -> unknown.  Observed cells never change."""
        if predicted.dims != self.dims:
            raise InvalidParameterError(f"prediction dims {predicted.dims} != map dims {self.dims}")
        if (not math.isclose(predicted.resolution, self.resolution)
                or not np.allclose(predicted.origin, self.origin)):
            raise InvalidParameterError("prediction geometry does not match the map")
        state = self._mutable_state()
        unobserved = (state == UNKNOWN) | (state == PREDICTED)
        hit = predicted.labels != EMPTY
        state[unobserved & hit] = PREDICTED
        state[unobserved & ~hit] = UNKNOWN
        self.version += 1
        return self

    def observed_labels(self) -> OccupancyLabelGrid:
        """Occupied -> class 1, free -> empty; unknown/predicted cells flagged unknown."""
        labels = (self.state == OCCUPIED).astype(np.uint8)
        unknown = (self.state == UNKNOWN) | (self.state == PREDICTED)
        return OccupancyLabelGrid(labels, 1, unknown, self.resolution, self.origin)

    def blocked_labels(self) -> OccupancyLabelGrid:
        labels = ((self.state == OCCUPIED) | (self.state == PREDICTED)).astype(np.uint8)
        return OccupancyLabelGrid(labels, 1, None, self.resolution, self.origin)

    def dump(self, path) -> Path:
        """Write the map in the binary label-grid format (free=0, occupied=1,
        predicted=2, unknown=255) plus a JSON header."""
        labels = np.zeros(self.dims, dtype=np.uint8)
        labels[self.state == OCCUPIED] = 1
        labels[self.state == PREDICTED] = 2
        grid = OccupancyLabelGrid(labels, 2, self.state == UNKNOWN, self.resolution, self.origin)
        return save_label_grid(path, grid, ["free", "occupied", "predicted_occupied"],
                               extra={"version": self.version})


# -- world ------------------------------------------------------------------

def _arr(x, shape) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WorldModel:
    """Arena with static boxes and rings and moving vertical cylinders standing
    on the ground plane ``z = 0``.  Rings are tori (center, unit axis, major
    and minor radius)."""

    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    cyl_xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    cyl_radius: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cyl_height: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cyl_vel: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    cyl_bounce: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    box_lo: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    box_hi: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ring_center: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ring_axis: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ring_major: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ring_minor: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        k = len(np.asarray(self.cyl_radius).reshape(-1))
        nb = len(np.asarray(self.box_lo).reshape(-1, 3))
        nr = len(np.asarray(self.ring_major).reshape(-1))
        if np.asarray(self.cyl_vel).size == 0 and k:
            object.__setattr__(self, "cyl_vel", np.zeros((k, 2)))
        for name, shape in (("bounds_lo", (3,)), ("bounds_hi", (3,)), ("cyl_xy", (k, 2)),
                            ("cyl_radius", (k,)), ("cyl_height", (k,)), ("cyl_vel", (k, 2)),
                            ("box_lo", (nb, 3)), ("box_hi", (nb, 3)), ("ring_center", (nr, 3)),
                            ("ring_axis", (nr, 3)), ("ring_major", (nr,)), ("ring_minor", (nr,))):
            object.__setattr__(self, name, _arr(getattr(self, name), shape))
        bounce = np.asarray(self.cyl_bounce, dtype=bool).reshape(-1)
        if bounce.size == 0 and k:
            bounce = np.ones(k, bool)
        object.__setattr__(self, "cyl_bounce", bounce)
        if nr:
            axis = self.ring_axis / np.linalg.norm(self.ring_axis, axis=1, keepdims=True)
            object.__setattr__(self, "ring_axis", _arr(axis, (nr, 3)))

    @property
    def num_cylinders(self) -> int:
        return len(self.cyl_radius)

    def advance(self, dt: float) -> "WorldModel":
        return advance_world(self, dt)

    def clearance(self, point) -> float:
        """Signed distance from ``point`` to the nearest obstacle surface."""
        return float(self.clearances(np.asarray(point, dtype=np.float64).reshape(1, 3))[0])

    def clearances(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        best = np.full(len(pts), np.inf)
        if self.num_cylinders:
            radial = np.linalg.norm(pts[:, None, :2] - self.cyl_xy[None], axis=2) - self.cyl_radius
            vert = np.maximum(-pts[:, None, 2], pts[:, None, 2] - self.cyl_height)
            outside = np.hypot(np.maximum(radial, 0), np.maximum(vert, 0))
            inside = np.minimum(np.maximum(radial, vert), 0)
            best = np.minimum(best, (outside + inside).min(axis=1))
        if len(self.box_lo):
            c = (self.box_lo + self.box_hi) / 2
            h = (self.box_hi - self.box_lo) / 2
            q = np.abs(pts[:, None, :] - c[None]) - h[None]
            d = np.linalg.norm(np.maximum(q, 0), axis=2) + np.minimum(q.max(axis=2), 0)
            best = np.minimum(best, d.min(axis=1))
        if len(self.ring_major):
            rel = pts[:, None, :] - self.ring_center[None]
            along = np.einsum("nkj,kj->nk", rel, self.ring_axis)
            radial = np.linalg.norm(rel - along[..., None] * self.ring_axis[None], axis=2)
            d = np.hypot(radial - self.ring_major, along) - self.ring_minor
            best = np.minimum(best, d.min(axis=1))
        return best

    def label_grid(self, dims, resolution: float, origin=(0.0, 0.0, 0.0)) -> OccupancyLabelGrid:
        """Rasterize obstacles: a cell is labeled when the obstacle overlaps it
        (rings conservatively, by center distance within half a cell diagonal)."""
        origin = np.asarray(origin, dtype=np.float64)
        dims = tuple(int(d) for d in dims)
        labels = np.zeros(dims, dtype=np.uint8)
        edges = [origin[k] + np.arange(dims[k] + 1) * resolution for k in range(3)]
        eps = 1e-9
        for lo, hi in zip(self.box_lo, self.box_hi):
            sl = []
            for k in range(3):
                a = int(np.searchsorted(edges[k], lo[k] + eps, side="right")) - 1
                b = int(np.searchsorted(edges[k], hi[k] - eps, side="left"))
                sl.append(slice(max(a, 0), min(b, dims[k])))
            labels[tuple(sl)] = CLASS_BOX
        if self.num_cylinders:
            x0, y0 = edges[0][:-1], edges[1][:-1]
            for (cx, cy), r, h in zip(self.cyl_xy, self.cyl_radius, self.cyl_height):
                dx = np.maximum(np.maximum(x0 - cx, cx - (x0 + resolution)), 0)
                dy = np.maximum(np.maximum(y0 - cy, cy - (y0 + resolution)), 0)
                col = (dx[:, None] ** 2 + dy[None, :] ** 2) < r * r
                nz = int(np.searchsorted(edges[2], h - eps, side="left"))
                kz0 = int(np.searchsorted(edges[2], 0.0 + eps, side="right")) - 1
                zs = slice(max(kz0, 0), min(nz, dims[2]))
                view = labels[:, :, zs]
                view[col] = CLASS_CYLINDER
        if len(self.ring_major):
            centers = np.stack(np.meshgrid(*[e[:-1] + resolution / 2 for e in edges],
                                           indexing="ij"), axis=-1).reshape(-1, 3)
            slack = resolution * math.sqrt(3) / 2
            for c, a, big, small in zip(self.ring_center, self.ring_axis, self.ring_major,
                                        self.ring_minor):
                near = np.all(np.abs(centers - c) <= big + small + slack, axis=1)
                rel = centers[near] - c
                along = rel @ a
                radial = np.linalg.norm(rel - along[:, None] * a, axis=1)
                hit = np.hypot(radial - big, along) <= small + slack
                flat = np.flatnonzero(near)[hit]
                labels.reshape(-1)[flat] = CLASS_RING
        return OccupancyLabelGrid(labels, len(WORLD_CLASSES) - 1, None, resolution, origin)

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in self.__dataclass_fields__}


def advance_world(world: WorldModel, dt: float) -> WorldModel:
    """Translate moving cylinders by ``v * dt``, reflecting velocity at the
    arena walls (or stopping there when the bounce flag is off)."""
    if dt < 0:
        raise InvalidParameterError("dt must be non-negative")
    if dt == 0 or world.num_cylinders == 0:
        return world
    pos = world.cyl_xy + world.cyl_vel * dt
    vel = world.cyl_vel.copy()
    lo = world.bounds_lo[:2][None] + world.cyl_radius[:, None]
    hi = world.bounds_hi[:2][None] - world.cyl_radius[:, None]
    for _ in range(64):
        below, above = pos < lo, pos > hi
        if not (below.any() or above.any()):
            break
        bounce = world.cyl_bounce[:, None]
        pos = np.where(below & bounce, 2 * lo - pos, pos)
        pos = np.where(above & bounce, 2 * hi - pos, pos)
        vel = np.where((below | above) & bounce, -vel, vel)
        stop = (below | above) & ~bounce
        pos = np.where(stop, np.clip(pos, lo, hi), pos)
        vel = np.where(stop, 0.0, vel)
    pos = np.clip(pos, lo, hi)
    return replace(world, cyl_xy=pos, cyl_vel=vel)


def _ray_cylinders(o, d, world: WorldModel) -> np.ndarray:
    """Nearest positive hit distance per ray against all cylinders (inf = none)."""
    n = len(d)
    best = np.full(n, np.inf)
    for (cx, cy), r, h in zip(world.cyl_xy, world.cyl_radius, world.cyl_height):
        ox, oy = o[0] - cx, o[1] - cy
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2 * (ox * d[:, 0] + oy * d[:, 1])
        c = ox * ox + oy * oy - r * r
        disc = b * b - 4 * a * c
        ok = (a > 1e-12) & (disc >= 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        safe_a = np.where(ok, a, 1.0)
        for t in ((-b - sq) / (2 * safe_a), (-b + sq) / (2 * safe_a)):
            z = o[2] + t * d[:, 2]
            good = ok & (t > 1e-9) & (z >= 0) & (z <= h)
            best = np.where(good & (t < best), t, best)
        for zc in (0.0, h):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (zc - o[2]) / d[:, 2]
                x = ox + t * d[:, 0]
                y = oy + t * d[:, 1]
            good = np.isfinite(t) & (t > 1e-9) & (x * x + y * y <= r * r)
            best = np.where(good & (t < best), t, best)
    return best


def _ray_boxes(o, d, world: WorldModel) -> np.ndarray:
    best = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    for lo, hi in zip(world.box_lo, world.box_hi):
        with np.errstate(invalid="ignore"):
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        t = np.where(tmin > 1e-9, tmin, tmax)
        good = (tmax >= tmin) & (t > 1e-9)
        best = np.where(good & (t < best), t, best)
    return best


def _ray_rings(o, d, world: WorldModel) -> np.ndarray:
    best = np.full(len(d), np.inf)
    for c, axis, big, small in zip(world.ring_center, world.ring_axis, world.ring_major,
                                   world.ring_minor):
        # local frame with the ring axis as z
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(axis, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        frame = np.stack([e1, e2, axis])
        lo_ = frame @ (o - c)
        ld = d @ frame.T
        # bounding-sphere cull
        bsr = big + small
        b = ld @ lo_
        disc = b * b - (lo_ @ lo_ - bsr * bsr)
        cand = np.flatnonzero(disc >= 0)
        if cand.size == 0:
            continue
        dd = ld[cand]
        H = 2 * dd @ lo_
        I = lo_ @ lo_ + big * big - small * small
        J = dd[:, 0] ** 2 + dd[:, 1] ** 2
        K = 2 * (lo_[0] * dd[:, 0] + lo_[1] * dd[:, 1])
        Lc = lo_[0] ** 2 + lo_[1] ** 2
        r2 = 4 * big * big
        coeffs = np.column_stack([2 * H, H * H + 2 * I - r2 * J, 2 * H * I - r2 * K,
                                  np.full(len(dd), I * I - r2 * Lc)])
        comp = np.zeros((len(dd), 4, 4))
        comp[:, 0, :] = -coeffs
        comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
        roots = np.linalg.eigvals(comp)
        real = np.abs(roots.imag) < 1e-6 * (1 + np.abs(roots.real))
        t = np.where(real & (roots.real > 1e-9), roots.real, np.inf).min(axis=1)
        best[cand] = np.minimum(best[cand], t)
    return best


def render_scan(world: WorldModel, pose: Pose, sensor: SensorModel) -> PointCloud:
    """Cast the sensor's rays against the analytic obstacles; returns first-hit
    points in the sensor frame and the directions of rays without a return."""
    dirs_s = sensor.directions()
    dirs_w = dirs_s @ pose.rotation().T
    o = pose.position
    t = np.minimum(np.minimum(_ray_cylinders(o, dirs_w, world), _ray_boxes(o, dirs_w, world)),
                   _ray_rings(o, dirs_w, world))
    hit = t <= sensor.max_range
    return PointCloud(dirs_s[hit] * t[hit, None], misses=dirs_s[~hit])

