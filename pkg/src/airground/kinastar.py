"""Kinodynamic A* over constant-acceleration motion primitives.

Ground states live on the plane ``z = 0`` with zero vertical velocity.  Each
expansion holds a per-axis acceleration from ``{-a_max, 0, +a_max}`` for
``duration`` seconds.  Any primitive whose arc leaves the ground plane pays an
extra ``energy_weight * duration`` on top of its time cost, which is how the
search trades flying against driving around.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import BudgetExceeded, InvalidParameterError, NoPathFound
from .mapping import MapView

GROUND, AERIAL = "ground", "aerial"
_GROUND_EPS = 1e-9


@dataclass(frozen=True)
class RobotState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mode: str = GROUND

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
        v = np.asarray(self.velocity, dtype=np.float64).reshape(3).copy()
        if self.mode not in (GROUND, AERIAL):
            raise InvalidParameterError(f"unknown mode {self.mode!r}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise InvalidParameterError("state must be finite")
        if self.mode == GROUND:
            if abs(p[2]) > 1e-6 or abs(v[2]) > 1e-6:
                raise InvalidParameterError("ground state must have z = 0 and vz = 0")
            p[2] = v[2] = 0.0
        p.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "velocity", v)

    @classmethod
    def at(cls, point, velocity=(0.0, 0.0, 0.0)) -> "RobotState":
        """State at ``point``, on the ground when its height is zero."""
        p = np.asarray(point, dtype=np.float64).reshape(3)
        mode = GROUND if abs(p[2]) <= 1e-6 else AERIAL
        v = np.asarray(velocity, dtype=np.float64).reshape(3).copy()
        if mode == GROUND:
            v[2] = 0.0
        return cls(p, v, mode)


@dataclass(frozen=True)
class PlannerLimits:
    v_max: float = 1.0
    a_max: float = 2.0
    duration: float = 0.4
    energy_weight: float = 1.0
    allow_aerial: bool = True
    max_nodes: int = 20000
    max_depth: Optional[int] = None
    # visited-set bins; ``None`` selects a default, ``0`` disables pruning
    position_bin: Optional[float] = None
    velocity_bin: Optional[float] = None
    goal_tolerance: Optional[float] = None
    # > 1 inflates the heuristic: faster, cost within this factor of optimal
    heuristic_weight: float = 1.0

    def __post_init__(self):
        for name in ("v_max", "a_max", "duration"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.energy_weight < 0:
            raise InvalidParameterError("energy_weight must be non-negative")
        if self.max_nodes < 1:
            raise InvalidParameterError("max_nodes must be positive")
        if self.heuristic_weight < 1:
            raise InvalidParameterError("heuristic_weight must be >= 1")


@dataclass(frozen=True)
class MotionPrimitive:
    acceleration: np.ndarray
    duration: float
    cost: float
    leaves_ground: bool
    samples: np.ndarray


@dataclass(frozen=True)
class GuidanceSegment:
    states: Tuple[RobotState, ...]
    samples: np.ndarray
    cost: float
    nodes_expanded: int = 0
    entry_index: int = -1
    exit_index: int = -1

    @property
    def positions(self) -> np.ndarray:
        if not self.states:
            return np.zeros((0, 3))
        return np.array([s.position for s in self.states])

    @property
    def aerial_fraction(self) -> float:
        if not self.states:
            return 0.0
        return sum(s.mode == AERIAL for s in self.states) / len(self.states)


def primitive_cost(duration: float, leaves_ground: bool, energy_weight: float) -> float:
    return duration * (1.0 + (energy_weight if leaves_ground else 0.0))


_AXIS = np.array([-1.0, 0.0, 1.0])
_GROUND_ACC = np.array([[ax, ay, 0.0] for ax in _AXIS for ay in _AXIS])
_TAKEOFF_ACC = np.array([[ax, ay, 1.0] for ax in _AXIS for ay in _AXIS])
_AERIAL_ACC = np.array([[ax, ay, az] for ax in _AXIS for ay in _AXIS for az in _AXIS])
_GROUND_TAKEOFF_ACC = np.vstack([_GROUND_ACC, _TAKEOFF_ACC])


def _substeps(limits: PlannerLimits, resolution: float) -> int:
    reach = limits.v_max * limits.duration
    return max(2, int(math.ceil(reach / (0.5 * resolution))))


def _successors(p0: np.ndarray, v0: np.ndarray, aerial: bool, limits: PlannerLimits,
                view: Optional[MapView], resolution: float):
    """Vectorized primitive roll-out; returns arrays for the feasible ones."""
    if not aerial:
        acc = _GROUND_ACC if not limits.allow_aerial else _GROUND_TAKEOFF_ACC
    else:
        acc = _AERIAL_ACC
    acc = acc * limits.a_max
    n = _substeps(limits, resolution)
    t = np.linspace(0.0, limits.duration, n + 1)
    pts = p0 + v0 * t[None, :, None] + 0.5 * acc[:, None, :] * (t[None, :, None] ** 2)
    v_end = v0 + acc * limits.duration
    # |v(t)|^2 is convex in t, so checking the endpoints bounds the whole arc
    ok = np.einsum("ij,ij->i", v_end, v_end) <= (limits.v_max + 1e-9) ** 2
    np.maximum(pts[..., 2], 0.0, out=pts[..., 2])
    leaves = (pts[..., 2] > _GROUND_EPS).any(axis=1)
    if view is not None:
        ok &= ~view.points_blocked(pts).any(axis=1)
    k = np.flatnonzero(ok)
    acc, pts, v_end, leaves = acc[k], pts[k], v_end[k], leaves[k]
    end_p = pts[:, -1].copy()
    landed = end_p[:, 2] <= _GROUND_EPS
    end_p[landed, 2] = 0.0
    v_end[landed, 2] = 0.0
    cost = limits.duration * (1.0 + limits.energy_weight * leaves)
    return acc, pts, end_p, v_end, ~landed, leaves, cost


def expand(state: RobotState, limits: PlannerLimits, view: Optional[MapView] = None,
           resolution: Optional[float] = None) -> List[Tuple[MotionPrimitive, RobotState]]:
    """Feasible successors of ``state``.  Primitives breaking the speed limit
    or touching a blocked cell of ``view`` are dropped."""
    res = resolution if resolution is not None else (view.resolution if view is not None else 0.2)
    acc, pts, end_p, end_v, aerial, leaves, cost = _successors(
        state.position, state.velocity, state.mode == AERIAL, limits, view, res)
    out = []
    for k in range(len(acc)):
        succ = RobotState(end_p[k], end_v[k], AERIAL if aerial[k] else GROUND)
        out.append((MotionPrimitive(acc[k], limits.duration, float(cost[k]), bool(leaves[k]), pts[k]),
                    succ))
    return out


def heuristic(position, goal, limits: PlannerLimits, tolerance: float = 0.0) -> float:
    d = float(np.linalg.norm(np.asarray(position) - np.asarray(goal)))
    return max(0.0, d - tolerance) / limits.v_max


def _keys(p: np.ndarray, v: np.ndarray, aerial, pbin: float, vbin: float, depth):
    """Visited-set keys for a batch of states (rows of ``p`` and ``v``)."""
    pk = np.floor(p / pbin).astype(np.int64).tolist() if pbin > 0 else np.round(p, 9).tolist()
    vk = np.round(v / vbin).astype(np.int64).tolist() if vbin > 0 else np.round(v, 9).tolist()
    return [(tuple(a), tuple(b), bool(c), depth) for a, b, c in zip(pk, vk, aerial)]


def plan_guidance(entry: RobotState, goal, view: MapView, limits: PlannerLimits = PlannerLimits()
                  ) -> GuidanceSegment:
    """Minimum-cost primitive sequence from ``entry`` to within the goal
    tolerance of ``goal``.

    Raises :class:`NoPathFound` when the open set runs dry and
    :class:`BudgetExceeded` when more than ``max_nodes`` nodes are expanded.
    """
    goal = np.asarray(goal, dtype=np.float64).reshape(3)
    tol = limits.goal_tolerance if limits.goal_tolerance is not None else view.resolution
    if view.is_blocked_point(entry.position):
        raise InvalidParameterError("entry state lies in a blocked cell")
    if np.linalg.norm(entry.position - goal) <= tol:
        return GuidanceSegment((), np.zeros((0, 3)), 0.0)
    pbin = view.resolution if limits.position_bin is None else limits.position_bin
    vbin = limits.a_max * limits.duration * 0.5 if limits.velocity_bin is None else limits.velocity_bin
    use_depth = limits.max_depth is not None
    res = view.resolution

    counter = itertools.count()
    # node: (position, velocity, aerial, parent, arc samples, g, depth)
    root = (entry.position, entry.velocity, entry.mode == AERIAL, None, None, 0.0, 0)
    w = limits.heuristic_weight
    heap = [(w * heuristic(entry.position, goal, limits, tol), 0.0, next(counter), root)]
    closed = set()
    best_g = {}
    expanded = 0
    while heap:
        _, g, _, node = heapq.heappop(heap)
        p, v, aerial, _, _, _, depth = node
        key = _keys(p[None], v[None], [aerial], pbin, vbin, depth if use_depth else None)[0]
        if key in closed:
            continue
        closed.add(key)
        if np.linalg.norm(p - goal) <= tol:
            return _reconstruct(node, expanded)
        if use_depth and depth >= limits.max_depth:
            continue
        expanded += 1
        if expanded > limits.max_nodes:
            raise BudgetExceeded(f"expanded more than {limits.max_nodes} nodes")
        _, pts, end_p, end_v, end_air, _, cost = _successors(p, v, aerial, limits, view, res)
        dist = np.linalg.norm(end_p - goal, axis=1)
        h = w * np.maximum(dist - tol, 0.0) / limits.v_max
        child_keys = _keys(end_p, end_v, end_air, pbin, vbin, depth + 1 if use_depth else None)
        for k, k2 in enumerate(child_keys):
            g2 = g + float(cost[k])
            if k2 in closed or best_g.get(k2, math.inf) <= g2:
                continue
            best_g[k2] = g2
            child = (end_p[k], end_v[k], bool(end_air[k]), node, pts[k], g2, depth + 1)
            heapq.heappush(heap, (g2 + float(h[k]), g2, next(counter), child))
    raise NoPathFound("open set exhausted before reaching the goal")


def _reconstruct(node, expanded: int) -> GuidanceSegment:
    states, arcs = [], []
    cost = node[5]
    while node is not None:
        p, v, aerial, parent, arc = node[:5]
        states.append(RobotState(p, v, AERIAL if aerial else GROUND))
        if arc is not None:
            arcs.append(arc)
        node = parent
    states.reverse()
    arcs.reverse()
    samples = [states[0].position[None, :]] + [a[1:] for a in arcs]
    return GuidanceSegment(tuple(states), np.vstack(samples), cost, expanded)


def initial_trajectory(start, goal, seed: int = 0, n_rand: int = 0, bounds=None) -> np.ndarray:
    """Obstacle-blind polyline from ``start`` to ``goal`` through ``n_rand``
    uniformly drawn intermediate points inside ``bounds = (lo, hi)``."""
    s = start.position if isinstance(start, RobotState) else np.asarray(start, dtype=np.float64)
    g = np.asarray(goal, dtype=np.float64).reshape(3)
    if n_rand < 0:
        raise InvalidParameterError("n_rand must be non-negative")
    if n_rand == 0:
        return np.vstack([s, g])
    if bounds is None:
        raise InvalidParameterError("bounds are required for random intermediate points")
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
    mids = np.random.default_rng(seed).uniform(lo, hi, size=(n_rand, 3))
    return np.vstack([s, mids, g])


def sample_polyline(polyline, step: float) -> np.ndarray:
    """Points along ``polyline`` no more than ``step`` apart, vertices included."""
    poly = np.asarray(polyline, dtype=np.float64)
    if len(poly) < 2:
        return poly.copy()
    out = [poly[:1]]
    for a, b in zip(poly[:-1], poly[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
        u = np.arange(1, n + 1) / n
        out.append(a + u[:, None] * (b - a))
    return np.vstack(out)


def find_collision_segments(polyline, view: MapView, samples: Optional[np.ndarray] = None
                            ) -> List[Tuple[int, int]]:
    """Maximal blocked runs of the polyline sampled at half the map resolution.

    Indices refer to ``sample_polyline(polyline, resolution / 2)``: ``entry``
    is the last free sample before the run and ``exit`` the first free sample
    after it (clamped to the ends when the run touches them).
    """
    pts = sample_polyline(polyline, 0.5 * view.resolution) if samples is None else samples
    blocked = view.points_blocked(pts)
    segs = []
    i, n = 0, len(pts)
    while i < n:
        if not blocked[i]:
            i += 1
            continue
        j = i
        while j < n and blocked[j]:
            j += 1
        segs.append((max(i - 1, 0), min(j, n - 1)))
        i = j
    return segs
