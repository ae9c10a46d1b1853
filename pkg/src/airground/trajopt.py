"""Distance-field-free B-spline optimization.

Collision cost comes from anchor/direction pairs: for a control point ``Q``
inside an obstacle, the pair holds a surface point ``p`` and an outward unit
direction ``v`` so that ``(Q - p) . v`` acts as a signed clearance.  No
distance field is ever built.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from .bspline import BSplineTrajectory
from .errors import InvalidParameterError
from .mapping import MapView
from .raycast import grid_walk

TERMS = ("smooth", "collision", "feasibility", "terminal", "curvature")


@dataclass(frozen=True)
class CostWeights:
    smooth: float = 1.0
    collision: float = 10.0
    feasibility: float = 1.0
    terminal: float = 1.0
    curvature: float = 5.0
    clearance: float = 0.3
    v_max: float = 1.0
    a_max: float = 2.0
    curvature_max: float = 2.0
    energy_weight: float = 1.0
    penalize_jerk: bool = False
    j_max: float = 10.0

    def __post_init__(self):
        for name in ("smooth", "collision", "feasibility", "terminal", "curvature",
                     "clearance", "v_max", "a_max", "energy_weight", "j_max"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be non-negative")
        if not self.curvature_max > 0:
            raise InvalidParameterError("curvature_max must be positive")
        if not self.clearance > 0:
            raise InvalidParameterError("clearance must be positive")


@dataclass(frozen=True)
class PvPair:
    index: int
    obstacle: int
    anchor: np.ndarray
    direction: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(v)
        if not n > 0:
            raise InvalidParameterError("pair direction must be non-zero")
        object.__setattr__(self, "direction", v / n)
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=np.float64).reshape(3))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))


@dataclass
class OptimizationReport:
    cost: float
    terms: Dict[str, float]
    iterations: int
    gradient_norm: float
    converged: bool
    cost_trace: List[float] = field(default_factory=list)
    message: str = ""
    rejected_steps: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _as3(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] == 3:
        return q
    return np.concatenate([q, np.zeros(q.shape[:-1] + (1,))], axis=-1)


def obstacle_distance(point, pair: PvPair) -> float:
    """Signed clearance of ``point`` along the pair direction; positive is outside."""
    return float(np.dot(_as3(point) - pair.anchor, pair.direction))


# ---------------------------------------------------------------- pair generation

def surface_crossing(view: MapView, start, direction, max_dist: float = 3.0) -> Optional[np.ndarray]:
    """First point along the ray where it enters a free in-bounds cell, or
    ``None`` if there is none within ``max_dist``."""
    start = np.asarray(start, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    for cell, t_in, _ in grid_walk(start, d, max_dist, view.resolution, view.origin):
        if not view.in_bounds(cell):
            return None
        if not view.blocked[cell]:
            return start + t_in * d
    return None


def _guide_point(q, tangent, guide: np.ndarray) -> Optional[np.ndarray]:
    """Point of the guide polyline on the plane through ``q`` normal to
    ``tangent``, nearest to ``q``; falls back to the nearest vertex."""
    s = (guide - q) @ tangent
    best, best_d = None, math.inf
    for k in np.flatnonzero(np.sign(s[:-1]) != np.sign(s[1:])):
        a, b = guide[k], guide[k + 1]
        u = s[k] / (s[k] - s[k + 1])
        x = a + u * (b - a)
        dist = np.linalg.norm(x - q)
        if dist < best_d:
            best, best_d = x, dist
    zero = np.flatnonzero(s == 0.0)
    for k in zero:
        dist = np.linalg.norm(guide[k] - q)
        if dist < best_d:
            best, best_d = guide[k], dist
    if best is None:
        best = guide[np.argmin(np.linalg.norm(guide - q, axis=1))]
    return best


def generate_pv_pairs(traj: BSplineTrajectory, view: MapView, guides: Sequence[np.ndarray],
                      max_dist: float = 3.0, diagnostics: Optional[list] = None) -> List[PvPair]:
    """Pairs for every control point inside a blocked cell.

    Each colliding control point is matched to the guide path (collision-free
    repair points) where the plane normal to the local trajectory direction
    cuts it; ``v`` points from the control point toward that match and ``p``
    is where the ray along ``v`` first leaves the obstacle.
    """
    q = _as3(traj.control_points)
    guides = [np.asarray(g, dtype=np.float64).reshape(-1, 3) for g in guides if len(g)]
    if not guides:
        raise InvalidParameterError("guide path is empty")
    comps = view.components()
    pairs = []
    blocked = view.points_blocked(q)
    for i in np.flatnonzero(blocked):
        lo, hi = max(i - 1, 0), min(i + 1, len(q) - 1)
        tangent = q[hi] - q[lo]
        if np.linalg.norm(tangent) < 1e-12:
            tangent = np.array([1.0, 0.0, 0.0])
        tangent = tangent / np.linalg.norm(tangent)
        target = min((_guide_point(q[i], tangent, g) for g in guides),
                     key=lambda x: np.linalg.norm(x - q[i]))
        v = target - q[i]
        if np.linalg.norm(v) < 1e-9:
            if diagnostics is not None:
                diagnostics.append((int(i), "guide point coincides with control point"))
            continue
        v = v / np.linalg.norm(v)
        p = surface_crossing(view, q[i], v, max_dist)
        if p is None:
            if diagnostics is not None:
                diagnostics.append((int(i), "no surface crossing within search radius"))
            continue
        cell = view.cell_of(q[i])
        obstacle = int(comps[cell]) if view.in_bounds(cell) else 0
        pairs.append(PvPair(int(i), obstacle, p, v, q[i]))
    return pairs


# ---------------------------------------------------------------- cost terms

def _barrier(x: np.ndarray, scale: float):
    """max(0, x)^3 / scale^2 and its derivative."""
    xp = np.maximum(x, 0.0)
    return xp ** 3 / scale ** 2, 3.0 * xp ** 2 / scale ** 2


@lru_cache(maxsize=64)
def _diff_matrix(n: int, order: int) -> np.ndarray:
    """Matrix form of ``np.diff(., n=order, axis=0)`` for ``n`` rows."""
    m = np.diff(np.eye(n), n=order, axis=0)
    m.setflags(write=False)
    return m


def _diff_adjoint(g: np.ndarray, order: int) -> np.ndarray:
    """Transpose of ``np.diff(., n=order, axis=0)`` applied to ``g``."""
    return _diff_matrix(len(g) + order, order).T @ g


def smoothness_cost(q: np.ndarray):
    """Squared second and third differences of the control points (the
    acceleration and jerk control points up to powers of the knot spacing)."""
    d2, d3 = _diff_matrix(len(q), 2), _diff_matrix(len(q), 3)
    a = d2 @ q
    j = d3 @ q
    cost = float(np.sum(a * a) + np.sum(j * j))
    grad = d2.T @ (2.0 * a) + d3.T @ (2.0 * j)
    return cost, grad


def collision_cost(q: np.ndarray, pairs: Sequence[PvPair], clearance: float):
    grad = np.zeros_like(q)
    if not pairs:
        return 0.0, grad
    d = q.shape[1]
    idx = np.array([p.index for p in pairs])
    anchors = np.array([p.anchor for p in pairs])
    dirs = np.array([p.direction for p in pairs])
    dist = np.einsum("kj,kj->k", _as3(q[idx]) - anchors, dirs)
    f, df = _barrier(clearance - dist, clearance)
    np.add.at(grad, idx, -df[:, None] * dirs[:, :d])
    return float(f.sum()), grad


def feasibility_cost(q: np.ndarray, dt: float, v_max: float, a_max: float,
                     penalize_jerk: bool = False, j_max: float = 10.0):
    """Per-axis barrier on velocity and acceleration control points exceeding
    their limits (optionally jerk too)."""
    grad = np.zeros_like(q)
    cost = 0.0
    limits = [(1, v_max), (2, a_max)] + ([(3, j_max)] if penalize_jerk else [])
    for order, limit in limits:
        if len(q) <= order:
            continue
        c = np.diff(q, n=order, axis=0) / dt ** order
        f, df = _barrier(np.abs(c) - limit, 1.0)
        cost += float(f.sum())
        grad += _diff_adjoint(df * np.sign(c), order) / dt ** order
    return cost, grad


def terminal_point(q: np.ndarray) -> np.ndarray:
    return (q[-3] + 4.0 * q[-2] + q[-1]) / 6.0


def terminal_cost(q: np.ndarray, goal):
    grad = np.zeros_like(q)
    if goal is None:
        return 0.0, grad
    goal = np.asarray(goal, dtype=np.float64)[: q.shape[1]]
    r = terminal_point(q) - goal
    for k, w in zip((-3, -2, -1), (1 / 6, 4 / 6, 1 / 6)):
        grad[k] += 2.0 * w * r
    return float(r @ r), grad


def curvature_values(q: np.ndarray, ground_mask=None) -> np.ndarray:
    """Heading change over step length for every ground triple; NaN elsewhere."""
    xy = q[:, :2]
    dq = np.diff(xy, axis=0)
    beta = np.arctan2(dq[:, 1], dq[:, 0])
    dbeta = (beta[1:] - beta[:-1] + math.pi) % (2 * math.pi) - math.pi
    dbeta[dbeta == -math.pi] = math.pi
    length = np.linalg.norm(dq[:-1], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.abs(dbeta) / length
    mask = _triple_mask(len(q), ground_mask)
    c[~mask] = np.nan
    return c


def _triple_mask(n: int, ground_mask) -> np.ndarray:
    if ground_mask is None:
        return np.ones(max(n - 2, 0), dtype=bool)
    g = np.asarray(ground_mask, dtype=bool)
    return g[:-2] & g[1:-1] & g[2:]


def curvature_cost(q: np.ndarray, c_max: float, ground_mask=None):
    grad = np.zeros_like(q)
    if len(q) < 3:
        return 0.0, grad
    dq = np.diff(q[:, :2], axis=0)
    n2 = np.einsum("ij,ij->i", dq, dq)
    beta = np.arctan2(dq[:, 1], dq[:, 0])
    i = np.flatnonzero(_triple_mask(len(q), ground_mask) & (n2[:-1] >= 1e-18) & (n2[1:] >= 1e-18))
    if i.size == 0:
        return 0.0, grad
    db = (beta[i + 1] - beta[i] + math.pi) % (2 * math.pi) - math.pi
    length = np.sqrt(n2[i])
    c = np.abs(db) / length
    act = c > c_max
    if not act.any():
        return 0.0, grad
    i, db, length, c = i[act], db[act], length[act], c[act]
    excess = c - c_max
    s = np.where(db >= 0, 1.0, -1.0)
    # d beta / d (dq) = (-dy, dx) / |dq|^2
    gb0 = np.column_stack([-dq[i, 1], dq[i, 0]]) / n2[i, None]
    gb1 = np.column_stack([-dq[i + 1, 1], dq[i + 1, 0]]) / n2[i + 1, None]
    g_d0 = (s[:, None] * -gb0 / length[:, None]
            - (np.abs(db) / length ** 3)[:, None] * dq[i]) * (2.0 * excess)[:, None]
    g_d1 = (s / length)[:, None] * gb1 * (2.0 * excess)[:, None]
    # dq[i] = Q[i+1] - Q[i], dq[i+1] = Q[i+2] - Q[i+1]
    g2 = np.zeros((len(q), 2))
    np.add.at(g2, i, -g_d0)
    np.add.at(g2, i + 1, g_d0 - g_d1)
    np.add.at(g2, i + 2, g_d1)
    grad[:, :2] = g2
    return float(np.sum(excess ** 2)), grad


def total_cost_and_gradient(traj: BSplineTrajectory, pairs: Sequence[PvPair], weights: CostWeights,
                            goal=None, ground_mask=None, q: Optional[np.ndarray] = None):
    """Weighted sum of the five terms.  Returns ``(cost, gradient, per_term)``
    where ``per_term`` holds the unweighted term values."""
    q = traj.control_points if q is None else q
    if len(q) < traj.degree + 2:
        raise InvalidParameterError(f"need at least {traj.degree + 2} control points")
    if ground_mask is None and q.shape[1] == 2:
        ground_mask = np.ones(len(q), dtype=bool)
    parts = {
        "smooth": smoothness_cost(q),
        "collision": collision_cost(q, pairs, weights.clearance),
        "feasibility": feasibility_cost(q, traj.dt, weights.v_max, weights.a_max,
                                        weights.penalize_jerk, weights.j_max),
        "terminal": terminal_cost(q, goal),
        "curvature": curvature_cost(q, weights.curvature_max, ground_mask)
        if ground_mask is not None else (0.0, np.zeros_like(q)),
    }
    total = 0.0
    grad = np.zeros_like(q)
    for name, (c, g) in parts.items():
        w = getattr(weights, name)
        total += w * c
        grad += w * g
    return total, grad, {k: v[0] for k, v in parts.items()}


# ---------------------------------------------------------------- optimization

def optimize(traj: BSplineTrajectory, pairs: Sequence[PvPair], weights: CostWeights, goal=None,
             ground_mask=None, max_iterations: int = 100, pinned: int = 3
             ) -> Tuple[BSplineTrajectory, OptimizationReport]:
    """Quasi-Newton descent over the free control points.

    The first and last ``pinned`` control points never move, and neither does
    the height of any control point flagged in ``ground_mask``.
    """
    q0 = traj.control_points.copy()
    n, d = q0.shape
    if n < traj.degree + 2:
        raise InvalidParameterError(f"need at least {traj.degree + 2} control points")
    if ground_mask is None and d == 2:
        ground_mask = np.ones(n, dtype=bool)
    free = np.zeros((n, d), dtype=bool)
    free[pinned:n - pinned] = True
    if ground_mask is not None and d == 3:
        free[np.asarray(ground_mask, dtype=bool), 2] = False
    idx = np.flatnonzero(free.ravel())
    trace: List[float] = []
    rejected = [0]

    def unpack(x):
        q = q0.copy().ravel()
        q[idx] = x
        return q.reshape(n, d)

    last = {}

    def fun(x):
        c, g, _ = total_cost_and_gradient(traj, pairs, weights, goal, ground_mask, unpack(x))
        if not math.isfinite(c) or not np.all(np.isfinite(g)):
            rejected[0] += 1
            c, g = 1e300, np.zeros_like(q0)
        last["x"], last["c"] = x.copy(), c
        return c, g.ravel()[idx]

    c0, g0 = fun(q0.ravel()[idx]) if len(idx) else (0.0, np.zeros(0))
    trace.append(c0)
    if len(idx) == 0 or np.linalg.norm(g0) < 1e-6:
        _, _, terms = total_cost_and_gradient(traj, pairs, weights, goal, ground_mask)
        return traj, OptimizationReport(c0, terms, 0, float(np.linalg.norm(g0)), True, trace,
                                        "already stationary")

    def record(xk):
        if "x" in last and np.array_equal(last["x"], xk):
            trace.append(last["c"])
        else:
            trace.append(fun(xk)[0])

    res = minimize(fun, q0.ravel()[idx], jac=True, method="L-BFGS-B", callback=record,
                   options={"maxiter": max_iterations, "gtol": 1e-6, "ftol": 1e-12})
    x = res.x
    c, g = fun(x)
    if c > c0:  # never hand back something worse than the input
        x, c, g = q0.ravel()[idx], c0, g0
    out = traj.with_control_points(unpack(x))
    _, _, terms = total_cost_and_gradient(out, pairs, weights, goal, ground_mask)
    gnorm = float(np.linalg.norm(g))
    report = OptimizationReport(float(c), terms, int(res.nit), gnorm,
                                bool(res.success or gnorm < 1e-6), trace, str(res.message),
                                rejected[0])
    return out, report


# ---------------------------------------------------------------- topology and selection

def topo_variants(pairs: Sequence[PvPair], view: MapView, k_max: int = 3,
                  max_dist: float = 3.0) -> List[List[PvPair]]:
    """Pair sets with the direction of each of the first ``k_max`` obstacles
    either kept or reversed (and re-anchored on the far surface)."""
    if not pairs:
        return [[]]
    obstacles = list(dict.fromkeys(p.obstacle for p in pairs))[:k_max]
    flipped = {}
    for p in pairs:
        if p.obstacle in obstacles:
            v2 = -p.direction
            anchor = surface_crossing(view, p.origin, v2, max_dist)
            flipped[id(p)] = None if anchor is None else replace(p, anchor=anchor, direction=v2)
    variants = []
    for choice in itertools.product((False, True), repeat=len(obstacles)):
        rev = {o for o, c in zip(obstacles, choice) if c}
        out = []
        for p in pairs:
            if p.obstacle in rev:
                q = flipped[id(p)]
                if q is None:
                    out = None
                    break
                out.append(q)
            else:
                out.append(p)
        if out is not None:
            variants.append(out)
    return variants


def aerial_control_points(traj: BSplineTrajectory, height: float = 1e-6) -> int:
    if traj.dim == 2:
        return 0
    return int(np.sum(traj.control_points[:, 2] > height))


def select_best(candidates: Sequence[Tuple[BSplineTrajectory, OptimizationReport]],
                weights: Optional[CostWeights] = None, rel_tol: float = 1e-9) -> BSplineTrajectory:
    """Cheapest converged candidate; ties go to fewer airborne control points,
    then to the earlier candidate.  Falls back to all candidates if none
    converged."""
    if not candidates:
        raise InvalidParameterError("no candidates to select from")
    pool = [k for k, (_, r) in enumerate(candidates) if r.converged] or list(range(len(candidates)))
    best_cost = min(candidates[k][1].cost for k in pool)
    tol = rel_tol * max(1.0, abs(best_cost))
    tied = [k for k in pool if candidates[k][1].cost <= best_cost + tol]
    k = min(tied, key=lambda k: (aerial_control_points(candidates[k][0]), k))
    return candidates[k][0]
