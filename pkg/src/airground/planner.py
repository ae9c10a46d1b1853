"""One replanning cycle: obstacle-blind line to a local goal, A* repair of its
blocked stretches, pair generation, optimization of topological variants and
selection."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .bspline import BSplineTrajectory, boundary_control_points, fit_to_waypoints
from .errors import InvalidParameterError, PlanningError
from .esdf import build_esdf, resample_blocked
from .kinastar import (PlannerLimits, RobotState, find_collision_segments,
                       initial_trajectory, plan_guidance, sample_polyline)
from .mapping import MapView
from .trajopt import (CostWeights, OptimizationReport, PvPair, collision_cost,
                      generate_pv_pairs, optimize, select_best, topo_variants)

GROUND_EPS = 1e-6


@dataclass(frozen=True)
class PlannerConfig:
    robot_radius: float = 0.2
    safety_margin: float = 0.25
    horizon: float = 3.5
    cruise_fraction: float = 0.85  # nominal speed as a share of v_max
    knot_spacing: float = 0.5
    limits: PlannerLimits = field(default_factory=lambda: PlannerLimits(max_nodes=4000, heuristic_weight=2.0))
    weights: CostWeights = field(default_factory=CostWeights)
    use_topo: bool = True
    topo_k_max: int = 1
    max_iterations: int = 60
    repair_rounds: int = 2
    inflation_levels: tuple = (1.0, 0.5, 0.0)
    check_horizon: float = 1.5
    escape_distance: float = 0.6
    escape_headings: int = 16
    esdf_baseline: bool = False
    esdf_resolution: float = 0.1

    def __post_init__(self):
        if self.robot_radius < 0 or not self.horizon > 0:
            raise InvalidParameterError("robot radius must be >= 0 and horizon > 0")
        if not (0 < self.cruise_fraction <= 1 and self.knot_spacing > 0):
            raise InvalidParameterError("cruise fraction must lie in (0, 1], knot spacing > 0")

    @property
    def cruise_speed(self) -> float:
        return self.cruise_fraction * self.weights.v_max


@dataclass
class PlanOutcome:
    trajectory: Optional[BSplineTrajectory]
    reason: str = "ok"
    pairs: int = 0
    candidates: int = 0
    report: Optional[OptimizationReport] = None
    guidance_aerial_fraction: float = 0.0
    esdf_ms: Optional[float] = None
    pair_ms: Optional[float] = None


def trajectory_samples(traj: BSplineTrajectory, step: float) -> np.ndarray:
    """Curve points no further apart than ``step`` (the control polygon length
    bounds the curve length)."""
    poly = np.sum(np.linalg.norm(np.diff(traj.control_points, axis=0), axis=1))
    n = max(2, int(math.ceil(poly / step)) + 1)
    pts = traj.evaluate(np.linspace(traj.t0, traj.t_end, n))
    if pts.shape[1] == 2:
        return np.column_stack([pts, np.zeros(len(pts))])
    # round-off below the floor would read as out of bounds
    low = (pts[:, 2] < 0.0) & (pts[:, 2] > -1e-9)
    pts[low, 2] = 0.0
    return pts


def trajectory_collides(traj: BSplineTrajectory, view: MapView,
                        horizon: Optional[float] = None) -> bool:
    """Blocked test along the curve, optionally only its first ``horizon`` seconds."""
    pts = trajectory_samples(traj, 0.5 * view.resolution)
    if horizon is not None and traj.t0 + horizon < traj.t_end:
        keep = int(math.ceil(len(pts) * horizon / traj.duration)) + 1
        pts = pts[:keep]
    return bool(view.points_blocked(pts).any())


def local_goal(start, goal, horizon: float, view: MapView) -> Optional[np.ndarray]:
    """Point on the segment toward ``goal`` at most ``horizon`` away, backed
    off toward the start until it is free."""
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    d = goal - start
    dist = float(np.linalg.norm(d))
    if dist <= horizon:
        target, reach = goal, dist
    else:
        target, reach = start + d * (horizon / dist), horizon
    if not view.is_blocked_point(target):
        return target
    direction = d / dist if dist > 0 else d
    for back in np.arange(view.resolution, reach, view.resolution):
        p = target - direction * back
        p[2] = goal[2] if abs(p[2] - goal[2]) < GROUND_EPS else p[2]
        if not view.is_blocked_point(p):
            return p
    return None


def _carve(view: MapView, keep: MapView, center, radius: float) -> MapView:
    """Copy of ``view`` with cells within ``radius`` of ``center`` reset to
    their state in ``keep``."""
    c = np.array(view.cell_of(center))
    n = int(math.ceil(radius / view.resolution))
    lo = np.maximum(c - n, 0)
    hi = np.minimum(c + n + 1, np.array(view.dims))
    blocked = view.blocked.copy()
    idx = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), -1)
    near = np.sum((idx - c) ** 2, axis=-1) * view.resolution ** 2 <= radius ** 2
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    blocked[sl] = np.where(near, keep.blocked[sl], blocked[sl])
    blocked.setflags(write=False)
    return MapView(view.state, view.resolution, view.origin, view.version, blocked, view.inflation)


class Planner:
    def __init__(self, config: PlannerConfig = PlannerConfig()):
        self.config = config

    def footprint_radius(self, resolution: float) -> float:
        """Robot radius padded by half a cell, since a free cell can hold the
        robot centre anywhere inside it."""
        return self.config.robot_radius + 0.5 * resolution

    # -- helpers -----------------------------------------------------------
    def _seed(self, iota: np.ndarray, state: RobotState, accel, final: bool) -> BSplineTrajectory:
        cfg = self.config
        length = float(np.sum(np.linalg.norm(np.diff(iota, axis=0), axis=1)))
        n_seg = max(3, int(math.ceil(length / (cfg.cruise_speed * cfg.knot_spacing))))
        u = np.linspace(0.0, 1.0, n_seg + 1)[:, None]
        waypoints = iota[0] + u * (iota[-1] - iota[0])
        traj, _ = fit_to_waypoints(waypoints, cfg.knot_spacing)
        q = traj.control_points.copy()
        q[:3] = boundary_control_points(state.position, state.velocity, accel, cfg.knot_spacing)
        if final:
            q[-3:] = iota[-1]
        q[np.abs(q[:, 2]) < GROUND_EPS, 2] = 0.0
        return traj.with_control_points(q)

    def _guides(self, polyline, state: RobotState, view: MapView,
                limits: PlannerLimits) -> List[np.ndarray]:
        samples = sample_polyline(polyline, 0.5 * view.resolution)
        guides = []
        for i, j in find_collision_segments(polyline, view, samples):
            entry_pos = samples[i]
            if np.linalg.norm(entry_pos - state.position) < 1e-9:
                entry = state
            else:
                entry = RobotState.at(entry_pos if entry_pos[2] > GROUND_EPS else
                                      np.r_[entry_pos[:2], 0.0])
            if view.is_blocked_point(entry.position):
                raise PlanningError("guidance entry is blocked")
            seg = plan_guidance(entry, samples[j], view, limits)
            guides.append(np.vstack([seg.samples, samples[j][None]]) if len(seg.samples)
                          else samples[[i, j]])
        return guides

    def _ground_mask(self, traj: BSplineTrajectory, pairs: Sequence[PvPair]) -> np.ndarray:
        q = traj.control_points
        mask = q[:, 2] <= GROUND_EPS
        for p in pairs:
            if p.anchor[2] > GROUND_EPS and p.direction[2] > 0.0:
                lo, hi = max(p.index - 1, 0), min(p.index + 2, len(q))
                mask[lo:hi] = False
        return mask

    # -- main entry ----------------------------------------------------------
    def plan(self, state: RobotState, goal, raw_view: MapView, accel=(0.0, 0.0, 0.0),
             seed: int = 0) -> PlanOutcome:
        """Plan against the map inflated by radius plus margin, retrying with
        the smaller inflation levels when that fails."""
        cfg = self.config
        accel = np.asarray(accel, dtype=np.float64)
        goal = np.asarray(goal, dtype=np.float64)
        footprint = raw_view.inflate(self.footprint_radius(raw_view.resolution))
        outcome = PlanOutcome(None, "start blocked")
        for level in cfg.inflation_levels:
            view = raw_view.inflate((cfg.robot_radius + cfg.safety_margin) * level)
            check = raw_view.inflate(max(footprint.inflation,
                                         0.5 * (view.inflation + footprint.inflation)))
            if view.is_blocked_point(state.position):
                if footprint.is_blocked_point(state.position):
                    continue
                # inside the margin only: free a pocket so the robot can back out
                view = _carve(view, footprint, state.position, cfg.safety_margin + view.resolution)
                check = footprint
            elif check.is_blocked_point(state.position):
                check = footprint
            outcome = self._plan_in(state, goal, view, check, accel, seed)
            if outcome.trajectory is not None:
                return outcome
        escape = self._escape(state, raw_view, accel)
        if escape is not None:
            return PlanOutcome(escape, f"escape after: {outcome.reason}")
        return outcome

    def _escape(self, state: RobotState, raw_view: MapView, accel) -> Optional[BSplineTrajectory]:
        """Short straight move toward the heading with the most clearance from
        nearby blocked cells; used when every regular attempt failed."""
        cfg = self.config
        res = raw_view.resolution
        reach = cfg.escape_distance + cfg.robot_radius + res
        c = np.array(raw_view.cell_of(state.position))
        n = int(math.ceil(reach / res))
        lo = np.maximum(c - n, 0)
        hi = np.minimum(c + n + 1, np.array(raw_view.dims))
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        cells = np.argwhere(raw_view.blocked[sl]) + lo
        obstacles = raw_view.origin + (cells + 0.5) * res

        angles = np.arange(cfg.escape_headings) * (2 * math.pi / cfg.escape_headings)
        heads = np.column_stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)])
        if state.mode == "aerial":
            heads = np.vstack([heads, [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]])
        u = np.linspace(0.0, 1.0, 7)[1:]
        pts = state.position + cfg.escape_distance * u[None, :, None] * heads[:, None, :]
        pts[..., 2] = np.maximum(pts[..., 2], 0.0)
        outside = raw_view.points_blocked(pts).any(axis=1)
        if len(obstacles):
            d = np.linalg.norm(pts[:, :, None, :] - obstacles[None, None], axis=-1).min(axis=(1, 2))
        else:
            d = np.full(len(heads), np.inf)
        d = np.where(outside, -np.inf, d)
        best = int(np.argmax(d))
        if d[best] == -np.inf:
            return None
        end = pts[best, -1]
        waypoints = state.position + np.linspace(0.0, 1.0, 3)[:, None] * (end - state.position)
        dt = cfg.knot_spacing
        acc = np.asarray(accel, dtype=np.float64)
        for _ in range(4):
            # six points keep the start and end triples disjoint
            traj, _ = fit_to_waypoints(waypoints, dt, num_control_points=6)
            q = traj.control_points.copy()
            q[:3] = boundary_control_points(state.position, state.velocity, acc, dt)
            q[-3:] = end
            q[:, 2] = np.maximum(q[:, 2], 0.0)
            if state.mode == "ground":
                q[:, 2] = 0.0
            traj = traj.with_control_points(q)
            # reversing out of a fast approach can overshoot v_max: stretch time
            peak = float(np.abs(traj.derivative(1).control_points).max())
            if peak <= cfg.weights.v_max * 1.05:
                break
            dt *= peak / cfg.weights.v_max
            # the acceleration term grows with dt^2 and would make stretching diverge
            acc = np.zeros(3)
        else:
            return None
        span = cfg.escape_distance + float(np.linalg.norm(state.velocity)) * traj.duration
        samples = trajectory_samples(traj, 0.5 * res)
        if (np.linalg.norm(samples - state.position, axis=1).max() > span + res
                or raw_view.points_blocked(samples).any()):
            return None
        return traj

    def _plan_in(self, state, goal, view, check, accel, seed) -> PlanOutcome:
        cfg = self.config
        target = local_goal(state.position, goal, cfg.horizon, view)
        if target is None:
            return PlanOutcome(None, "no free local goal")
        final = bool(np.allclose(target, goal))
        iota = initial_trajectory(state, target, seed=seed, n_rand=0)
        seed_traj = self._seed(iota, state, accel, final)
        limits = replace(cfg.limits, v_max=cfg.weights.v_max, a_max=cfg.weights.a_max,
                         energy_weight=cfg.weights.energy_weight)

        outcome = PlanOutcome(None)
        try:
            guides = self._guides(iota, state, view, limits)
        except PlanningError as exc:
            return PlanOutcome(None, f"guidance failed: {type(exc).__name__}")
        if guides:
            outcome.guidance_aerial_fraction = float(np.mean(
                np.concatenate([g[:, 2] > GROUND_EPS for g in guides])))

        n = seed_traj.num_control_points
        t0 = time.perf_counter()
        pairs = [p for p in generate_pv_pairs(seed_traj, view, guides) if 3 <= p.index < n - 3] \
            if guides else []
        if cfg.esdf_baseline:
            collision_cost(seed_traj.control_points, pairs, cfg.weights.clearance)
            outcome.pair_ms = (time.perf_counter() - t0) * 1e3
            t1 = time.perf_counter()
            build_esdf(resample_blocked(view, cfg.esdf_resolution), cfg.esdf_resolution)
            outcome.esdf_ms = (time.perf_counter() - t1) * 1e3
        outcome.pairs = len(pairs)

        variants = topo_variants(pairs, view, cfg.topo_k_max) if (cfg.use_topo and pairs) else [pairs]
        clear, partial = [], []
        for variant in variants:
            result = self._optimize_variant(seed_traj, variant, view, check, target, limits, state)
            if result is not None:
                (clear if result[2] else partial).append(result[:2])
        outcome.candidates = len(clear) + len(partial)
        if clear or partial:
            # a candidate clear only over the next replan window is still
            # better than stopping; the next cycle sees more of the map
            candidates = clear or partial
            best = select_best(candidates, cfg.weights)
            outcome.trajectory = best
            outcome.report = next(r for t, r in candidates if t is best)
            outcome.reason = "ok" if clear else "clear within horizon"
            return outcome

        fallback = self._fallback(iota, guides, state, accel, final, view, check)
        if fallback is not None:
            outcome.trajectory = fallback
            outcome.reason = "fallback to guidance fit"
            return outcome
        outcome.reason = "no collision-free candidate"
        return outcome

    def _optimize_variant(self, seed_traj, pairs, view, check, target, limits, state):
        cfg = self.config
        traj = seed_traj
        pairs = list(pairs)
        mask = self._ground_mask(traj, pairs)
        report = None
        for round_ in range(cfg.repair_rounds + 1):
            traj, report = optimize(traj, pairs, cfg.weights, goal=target, ground_mask=mask,
                                    max_iterations=cfg.max_iterations)
            if not trajectory_collides(traj, check):
                return traj, report, True
            if round_ == cfg.repair_rounds:
                break
            poly = trajectory_samples(traj, 0.5 * view.resolution)
            try:
                guides = self._guides(poly, state, view, limits)
            except PlanningError:
                break
            if not guides:
                break
            n = traj.num_control_points
            known = {p.index for p in pairs}
            fresh = [p for p in generate_pv_pairs(traj, view, guides)
                     if 3 <= p.index < n - 3 and p.index not in known]
            if not fresh:
                break
            pairs.extend(fresh)
            mask = mask & self._ground_mask(traj, fresh)
        if not trajectory_collides(traj, check, cfg.check_horizon):
            return traj, report, False
        return None

    def _fallback(self, iota, guides, state, accel, final, view, check):
        """Spline through the repaired polyline itself."""
        cfg = self.config
        if not guides:
            return None
        samples = sample_polyline(iota, 0.5 * view.resolution)
        pts = [samples[:1]]
        for g in guides:
            pts.append(g)
        pts.append(samples[-1:])
        path = np.vstack(pts)
        seglen = np.linalg.norm(np.diff(path, axis=0), axis=1)
        s = np.r_[0.0, np.cumsum(seglen)]
        n_seg = max(2, int(math.ceil(s[-1] / (cfg.cruise_speed * cfg.knot_spacing))))
        si = np.linspace(0.0, s[-1], n_seg + 1)
        way = np.column_stack([np.interp(si, s, path[:, k]) for k in range(3)])
        traj, _ = fit_to_waypoints(way, cfg.knot_spacing)
        q = traj.control_points.copy()
        q[:3] = boundary_control_points(state.position, state.velocity, accel, cfg.knot_spacing)
        if final:
            q[-3:] = iota[-1]
        q[:, 2] = np.maximum(q[:, 2], 0.0)
        traj = traj.with_control_points(q)
        return None if trajectory_collides(traj, check, cfg.check_horizon) else traj
