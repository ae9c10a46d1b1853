"""Closed-loop scenario runner: sense, complete, map, plan, move, repeat."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .bspline import BSplineTrajectory
from .errors import ConfigError, InvalidParameterError
from .kinastar import PlannerLimits, RobotState
from .mapping import (LocalMap, Pose, SensorModel, WorldModel, render_scan)
from .occupancy import (EMPTY, IdentityCompletion, OccupancyLabelGrid, OracleCompletion,
                        ShadowExtrude, complete, occupancy_iou)
from .planner import Planner, PlannerConfig, trajectory_samples
from .trajopt import CostWeights

CSV_SCHEMA_VERSION = 1
COMPLETIONS = ("identity", "shadow_extrude", "oracle")
GROUND_SNAP = 0.02  # heights below this are treated as touching the ground


@dataclass(frozen=True)
class ObstacleSpec:
    cylinders: int = 20
    cyl_radius: tuple = (0.2, 0.4)
    cyl_height: tuple = (1.0, 2.5)
    cyl_speed: tuple = (0.0, 0.3)
    rings: int = 5
    ring_major: tuple = (0.4, 0.6)
    ring_minor: tuple = (0.05, 0.1)
    random_boxes: int = 0
    box_size: tuple = (0.4, 1.2)
    box_height: tuple = (0.5, 2.5)
    boxes: tuple = ()
    keepout: float = 1.0


@dataclass(frozen=True)
class EnergyModel:
    power_ground: float = 40.0
    power_aerial: float = 160.0
    switch_cost: float = 15.0

    def __post_init__(self):
        if not self.power_aerial > self.power_ground >= 0:
            raise ConfigError("aerial power must exceed ground power")
        if self.switch_cost < 0:
            raise ConfigError("switch cost must be non-negative")


@dataclass(frozen=True)
class ScenarioConfig:
    arena: tuple = (10.0, 10.0, 3.0)
    resolution: float = 0.2
    seed: int = 0
    obstacles: ObstacleSpec = field(default_factory=ObstacleSpec)
    start: tuple = (0.8, 5.0, 0.0)
    goal: tuple = (9.2, 5.0, 0.0)
    v_max: float = 1.0
    a_max: float = 2.0
    sensor: SensorModel = field(default_factory=SensorModel)
    sensor_height: float = 0.3
    observation_ttl: Optional[float] = 1.0
    completion: str = "oracle"
    noise_p: float = 0.05
    shadow_depth: int = 3
    prediction_min_neighbors: int = 2
    weights: CostWeights = field(default_factory=CostWeights)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    replan_period: float = 0.3
    control_period: float = 0.1
    timeout: float = 40.0
    energy: EnergyModel = field(default_factory=EnergyModel)
    goal_tolerance: float = 0.3
    mode_switch_height: float = 0.1

    def __post_init__(self):
        if len(self.arena) != 3 or min(self.arena) <= 0:
            raise ConfigError("arena needs three positive extents")
        if not self.resolution > 0:
            raise ConfigError("resolution must be positive")
        if not self.control_period > 0 or self.replan_period < self.control_period:
            raise ConfigError("need replan_period >= control_period > 0")
        if not self.timeout > 0:
            raise ConfigError("timeout must be positive")
        if self.completion not in COMPLETIONS:
            raise ConfigError(f"completion must be one of {COMPLETIONS}")
        if not 0 <= self.noise_p <= 1:
            raise ConfigError("noise_p must lie in [0, 1]")
        for name in ("start", "goal"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (3,) or np.any(p < 0) or np.any(p >= np.asarray(self.arena)):
                raise ConfigError(f"{name} must lie inside the arena")
            if p[2] != 0.0:
                raise ConfigError(f"{name} must be on the ground (z = 0)")

    @property
    def dims(self):
        return tuple(int(round(a / self.resolution)) for a in self.arena)

    # -- JSON -------------------------------------------------------------
    def to_dict(self) -> dict:
        def plain(x):
            if hasattr(x, "__dataclass_fields__"):
                return {f.name: plain(getattr(x, f.name)) for f in fields(x)}
            if isinstance(x, (tuple, list)):
                return [plain(v) for v in x]
            return x
        return plain(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        try:
            return _build(cls, doc)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)


_NESTED = {"obstacles": ObstacleSpec, "sensor": SensorModel, "weights": CostWeights,
           "planner": PlannerConfig, "energy": EnergyModel, "limits": PlannerLimits}


def _build(cls, doc: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in doc.items():
        if k in _NESTED and isinstance(v, dict):
            v = _build(_NESTED[k], v)
        elif isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except InvalidParameterError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- world

def generate_world(config: ScenarioConfig) -> WorldModel:
    rng = np.random.default_rng(config.seed)
    spec = config.obstacles
    hi = np.asarray(config.arena, dtype=float)
    anchors = np.array([config.start[:2], config.goal[:2]], dtype=float)

    def place(radius):
        for _ in range(200):
            xy = rng.uniform(radius, hi[:2] - radius)
            if np.all(np.linalg.norm(anchors - xy, axis=1) > spec.keepout + radius):
                return xy
        return xy

    r = rng.uniform(*spec.cyl_radius, spec.cylinders)
    xy = np.array([place(ri) for ri in r]).reshape(-1, 2)
    height = rng.uniform(*spec.cyl_height, spec.cylinders)
    speed = rng.uniform(*spec.cyl_speed, spec.cylinders)
    heading = rng.uniform(0, 2 * math.pi, spec.cylinders)
    vel = np.column_stack([speed * np.cos(heading), speed * np.sin(heading)])

    big = rng.uniform(*spec.ring_major, spec.rings)
    small = rng.uniform(*spec.ring_minor, spec.rings)
    centers, axes = [], []
    for b, s in zip(big, small):
        c = place(b + s)
        z = rng.uniform(min(b + s + 0.4, hi[2] - b - s), hi[2] - b - s)
        yaw = rng.uniform(0, math.pi)
        centers.append([c[0], c[1], z])
        axes.append([math.cos(yaw), math.sin(yaw), 0.0])

    box_lo = [b[0] for b in spec.boxes]
    box_hi = [b[1] for b in spec.boxes]
    for _ in range(spec.random_boxes):
        size = rng.uniform(*spec.box_size, 2)
        c = place(float(np.max(size)) / 2)
        h = rng.uniform(*spec.box_height)
        box_lo.append([c[0] - size[0] / 2, c[1] - size[1] / 2, 0.0])
        box_hi.append([c[0] + size[0] / 2, c[1] + size[1] / 2, h])

    return WorldModel(np.zeros(3), hi, xy, r, height, vel, np.ones(spec.cylinders, bool),
                      np.asarray(box_lo, float).reshape(-1, 3), np.asarray(box_hi, float).reshape(-1, 3),
                      np.asarray(centers, float).reshape(-1, 3), np.asarray(axes, float).reshape(-1, 3),
                      big, small)


# ---------------------------------------------------------------- results

@dataclass
class RunResult:
    seed: int
    success: bool
    reached_goal: bool
    moving_time: float
    energy: float
    aerial_time: float
    mode_switches: int
    collisions: List[dict] = field(default_factory=list)
    planning_times_ms: List[float] = field(default_factory=list)
    map_iou: List[float] = field(default_factory=list)
    trajectory_log: List[tuple] = field(default_factory=list)
    replan_log: List[dict] = field(default_factory=list)
    replans: int = 0
    plan_failures: int = 0
    esdf_ms: List[float] = field(default_factory=list)
    pair_ms: List[float] = field(default_factory=list)
    final_trajectory: Optional[BSplineTrajectory] = None
    final_map: Optional[LocalMap] = None

    def to_dict(self) -> dict:
        """JSON-ready summary (logs excluded)."""
        return {"seed": self.seed, "success": self.success, "reached_goal": self.reached_goal,
                "moving_time": self.moving_time, "energy": self.energy,
                "aerial_time": self.aerial_time, "aerial_fraction": self.aerial_fraction,
                "mode_switches": self.mode_switches, "replans": self.replans,
                "plan_failures": self.plan_failures, "collisions": self.collisions,
                "planning_times_ms": self.planning_times_ms, "map_iou": self.map_iou}

    @property
    def aerial_fraction(self) -> float:
        return self.aerial_time / self.moving_time if self.moving_time > 0 else 0.0

    def recompute_energy(self, model: EnergyModel, dt: float) -> float:
        modes = [row[4] for row in self.trajectory_log]
        switches = sum(a != b for a, b in zip(modes, modes[1:]))
        power = sum(model.power_aerial if m == "aerial" else model.power_ground for m in modes[1:])
        return power * dt + model.switch_cost * switches


def _filter_prediction(pred: OccupancyLabelGrid, observed: OccupancyLabelGrid, k: int) -> OccupancyLabelGrid:
    """Drop predicted cells with fewer than ``k`` occupied face neighbours."""
    if k <= 0:
        return pred
    occ = (pred.labels != EMPTY)
    kernel = ndimage.generate_binary_structure(3, 1).astype(np.int16)
    kernel[1, 1, 1] = 0
    count = ndimage.convolve(occ.astype(np.int16), kernel, mode="constant")
    drop = occ & observed.unknown & (count < k)
    if not drop.any():
        return pred
    labels = pred.labels.copy()
    labels[drop] = EMPTY
    return pred.with_labels(labels)


def _completer(config: ScenarioConfig, truth_occ: OccupancyLabelGrid, sensor_origin, step: int):
    if config.completion == "identity":
        return IdentityCompletion()
    if config.completion == "shadow_extrude":
        return ShadowExtrude(config.shadow_depth, sensor_origin)
    return OracleCompletion(truth_occ, config.noise_p, seed=config.seed * 1_000_003 + step)


def _state_at(traj: Optional[BSplineTrajectory], t: float, hold):
    if traj is None:
        return hold, np.zeros(3), np.zeros(3)
    if t >= traj.t_end:
        return _pad3(traj.evaluate(traj.t_end)), np.zeros(3), np.zeros(3)
    t = max(t, traj.t0)
    return (_pad3(traj.evaluate(t)), _pad3(traj.derivative(1).evaluate(t)),
            _pad3(traj.derivative(2).evaluate(t)))


def _pad3(x):
    x = np.asarray(x, dtype=float)
    return x if x.shape[-1] == 3 else np.r_[x, 0.0]


def run_scenario(config: ScenarioConfig, seed: Optional[int] = None, world: Optional[WorldModel] = None,
                 keep_log: bool = True) -> RunResult:
    if seed is not None:
        config = replace(config, seed=int(seed))
    start = np.asarray(config.start, dtype=float)
    goal = np.asarray(config.goal, dtype=float)
    if np.linalg.norm(start - goal) <= config.goal_tolerance:
        return RunResult(config.seed, True, True, 0.0, 0.0, 0.0, 0,
                         trajectory_log=[(0.0, *start, "ground")])
    world = generate_world(config) if world is None else world
    pcfg = replace(config.planner, weights=replace(config.weights, v_max=config.v_max,
                                                   a_max=config.a_max))
    planner = Planner(pcfg)
    lmap = LocalMap(config.dims, config.resolution)
    dt = config.control_period
    radius = pcfg.robot_radius
    res = RunResult(config.seed, False, False, 0.0, 0.0, 0.0, 0)

    pos, vel, acc = start.copy(), np.zeros(3), np.zeros(3)
    traj: Optional[BSplineTrajectory] = None
    hold = pos.copy()
    yaw = math.atan2(goal[1] - start[1], goal[0] - start[0])
    mode = "ground"
    in_collision = False
    steps_per_replan = max(1, int(round(config.replan_period / dt)))
    n_steps = int(math.ceil(config.timeout / dt))
    res.trajectory_log.append((0.0, *pos, mode))
    for step in range(n_steps + 1):
        t = step * dt
        if np.linalg.norm(pos - goal) <= config.goal_tolerance:
            res.reached_goal = True
            break
        if step == n_steps:
            break
        if step % steps_per_replan == 0:
            traj, hold = _replan(config, planner, world, lmap, pos, vel, acc, yaw, t, step, traj,
                                 hold, res)
        t_next = t + dt
        pos, vel, acc = _state_at(traj, t_next, hold)
        if traj is None:
            hold = pos
        world = world.advance(dt)
        if np.hypot(vel[0], vel[1]) > 0.05:
            yaw = math.atan2(vel[1], vel[0])
        new_mode = "aerial" if pos[2] > config.mode_switch_height else "ground"
        if new_mode != mode:
            res.mode_switches += 1
            res.energy += config.energy.switch_cost
        mode = new_mode
        res.energy += (config.energy.power_aerial if mode == "aerial" else config.energy.power_ground) * dt
        if mode == "aerial":
            res.aerial_time += dt
        clearance = world.clearance(pos)
        if clearance < radius:
            if not in_collision:
                res.collisions.append({"t": round(t_next, 10), "position": pos.tolist(),
                                       "clearance": clearance})
            in_collision = True
        else:
            in_collision = False
        res.trajectory_log.append((round(t_next, 10), *pos, mode))
    res.moving_time = res.trajectory_log[-1][0]
    res.success = res.reached_goal and not res.collisions
    res.final_trajectory = traj
    if keep_log:
        res.final_map = lmap
    else:
        res.trajectory_log = []
        res.replan_log = []
    return res


def _replan(config, planner, world, lmap, pos, vel, acc, yaw, t, step, traj, hold, res):
    sensor_pos = pos + np.array([0.0, 0.0, config.sensor_height])
    pose = Pose(sensor_pos, yaw)
    if config.observation_ttl is not None:
        lmap.expire(t, config.observation_ttl)
    lmap.integrate_scan(pose, render_scan(world, pose, config.sensor), config.sensor, stamp=t)
    truth = world.label_grid(config.dims, config.resolution)
    truth_occ = OccupancyLabelGrid((truth.labels != EMPTY).astype(np.uint8), 1, None,
                                   config.resolution, truth.origin)
    observed = lmap.observed_labels()
    predicted = complete(observed, _completer(config, truth_occ, sensor_pos, step))
    predicted = _filter_prediction(predicted, observed, config.prediction_min_neighbors)
    lmap.merge_prediction(predicted)
    res.map_iou.append(occupancy_iou(lmap.blocked_labels(), truth_occ))
    view = lmap.snapshot()

    on_ground = pos[2] <= GROUND_SNAP
    state = RobotState(np.r_[pos[:2], 0.0] if on_ground else pos,
                       np.r_[vel[:2], 0.0] if on_ground else vel,
                       "ground" if on_ground else "aerial")
    t0 = time.perf_counter()
    outcome = planner.plan(state, config.goal, view, accel=np.r_[acc[:2], 0.0] if on_ground else acc,
                           seed=config.seed)
    elapsed = (time.perf_counter() - t0) * 1e3
    res.planning_times_ms.append(elapsed)
    res.replans += 1
    if outcome.esdf_ms is not None:
        res.esdf_ms.append(outcome.esdf_ms)
        res.pair_ms.append(outcome.pair_ms)
    entry = {"t": round(t, 10), "ok": outcome.trajectory is not None, "reason": outcome.reason,
             "pairs": outcome.pairs, "candidates": outcome.candidates, "map_version": view.version,
             "iou": res.map_iou[-1]}
    if outcome.report is not None:
        entry["cost"] = outcome.report.cost
        entry["terms"] = outcome.report.terms
        entry["iterations"] = outcome.report.iterations
    res.replan_log.append(entry)
    if outcome.trajectory is not None:
        return outcome.trajectory.shifted(t), hold
    res.plan_failures += 1
    # keep following the previous plan while the footprint stays clear
    if traj is not None and t < traj.t_end:
        rest = traj.evaluate(np.linspace(t, traj.t_end, 40))
        if not view.inflate(planner.footprint_radius(view.resolution)).points_blocked(rest).any():
            return traj, hold
    return None, pos.copy()


# ---------------------------------------------------------------- batches

RESULT_COLUMNS = ("seed", "success", "reached_goal", "collisions", "moving_time", "energy",
                  "aerial_fraction", "mode_switches", "replans", "plan_failures", "mean_iou")


def _row(r: RunResult) -> dict:
    return {"seed": r.seed, "success": int(r.success), "reached_goal": int(r.reached_goal),
            "collisions": len(r.collisions), "moving_time": f"{r.moving_time:.6f}",
            "energy": f"{r.energy:.6f}", "aerial_fraction": f"{r.aerial_fraction:.6f}",
            "mode_switches": r.mode_switches, "replans": r.replans, "plan_failures": r.plan_failures,
            "mean_iou": f"{(float(np.mean(r.map_iou)) if r.map_iou else 1.0):.6f}"}


@dataclass
class BatchReport:
    results: List[RunResult]

    @property
    def success_rate(self) -> float:
        return float(np.mean([r.success for r in self.results])) if self.results else 0.0

    @property
    def planning_times_ms(self) -> np.ndarray:
        return np.array([x for r in self.results for x in r.planning_times_ms])

    def summary(self) -> dict:
        pt = self.planning_times_ms
        return {
            "trials": len(self.results),
            "success_rate": self.success_rate,
            "mean_moving_time": float(np.mean([r.moving_time for r in self.results])),
            "mean_energy": float(np.mean([r.energy for r in self.results])),
            "mean_aerial_fraction": float(np.mean([r.aerial_fraction for r in self.results])),
            "collisions": int(sum(len(r.collisions) for r in self.results)),
            "mean_planning_ms": float(pt.mean()) if pt.size else 0.0,
            "median_planning_ms": float(np.median(pt)) if pt.size else 0.0,
            "p95_planning_ms": float(np.percentile(pt, 95)) if pt.size else 0.0,
        }

    def results_csv(self) -> str:
        """Per-trial rows; deterministic given config and seeds (no wall-clock fields)."""
        buf = io.StringIO()
        buf.write(f"# airground batch results, schema v{CSV_SCHEMA_VERSION}\n")
        w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.results:
            w.writerow(_row(r))
        s = self.summary()
        buf.write(f"# success_rate={s['success_rate']:.6f} mean_moving_time={s['mean_moving_time']:.6f} "
                  f"mean_energy={s['mean_energy']:.6f} mean_aerial_fraction={s['mean_aerial_fraction']:.6f}\n")
        return buf.getvalue()

    def timings_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# airground planner timings (wall clock), schema v{CSV_SCHEMA_VERSION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "replan", "planning_ms"])
        for r in self.results:
            for k, ms in enumerate(r.planning_times_ms):
                w.writerow([r.seed, k, f"{ms:.3f}"])
        return buf.getvalue()


def run_batch(template: ScenarioConfig, trials: int, seed_base: int = 0, keep_log: bool = False,
              workers: int = 1) -> BatchReport:
    if trials < 1:
        raise ConfigError("trials must be positive")
    seeds = range(seed_base, seed_base + trials)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, [(template, s, keep_log) for s in seeds]))
    else:
        results = [run_scenario(template, s, keep_log=keep_log) for s in seeds]
    return BatchReport(results)


def _run_one(args):
    template, seed, keep_log = args
    return run_scenario(template, seed, keep_log=keep_log)


def parse_axes(spec) -> Dict[str, list]:
    """``"completion=identity,oracle;energy_weight=0,1"`` or a dict."""
    if isinstance(spec, dict):
        return {k: list(v) for k, v in spec.items()}
    axes = {}
    for part in filter(None, (p.strip() for p in str(spec).split(";"))):
        if "=" not in part:
            raise ConfigError(f"bad axis spec {part!r}")
        key, values = part.split("=", 1)
        axes[key.strip()] = [_parse_value(v.strip()) for v in values.split(",") if v.strip()]
    if not axes:
        raise ConfigError("no ablation axes given")
    return axes


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


_AXIS_TARGETS = {"completion": (), "noise_p": (), "shadow_depth": (),
                 "energy_weight": ("weights",), "use_topo": ("planner",), "topo_k_max": ("planner",)}


def apply_axis(config: ScenarioConfig, key: str, value) -> ScenarioConfig:
    if key not in _AXIS_TARGETS:
        raise ConfigError(f"unknown ablation axis {key!r}; choose from {sorted(_AXIS_TARGETS)}")
    path = _AXIS_TARGETS[key]
    try:
        if not path:
            return replace(config, **{key: value})
        inner = getattr(config, path[0])
        return replace(config, **{path[0]: replace(inner, **{key: value})})
    except (InvalidParameterError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def ablate(config: ScenarioConfig, axes, trials: int = 10, seed_base: int = 0,
           workers: int = 1) -> List[tuple]:
    """Cross product of the axes; returns ``[(cell settings, BatchReport), ...]``."""
    axes = parse_axes(axes)
    keys = list(axes)
    out = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        cfg = config
        for k, v in zip(keys, combo):
            cfg = apply_axis(cfg, k, v)
        out.append((dict(zip(keys, combo)), run_batch(cfg, trials, seed_base, workers=workers)))
    return out


def ablation_csv(cells: Sequence[tuple]) -> str:
    buf = io.StringIO()
    buf.write(f"# airground ablation, schema v{CSV_SCHEMA_VERSION}\n")
    keys = list(cells[0][0]) if cells else []
    cols = keys + ["trials", "success_rate", "mean_moving_time", "mean_energy", "mean_aerial_fraction",
                   "collisions"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for settings, report in cells:
        s = report.summary()
        w.writerow([settings[k] for k in keys] + [s["trials"], f"{s['success_rate']:.6f}",
                   f"{s['mean_moving_time']:.6f}", f"{s['mean_energy']:.6f}",
                   f"{s['mean_aerial_fraction']:.6f}", s["collisions"]])
    return buf.getvalue()
