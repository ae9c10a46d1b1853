"""
Guidance search and trajectory optimization around a post
=========================================================

Kinodynamic A* finds a coarse ground path around a post; the planner then
turns a straight seed into a smooth B-spline that clears it, using
collision pairs instead of a distance field.  Raising the energy weight
makes flying over a low obstacle less attractive than driving around.
"""
import numpy as np

from airground.kinastar import PlannerLimits, RobotState, plan_guidance
from airground.mapping import LocalMap, Pose, SensorModel, WorldModel, render_scan
from airground.planner import Planner, PlannerConfig, trajectory_collides

res, dims = 0.1, (60, 40, 20)


def mapped(world):
    m = LocalMap(dims, res)
    sensor = SensorModel(rays_h=96, rays_v=48, max_range=6.0)
    for y in (1.0, 2.0, 3.0):
        p = Pose((0.3, y, 0.5))
        m.integrate_scan(p, render_scan(world, p, sensor), sensor)
    return m.snapshot()


post = WorldModel(bounds_lo=(0, 0, 0), bounds_hi=(6, 4, 2),
                  cyl_xy=[[3.0, 2.0]], cyl_radius=[0.35], cyl_height=[1.8])
view = mapped(post)
start, goal = np.array([0.6, 2.0, 0.0]), np.array([5.4, 2.0, 0.0])

seg = plan_guidance(RobotState.at(start), goal, view.inflate(0.3), PlannerLimits())
print(f"guidance: {len(seg.positions)} waypoints, cost {seg.cost:.2f}, "
      f"{seg.nodes_expanded} expansions, aerial fraction {seg.aerial_fraction:.2f}")

planner = Planner(PlannerConfig(horizon=5.0))
out = planner.plan(RobotState.at(start), goal, view)
traj = out.trajectory
print(f"planner: {out.reason}, {out.pairs} pairs, {out.candidates} candidates, "
      f"duration {traj.duration:.2f} s, collides: {trajectory_collides(traj, view.inflate(0.2))}")

# a low wall spanning the corridor: fly over or drive around the end
wall = WorldModel(bounds_lo=(0, 0, 0), bounds_hi=(6, 4, 2),
                  box_lo=[[2.8, 0.8, 0.0]], box_hi=[[3.2, 4.0, 0.4]])
view = mapped(wall)
for lam in (0.0, 1.0, 4.0):
    seg = plan_guidance(RobotState.at(start), goal, view.inflate(0.3),
                        PlannerLimits(energy_weight=lam, max_nodes=20000))
    print(f"energy weight {lam:3.1f}: aerial fraction {seg.aerial_fraction:.2f}, cost {seg.cost:.2f}")
