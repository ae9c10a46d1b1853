"""
From a depth scan to completed occupancy
========================================

A camera scan of a small scene is voxelized, projected to a bird's-eye
grid, and completed by three strategies.  Each is scored against the true
occupancy with IoU.
"""
import numpy as np

from airground.mapping import LocalMap, Pose, SensorModel, WorldModel, render_scan
from airground.occupancy import (IdentityCompletion, OccupancyLabelGrid, OracleCompletion, ShadowExtrude,
                                 bev_project, complete, occupancy_iou, voxelize)

res, dims = 0.2, (30, 30, 12)
world = WorldModel(bounds_lo=(0, 0, 0), bounds_hi=(6, 6, 2.4),
                   cyl_xy=[[3.0, 3.2], [4.5, 1.8]], cyl_radius=[0.4, 0.3], cyl_height=[1.8, 1.2],
                   box_lo=[[2.0, 0.5, 0.0]], box_hi=[[2.4, 1.5, 1.0]])
sensor = SensorModel(rays_h=64, rays_v=32)
pose = Pose((0.6, 3.0, 0.6))
cloud = render_scan(world, pose, sensor)
print(f"{len(cloud.points)} hits, {len(cloud.misses)} misses")

grid = voxelize(cloud, res, dims)
bev = bev_project(grid)
print(f"{len(grid.voxel_index)} occupied voxels, {bev.occupied.sum()} occupied BEV columns")

lmap = LocalMap(dims, res)
lmap.integrate_scan(pose, cloud, sensor)
# the map only knows occupied vs empty, so collapse the semantic classes
gt = world.label_grid(dims, res)
gt = OccupancyLabelGrid((gt.labels > 0).astype(np.uint8), 1, None, res)
observed = lmap.observed_labels()
print(f"true occupied cells {int((gt.labels > 0).sum())}, observed unknown {int(observed.unknown.sum())}")

for name, completer in [("identity", IdentityCompletion()),
                        ("shadow extrude", ShadowExtrude(depth=3, sensor_origin=pose.position)),
                        ("oracle", OracleCompletion(gt)),
                        # flips hit every unknown cell, so small rates already cost a lot
                        ("oracle, 1% noise", OracleCompletion(gt, noise_p=0.01, seed=1))]:
    print(f"{name:18s} IoU = {occupancy_iou(complete(observed, completer), gt):.3f}")
