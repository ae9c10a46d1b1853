import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airground.errors import InvalidParameterError
from airground.gridio import load_label_grid
from airground.mapping import (CLASS_BOX, CLASS_CYLINDER, CLASS_RING, FREE,
                               OCCUPIED, PREDICTED, UNKNOWN, LocalMap, Pose,
                               SensorModel, WorldModel, advance_world,
                               render_scan)
from airground.occupancy import OccupancyLabelGrid, PointCloud
from airground.raycast import grid_walk

ONE_RAY = SensorModel(hfov_deg=1.0, vfov_deg=1.0, max_range=5.0, rays_h=1, rays_v=1)


def test_grid_walk_axis_aligned():
    cells = [c for c, _, _ in grid_walk((0.1, 0.1, 0.1), (1, 0, 0), 1.0, 0.2)]
    assert cells == [(k, 0, 0) for k in range(6)]


def test_grid_walk_diagonal_touches_each_cell_once():
    cells = [c for c, _, _ in grid_walk((0.05, 0.05, 0.05), np.array([1, 1, 1]) / math.sqrt(3),
                                        1.0, 0.1)]
    assert len(cells) == len(set(cells))
    assert cells[0] == (0, 0, 0)


def test_integrate_single_ray_hand_trace():
    m = LocalMap((20, 3, 3), 0.2)
    m.integrate_scan(Pose((0.1, 0.1, 0.1)), PointCloud([[2.0, 0.0, 0.0]]), ONE_RAY)
    row = m.state[:, 0, 0]
    assert np.all(row[:10] == FREE)
    assert row[10] == OCCUPIED
    assert np.all(row[11:] == UNKNOWN)
    assert np.count_nonzero(m.state) == 11


def test_integrate_empty_hits_bumps_version_only():
    m = LocalMap((5, 5, 5), 0.2)
    before = m.state.copy()
    m.integrate_scan(Pose((0.5, 0.5, 0.5)), PointCloud(np.zeros((0, 3))), ONE_RAY)
    assert m.version == 1
    np.testing.assert_array_equal(m.state, before)


def test_integrate_hit_beyond_range_clamped():
    sensor = SensorModel(1.0, 1.0, max_range=1.0, rays_h=1, rays_v=1)
    m = LocalMap((20, 3, 3), 0.2)
    m.integrate_scan(Pose((0.1, 0.1, 0.1)), PointCloud([[3.0, 0.0, 0.0]]), sensor)
    assert not np.any(m.state == OCCUPIED)
    assert np.all(m.state[:6, 0, 0] == FREE)
    assert np.all(m.state[6:, 0, 0] == UNKNOWN)


def test_integrate_misses_clear_free_space():
    m = LocalMap((20, 3, 3), 0.2)
    m.integrate_scan(Pose((0.1, 0.1, 0.1)), PointCloud(np.zeros((0, 3)), misses=[[1, 0, 0]]),
                     SensorModel(1, 1, max_range=1.0, rays_h=1, rays_v=1))
    assert np.all(m.state[:6, 0, 0] == FREE)


def test_integrate_respects_yaw():
    m = LocalMap((3, 20, 3), 0.2)
    m.integrate_scan(Pose((0.1, 0.1, 0.1), yaw=math.pi / 2), PointCloud([[1.0, 0, 0]]), ONE_RAY)
    assert m.state[0, 5, 0] == OCCUPIED


def test_merge_prediction_observed_dominates():
    m = LocalMap((3, 3, 3), 1.0)
    m.state[...] = FREE
    m.state[1, 1, 1] = OCCUPIED
    pred = OccupancyLabelGrid(np.ones((3, 3, 3)), 1)
    before = m.state.copy()
    m.merge_prediction(pred)
    np.testing.assert_array_equal(m.state, before)


def test_merge_prediction_single_unknown_cell():
    m = LocalMap((3, 3, 3), 1.0)
    m.state[...] = FREE
    m.state[2, 0, 1] = UNKNOWN
    labels = np.zeros((3, 3, 3))
    labels[2, 0, 1] = 1
    m.merge_prediction(OccupancyLabelGrid(labels, 1))
    assert np.argwhere(m.state == PREDICTED).tolist() == [[2, 0, 1]]


def test_merge_prediction_geometry_mismatch():
    m = LocalMap((3, 3, 3), 1.0)
    with pytest.raises(InvalidParameterError):
        m.merge_prediction(OccupancyLabelGrid(np.zeros((3, 3, 2)), 1))
    with pytest.raises(InvalidParameterError):
        m.merge_prediction(OccupancyLabelGrid(np.zeros((3, 3, 3)), 1, resolution=0.5))


def test_merge_prediction_rule_table(rng):
    rules = {  # (state, predicted non-empty) -> new state
        (UNKNOWN, False): UNKNOWN, (UNKNOWN, True): PREDICTED,
        (FREE, False): FREE, (FREE, True): FREE,
        (OCCUPIED, False): OCCUPIED, (OCCUPIED, True): OCCUPIED,
        (PREDICTED, False): UNKNOWN, (PREDICTED, True): PREDICTED,
    }
    for _ in range(10):
        m = LocalMap((6, 6, 6), 1.0)
        m.state[...] = rng.integers(0, 4, size=(6, 6, 6))
        start = m.state.copy()
        labels = rng.integers(0, 3, size=(6, 6, 6))
        m.merge_prediction(OccupancyLabelGrid(labels, 2))
        for idx in np.ndindex(6, 6, 6):
            assert m.state[idx] == rules[(int(start[idx]), bool(labels[idx]))]


def test_snapshot_isolation():
    m = LocalMap((10, 3, 3), 0.2)
    view = m.snapshot()
    assert not view.is_blocked((5, 0, 0))
    m.integrate_scan(Pose((0.1, 0.1, 0.1)), PointCloud([[1.0, 0, 0]]), ONE_RAY)
    assert not view.is_blocked((5, 0, 0))
    assert view.version == 0
    later = m.snapshot()
    assert later.is_blocked((5, 0, 0)) and later.version == 1


def test_snapshot_predicted_counts_blocked_and_out_of_bounds():
    m = LocalMap((4, 4, 4), 1.0)
    labels = np.zeros((4, 4, 4)); labels[1, 2, 3] = 1
    m.merge_prediction(OccupancyLabelGrid(labels, 1))
    v = m.snapshot()
    assert v.is_blocked((1, 2, 3))
    assert v.is_blocked((-1, 0, 0)) and v.is_blocked((0, 0, 4))
    assert v.is_blocked_region((1.1, 2.1, 3.1), (1.2, 2.2, 3.2))
    assert not v.is_blocked_region((0.1, 0.1, 0.1), (0.9, 0.9, 0.9))
    np.testing.assert_array_equal(v.points_blocked([[1.5, 2.5, 3.5], [0.5, 0.5, 0.5]]),
                                  [True, False])


def test_inflate_grows_blocked_ball():
    m = LocalMap((7, 7, 7), 1.0)
    m.state[3, 3, 3] = OCCUPIED
    v = m.snapshot().inflate(1.0)
    assert v.blocked.sum() == 7
    # offsets with |d|^2 <= 2.25: centre, 6 faces, 12 edges
    assert m.snapshot().inflate(1.5).blocked.sum() == 19
    assert m.snapshot().inflate(2.0).blocked.sum() == 33


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), ops=st.lists(st.booleans(), min_size=1, max_size=8))
def test_observation_dominance_monotone(seed, ops):
    rng = np.random.default_rng(seed)
    m = LocalMap((8, 8, 4), 0.5)
    sensor = SensorModel(90, 60, max_range=3.0, rays_h=5, rays_v=3)
    for is_scan in ops:
        before = m.state.copy()
        if is_scan:
            hits = rng.uniform(-2, 2, size=(6, 3))
            m.integrate_scan(Pose(rng.uniform(0.5, 3.5, size=3)), PointCloud(hits), sensor)
        else:
            m.merge_prediction(OccupancyLabelGrid(rng.integers(0, 2, size=(8, 8, 4)), 1,
                                                  resolution=0.5))
        became_pred = (m.state == PREDICTED) & (before != PREDICTED)
        assert not np.any(became_pred & ((before == OCCUPIED) | (before == FREE)))


def test_map_dump(tmp_path):
    m = LocalMap((4, 4, 4), 0.5, origin=(1.0, 0.0, 0.0))
    m.state[0, 0, 0] = OCCUPIED
    m.state[1, 0, 0] = FREE
    m.state[2, 0, 0] = PREDICTED
    m.version = 7
    grid, meta = load_label_grid(m.dump(tmp_path / "map"))
    assert meta["version"] == 7 and meta["origin"] == [1.0, 0.0, 0.0] and meta["resolution"] == 0.5
    assert grid.labels[0, 0, 0] == 1 and grid.labels[2, 0, 0] == 2
    assert grid.unknown[3, 3, 3] and not grid.unknown[1, 0, 0]


# -- world ------------------------------------------------------------------

def _arena(**kw):
    return WorldModel(bounds_lo=(0, 0, 0), bounds_hi=(10, 10, 3), **kw)


def test_advance_zero_dt_identity():
    w = _arena(cyl_xy=[[5, 5]], cyl_radius=[0.3], cyl_height=[2], cyl_vel=[[1, 0]])
    assert advance_world(w, 0.0) is w


def test_advance_reflects_at_bound():
    w = _arena(cyl_xy=[[9.7, 5]], cyl_radius=[0.3], cyl_height=[2], cyl_vel=[[1, 0.5]])
    w2 = advance_world(w, 0.1)
    assert w2.cyl_vel[0, 0] == -1.0 and w2.cyl_vel[0, 1] == 0.5
    assert w2.cyl_xy[0, 0] == pytest.approx(9.6)


def test_advance_without_bounce_stops():
    w = _arena(cyl_xy=[[9.7, 5]], cyl_radius=[0.3], cyl_height=[2], cyl_vel=[[1, 0]],
               cyl_bounce=[False])
    w2 = advance_world(w, 0.5)
    assert w2.cyl_xy[0, 0] == pytest.approx(9.7) and w2.cyl_vel[0, 0] == 0.0


def test_advance_long_run_stays_in_bounds(rng):
    k = 20
    r = rng.uniform(0.2, 0.5, k)
    w = _arena(cyl_xy=rng.uniform(1, 9, (k, 2)), cyl_radius=r, cyl_height=np.full(k, 2.0),
               cyl_vel=rng.uniform(-2, 2, (k, 2)))
    for _ in range(1000):
        w = advance_world(w, 0.05)
        assert np.all(w.cyl_xy - w.cyl_radius[:, None] >= -1e-12)
        assert np.all(w.cyl_xy + w.cyl_radius[:, None] <= 10 + 1e-12)


def test_advance_deterministic(rng):
    w = _arena(cyl_xy=rng.uniform(1, 9, (5, 2)), cyl_radius=np.full(5, 0.3),
               cyl_height=np.full(5, 2.0), cyl_vel=rng.uniform(-1, 1, (5, 2)))
    a, b = w, w
    for _ in range(50):
        a, b = advance_world(a, 0.05), advance_world(b, 0.05)
    np.testing.assert_array_equal(a.cyl_xy, b.cyl_xy)


def test_render_empty_world():
    cloud = render_scan(_arena(), Pose((5, 5, 1)), SensorModel())
    assert len(cloud) == 0 and len(cloud.misses) == SensorModel().rays


def test_render_cylinder_dead_ahead():
    w = _arena(cyl_xy=[[5.0, 2.0]], cyl_radius=[0.4], cyl_height=[2.0])
    cloud = render_scan(w, Pose((2.0, 2.0, 1.0)), ONE_RAY)
    assert len(cloud) == 1
    np.testing.assert_allclose(cloud.points[0], [3.0 - 0.4, 0.0, 0.0], atol=1e-12)


def test_render_cylinder_behind_is_culled():
    w = _arena(cyl_xy=[[1.0, 2.0]], cyl_radius=[0.4], cyl_height=[2.0])
    cloud = render_scan(w, Pose((4.0, 2.0, 1.0)), SensorModel(60, 40, 5.0, 9, 5))
    assert len(cloud) == 0


def test_render_box_and_ring():
    w = _arena(box_lo=[[4, 0, 0]], box_hi=[[5, 10, 3]])
    cloud = render_scan(w, Pose((1.0, 5.0, 1.0)), ONE_RAY)
    np.testing.assert_allclose(cloud.points[0], [3.0, 0, 0], atol=1e-12)
    ring = _arena(ring_center=[[5, 5, 1.5]], ring_axis=[[1, 0, 0]], ring_major=[0.8],
                  ring_minor=[0.1])
    # ray through the ring's hole misses; ray at the tube hits its near surface
    assert len(render_scan(ring, Pose((1.0, 5.0, 1.5)), ONE_RAY)) == 0
    hit = render_scan(ring, Pose((1.0, 5.8, 1.5)), ONE_RAY)
    np.testing.assert_allclose(hit.points[0], [3.9, 0, 0], atol=1e-6)


def test_render_rays_land_on_surfaces(rng):
    w = _arena(cyl_xy=rng.uniform(2, 8, (6, 2)), cyl_radius=np.full(6, 0.4),
               cyl_height=np.full(6, 2.0), box_lo=[[0.5, 0.5, 0]], box_hi=[[1.5, 1.5, 1]],
               ring_center=[[5, 5, 2]], ring_axis=[[0, 1, 0]], ring_major=[0.6], ring_minor=[0.1])
    pose = Pose((5.0, 1.0, 1.0), yaw=math.pi / 2)
    cloud = render_scan(w, pose, SensorModel())
    assert len(cloud) > 0
    assert np.all(np.abs(w.clearances(pose.to_world(cloud.points))) < 1e-6)


def test_label_grid_rasterization():
    w = _arena(cyl_xy=[[2.1, 2.1]], cyl_radius=[0.3], cyl_height=[1.0],
               box_lo=[[6, 6, 0]], box_hi=[[7, 7, 1]],
               ring_center=[[5, 8, 2]], ring_axis=[[0, 1, 0]], ring_major=[0.5], ring_minor=[0.1])
    g = w.label_grid((50, 50, 15), 0.2)
    assert g.labels[10, 10, 0] == CLASS_CYLINDER and g.labels[10, 10, 4] == CLASS_CYLINDER
    assert g.labels[10, 10, 5] == 0
    assert np.count_nonzero(g.labels == CLASS_BOX) == 5 * 5 * 5
    assert np.any(g.labels == CLASS_RING)
    assert g.labels[25, 40, 10] == 0  # ring hole


def test_clearance_signs():
    w = _arena(cyl_xy=[[5, 5]], cyl_radius=[0.5], cyl_height=[2.0])
    assert w.clearance((6.0, 5.0, 1.0)) == pytest.approx(0.5)
    assert w.clearance((5.0, 5.0, 1.0)) < 0
    assert w.clearance((5.0, 5.0, 3.0)) == pytest.approx(1.0)
