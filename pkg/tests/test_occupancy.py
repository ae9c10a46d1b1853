import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airground.errors import InvalidParameterError
from airground.gridio import (decode_label_grid, encode_label_grid,
                              load_label_grid, save_label_grid)
from airground.occupancy import (IdentityCompletion, OccupancyLabelGrid,
                                 OracleCompletion, PointCloud, ShadowExtrude,
                                 VoxelFeatureGrid, bev_project, complete,
                                 occupancy_iou, semantic_miou, voxelize,
                                 voxelize_multiscale)


def brute_bins(points, res, dims, origin):
    cells = {}
    for p in points:
        idx = tuple(int(math.floor((p[k] - origin[k]) / res)) for k in range(3))
        if all(0 <= idx[k] < dims[k] for k in range(3)):
            cells[idx] = cells.get(idx, 0) + 1
    return cells


def test_single_point_at_origin():
    g = voxelize(PointCloud([[0.0, 0.0, 0.0]]), 0.5, (4, 4, 4))
    assert g.voxel_index.tolist() == [0]
    np.testing.assert_allclose(g.features[0], [-0.25, -0.25, -0.25, 1.0])


def test_two_points_same_cell_max_pool():
    g = voxelize(PointCloud([[0.1, 0.4, 0.2], [0.3, 0.05, 0.45]]), 0.5, (2, 2, 2))
    assert len(g.voxel_index) == 1
    np.testing.assert_allclose(g.features[0], [0.05, 0.15, 0.2, 2.0])


def test_points_out_of_bounds_dropped():
    g = voxelize(PointCloud([[-0.1, 0, 0], [0.2, 0.2, 0.2], [5, 5, 5]]), 1.0, (2, 2, 2))
    assert g.dropped == 2 and len(g.voxel_index) == 1


def test_empty_cloud():
    g = voxelize(PointCloud(np.zeros((0, 3))), 0.2, (3, 3, 3))
    assert len(g.voxel_index) == 0 and g.features.shape == (0, 4)


@pytest.mark.parametrize("res,dims", [(0.0, (2, 2, 2)), (0.1, (0, 2, 2))])
def test_voxelize_rejects_bad_geometry(res, dims):
    with pytest.raises(InvalidParameterError):
        voxelize(PointCloud([[0, 0, 0]]), res, dims)


def test_voxelize_matches_brute_binning(rng):
    pts = rng.uniform(-0.2, 1.8, size=(1000, 3))
    origin = (0.0, 0.0, 0.0)
    g = voxelize(PointCloud(pts), 0.1, (16, 16, 16), origin)
    expected = brute_bins(pts, 0.1, (16, 16, 16), origin)
    assert len(g.voxel_index) == len(expected)
    got = {tuple(c): int(f[3]) for c, f in zip(g.coords, g.features)}
    assert got == expected
    assert len(g.voxel_index) == len(np.unique(g.voxel_index))
    assert np.all((g.voxel_index >= 0) & (g.voxel_index < 16 ** 3))


def test_devoxelize_within_half_diagonal(rng):
    pts = rng.uniform(0, 2, size=(300, 3))
    g = voxelize(PointCloud(pts), 0.25, (8, 8, 8))
    lookup = dict(zip(g.voxel_index.tolist(), g.centers()))
    for p in pts:
        idx = np.ravel_multi_index(tuple(np.floor(p / 0.25).astype(int)), (8, 8, 8))
        assert np.linalg.norm(lookup[idx] - p) <= 0.25 / 2 * math.sqrt(3) + 1e-12


def test_multiscale_concatenates_parent_features():
    pts = np.array([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3], [0.9, 0.9, 0.9]])
    g = voxelize_multiscale(PointCloud(pts), 0.25, (4, 4, 4), levels=3)
    assert g.features.shape == (3, 12)
    # level-2 voxel (size 1.0) holds all three points
    assert np.all(g.features[:, 11] == 3.0)
    # level-1 voxel (size 0.5) of the first fine voxel holds two points
    first = np.argmin(g.voxel_index)
    assert g.features[first, 7] == 2.0


def test_bev_single_voxel():
    g = voxelize(PointCloud([[0.5, 1.5, 2.5]]), 1.0, (3, 3, 4))
    b = bev_project(g)
    nz = np.argwhere(np.any(b.features != 0, axis=2))
    assert nz.tolist() == [[0, 1]]


def test_bev_stacked_column_max():
    g = VoxelFeatureGrid((2, 2, 3), 1.0, np.zeros(3), np.array([0, 2]),
                         np.array([[1.0, -2.0, 3.0, 1.0], [0.5, 4.0, -1.0, 2.0]]))
    b = bev_project(g)
    np.testing.assert_array_equal(b.features[0, 0], [1.0, 4.0, 3.0, 2.0])
    assert b.occupied.sum() == 1


def test_bev_nonzero_matches_column_any(rng):
    occ = rng.random((8, 8, 4)) < 0.15
    idx = np.flatnonzero(occ)
    feats = np.column_stack([rng.normal(size=(len(idx), 3)), np.ones(len(idx))])
    b = bev_project(VoxelFeatureGrid((8, 8, 4), 1.0, np.zeros(3), idx, feats))
    expected = np.zeros((8, 8), dtype=bool)
    for x in range(8):
        for y in range(8):
            expected[x, y] = any(occ[x, y, z] for z in range(4))
    np.testing.assert_array_equal(np.any(b.features != 0, axis=2), expected)
    np.testing.assert_array_equal(b.occupied, expected)


def test_bev_idempotent(rng):
    pts = rng.uniform(0, 2, size=(200, 3))
    b1 = bev_project(voxelize(PointCloud(pts), 0.25, (8, 8, 8)))
    b2 = bev_project(b1.as_voxel_grid())
    np.testing.assert_array_equal(b1.features, b2.features)
    np.testing.assert_array_equal(b1.occupied, b2.occupied)


# -- completion -------------------------------------------------------------

def _observed_single_cell():
    labels = np.zeros((5, 5, 5), np.uint8)
    labels[2, 2, 2] = 1
    unknown = np.ones((5, 5, 5), bool)
    unknown[0:3, 2, 2] = False     # sensor ray cells and the hit are observed
    return OccupancyLabelGrid(labels, 2, unknown)


def test_identity_completion():
    g = _observed_single_cell()
    out = complete(g, IdentityCompletion())
    np.testing.assert_array_equal(out.labels, g.labels)


def test_shadow_extrude_hand_traced():
    g = _observed_single_cell()
    out = complete(g, ShadowExtrude(depth=2, sensor_origin=(0.5, 2.5, 2.5)))
    changed = np.argwhere(out.labels != g.labels).tolist()
    assert changed == [[3, 2, 2], [4, 2, 2]]
    assert np.all(out.labels[3:, 2, 2] == 1)


def test_shadow_extrude_stops_at_bounds():
    g = _observed_single_cell()
    out = complete(g, ShadowExtrude(depth=5, sensor_origin=(0.5, 2.5, 2.5)))
    assert np.count_nonzero(out.labels != g.labels) == 2


def test_shadow_extrude_rejects_negative_depth():
    with pytest.raises(InvalidParameterError):
        ShadowExtrude(-1, (0, 0, 0))


def test_oracle_zero_noise_copies_truth(rng):
    truth = OccupancyLabelGrid(rng.integers(0, 4, size=(6, 6, 6)), 3)
    unknown = rng.random((6, 6, 6)) < 0.5
    observed = OccupancyLabelGrid(np.where(unknown, 0, truth.labels), 3, unknown)
    out = complete(observed, OracleCompletion(truth, 0.0))
    np.testing.assert_array_equal(out.labels[unknown], truth.labels[unknown])
    np.testing.assert_array_equal(out.labels, truth.labels)


def test_oracle_noise_rate(rng):
    truth = OccupancyLabelGrid(rng.integers(0, 3, size=(20, 20, 20)), 2)
    observed = OccupancyLabelGrid(np.zeros((20, 20, 20)), 2, np.ones((20, 20, 20), bool))
    out = complete(observed, OracleCompletion(truth, 0.1, seed=4))
    wrong = np.mean((out.labels != 0) != (truth.labels != 0))
    assert 0.08 < wrong < 0.12


def test_oracle_rejects_bad_noise():
    truth = OccupancyLabelGrid(np.zeros((2, 2, 2)), 1)
    with pytest.raises(InvalidParameterError):
        OracleCompletion(truth, 1.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.floats(0, 1))
def test_completion_never_relabels_observed(seed, p):
    rng = np.random.default_rng(seed)
    truth = OccupancyLabelGrid(rng.integers(0, 3, size=(5, 5, 5)), 2)
    unknown = rng.random((5, 5, 5)) < 0.6
    observed = OccupancyLabelGrid(rng.integers(0, 3, size=(5, 5, 5)), 2, unknown)
    for strategy in (IdentityCompletion(), OracleCompletion(truth, p, seed),
                     ShadowExtrude(2, (-1.0, 2.5, 2.5))):
        out = complete(observed, strategy)
        np.testing.assert_array_equal(out.labels[~unknown], observed.labels[~unknown])


# -- metrics ----------------------------------------------------------------

def brute_confusion(pred, truth, n):
    tp = [0] * (n + 1)
    fp = [0] * (n + 1)
    fn = [0] * (n + 1)
    for a, b in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if a == b:
            tp[a] += 1
        else:
            fp[a] += 1
            fn[b] += 1
    return tp, fp, fn


def brute_iou(pred, truth):
    tp = fp = fn = 0
    for a, b in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
    return 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)


def brute_miou(pred, truth, n):
    tp, fp, fn = brute_confusion(pred, truth, n)
    ious = [tp[c] / (tp[c] + fp[c] + fn[c]) for c in range(1, n + 1) if tp[c] + fp[c] + fn[c]]
    return sum(ious) / len(ious) if ious else 1.0


def test_iou_perfect_and_empty(rng):
    lab = rng.integers(0, 3, size=(4, 4, 4))
    g = OccupancyLabelGrid(lab, 2)
    assert occupancy_iou(g, g) == 1.0
    empty = OccupancyLabelGrid(np.zeros((4, 4, 4)), 2)
    assert occupancy_iou(empty, empty) == 1.0
    truth = OccupancyLabelGrid(np.pad(np.ones((1, 1, 1)), ((0, 3), (0, 3), (0, 3))), 2)
    assert occupancy_iou(empty, truth) == 0.0


def test_iou_hand_grid_quarter():
    pred = np.zeros((2, 2, 1))
    truth = np.zeros((2, 2, 1))
    pred[0, 0] = 1; truth[0, 0] = 2     # TP
    pred[0, 1] = 1                      # FP
    truth[1, 0] = 1; truth[1, 1] = 1    # 2 FN
    assert occupancy_iou(OccupancyLabelGrid(pred, 2), OccupancyLabelGrid(truth, 2)) == 0.25


def test_iou_dim_mismatch():
    with pytest.raises(InvalidParameterError):
        occupancy_iou(OccupancyLabelGrid(np.zeros((2, 2, 2)), 1),
                      OccupancyLabelGrid(np.zeros((2, 2, 3)), 1))
    with pytest.raises(InvalidParameterError):
        semantic_miou(OccupancyLabelGrid(np.zeros((2, 2, 2)), 1),
                      OccupancyLabelGrid(np.zeros((2, 2, 3)), 1), 1)


def test_miou_perfect():
    lab = np.array([0, 1, 2, 3] * 2).reshape(2, 2, 2)
    g = OccupancyLabelGrid(lab, 3)
    assert semantic_miou(g, g, 3) == 1.0


def test_miou_half():
    truth = np.zeros((2, 2, 1)); pred = np.zeros((2, 2, 1))
    truth[0, 0] = 1; pred[0, 0] = 1     # class 1 perfect
    truth[1, 1] = 2                     # class 2 missed entirely
    m = semantic_miou(OccupancyLabelGrid(pred, 4), OccupancyLabelGrid(truth, 4), 4)
    assert m == 0.5


def test_metrics_match_brute_oracle(rng):
    for _ in range(20):
        pred = rng.integers(0, 5, size=(8, 8, 8))
        truth = rng.integers(0, 5, size=(8, 8, 8))
        p, t = OccupancyLabelGrid(pred, 4), OccupancyLabelGrid(truth, 4)
        assert occupancy_iou(p, t) == brute_iou(pred, truth)
        assert semantic_miou(p, t, 4) == pytest.approx(brute_miou(pred, truth, 4), abs=1e-15)


def test_iou_symmetric(rng):
    a = OccupancyLabelGrid(rng.integers(0, 3, size=(5, 5, 5)), 2)
    b = OccupancyLabelGrid(rng.integers(0, 3, size=(5, 5, 5)), 2)
    assert occupancy_iou(a, b) == occupancy_iou(b, a)


# -- serialization ----------------------------------------------------------

def test_label_grid_roundtrip(tmp_path, rng):
    unknown = rng.random((3, 4, 5)) < 0.3
    g = OccupancyLabelGrid(rng.integers(0, 3, size=(3, 4, 5)), 2, unknown, 0.2, (1.0, 2.0, 0.0))
    data = encode_label_grid(g)
    assert len(data) == 12 + 60
    assert data[:12] == (3).to_bytes(4, "little") + (4).to_bytes(4, "little") + (5).to_bytes(4, "little")
    # x-major byte order
    ix, iy, iz = 1, 2, 3
    expected = 255 if unknown[ix, iy, iz] else g.labels[ix, iy, iz]
    assert data[12 + (ix * 4 + iy) * 5 + iz] == expected
    back = decode_label_grid(data, 2)
    np.testing.assert_array_equal(back.unknown, unknown)
    np.testing.assert_array_equal(back.labels[~unknown], g.labels[~unknown])

    path = save_label_grid(tmp_path / "grid", g, ["empty", "cyl", "ring"])
    loaded, meta = load_label_grid(path)
    assert meta["classes"] == ["empty", "cyl", "ring"]
    np.testing.assert_array_equal(loaded.unknown, unknown)
    assert loaded.resolution == 0.2


def test_decode_rejects_truncated():
    with pytest.raises(InvalidParameterError):
        decode_label_grid(b"\x01\x00", 1)
    with pytest.raises(InvalidParameterError):
        decode_label_grid((2).to_bytes(4, "little") * 3 + b"\x00", 1)


def test_point_cloud_csv_roundtrip(tmp_path, rng):
    pc = PointCloud(rng.normal(size=(10, 3)))
    pc.to_csv(tmp_path / "cloud.csv")
    back = PointCloud.from_csv(tmp_path / "cloud.csv")
    np.testing.assert_array_equal(back.points, pc.points)


def test_point_cloud_rejects_nan():
    with pytest.raises(InvalidParameterError):
        PointCloud([[0.0, float("nan"), 1.0]])
