import math

import numpy as np
import pytest

from airground.errors import BudgetExceeded, InvalidParameterError, NoPathFound
from airground.kinastar import (GROUND, PlannerLimits, RobotState, expand,
                                find_collision_segments, heuristic,
                                initial_trajectory, plan_guidance,
                                primitive_cost, sample_polyline)

from oracles import brute_force_guidance_cost, view_from_blocked

RES = 0.2


def open_view(dims=(30, 30, 15)):
    return view_from_blocked(np.zeros(dims, bool), RES)


def test_ground_state_invariant_enforced():
    with pytest.raises(InvalidParameterError):
        RobotState([0, 0, 0.5], mode=GROUND)
    with pytest.raises(InvalidParameterError):
        RobotState([0, 0, 0], [0, 0, 1.0], mode=GROUND)
    assert RobotState.at([1, 1, 0]).mode == "ground"
    assert RobotState.at([1, 1, 1]).mode == "aerial"


def test_zero_acceleration_from_rest_stays_put():
    s = RobotState.at([1.0, 1.0, 0.0])
    succ = expand(s, PlannerLimits(), open_view())
    still = [n for p, n in succ if not np.any(p.acceleration)]
    assert len(still) == 1
    np.testing.assert_allclose(still[0].position, s.position)
    assert still[0].mode == "ground"


def test_ground_successors_stay_on_ground_without_aerial():
    s = RobotState.at([2.0, 2.0, 0.0], [0.3, -0.2, 0.0])
    succ = expand(s, PlannerLimits(allow_aerial=False), open_view())
    assert len(succ) > 0
    assert all(n.position[2] == 0.0 and n.mode == "ground" for _, n in succ)
    assert all(np.all(p.samples[:, 2] == 0.0) for p, _ in succ)


def test_successor_counts():
    view = open_view()
    lim = PlannerLimits(v_max=10.0)
    assert len(expand(RobotState.at([2, 2, 0]), lim, view)) == 18
    assert len(expand(RobotState.at([2, 2, 1]), lim, view)) == 27


def test_speed_limit_respected():
    lim = PlannerLimits(v_max=1.0, a_max=2.0)
    s = RobotState.at([2, 2, 1], [0.6, 0.0, 0.0])
    for _, n in expand(s, lim, open_view()):
        assert np.linalg.norm(n.velocity) <= lim.v_max + 1e-9


def test_energy_surcharge_difference():
    lim = PlannerLimits(energy_weight=1.7)
    succ = expand(RobotState.at([2, 2, 0]), lim, open_view())
    air = {p.cost for p, _ in succ if p.leaves_ground}
    ground = {p.cost for p, _ in succ if not p.leaves_ground}
    assert len(air) == len(ground) == 1
    assert air.pop() - ground.pop() == pytest.approx(1.7 * lim.duration)
    assert primitive_cost(0.4, True, 2.0) - primitive_cost(0.4, False, 2.0) == pytest.approx(0.8)


def test_blocked_primitives_discarded():
    blocked = np.zeros((30, 30, 15), bool)
    blocked[12:, :, :] = True  # everything at x >= 2.4 m
    view = view_from_blocked(blocked, RES)
    s = RobotState.at([2.3, 3.0, 0.0], [0.5, 0, 0])
    for p, _ in expand(s, PlannerLimits(), view):
        assert not view.points_blocked(p.samples).any()


def test_landing_clamps_to_ground():
    s = RobotState.at([2, 2, 0.05], [0, 0, -0.5])
    succ = expand(s, PlannerLimits(), open_view())
    landed = [n for _, n in succ if n.mode == "ground"]
    assert landed and all(n.position[2] == 0 and n.velocity[2] == 0 for n in landed)


def test_entry_equals_exit_gives_empty_segment():
    seg = plan_guidance(RobotState.at([1, 1, 0]), [1.05, 1, 0], open_view())
    assert seg.states == () and seg.cost == 0.0


def test_blocked_entry_rejected():
    blocked = np.zeros((10, 10, 5), bool)
    blocked[2, 2, 0] = True
    with pytest.raises(InvalidParameterError):
        plan_guidance(RobotState.at([0.5, 0.5, 0]), [1, 1, 0], view_from_blocked(blocked, RES))


def test_empty_map_positive_energy_weight_stays_on_ground():
    seg = plan_guidance(RobotState.at([0.5, 0.5, 0]), [3.5, 0.5, 0], open_view(),
                        PlannerLimits(energy_weight=1.0))
    assert all(s.mode == "ground" for s in seg.states)
    assert np.all(seg.samples[:, 2] == 0.0)


def test_toy_ground_path_strictly_cheaper_by_enumeration():
    view = open_view((20, 10, 10))
    args = dict(v_max=1.0, a_max=2.0, duration=0.4, allow_aerial=True, depth=3, tolerance=RES, substeps=4)
    ground = brute_force_guidance_cost([0.5, 0.5, 0], [0, 0, 0], False, [1.3, 0.5, 0], view,
                                       energy_weight=0.0, **{**args, "allow_aerial": False})
    mixed = brute_force_guidance_cost([0.5, 0.5, 0], [0, 0, 0], False, [1.3, 0.5, 0], view,
                                      energy_weight=1.0, **args)
    assert mixed == pytest.approx(ground)


def wall_with_overhead_gap():
    # 6 x 4 x 3 m world; a 1 m high wall across the whole width at x = 2.0 .. 2.4
    blocked = np.zeros((30, 20, 15), bool)
    blocked[10:12, :, :5] = True
    return view_from_blocked(blocked, RES)


def test_wall_with_overhead_gap_requires_flight():
    view = wall_with_overhead_gap()
    seg = plan_guidance(RobotState.at([1.0, 2.0, 0]), [3.6, 2.0, 0], view,
                        PlannerLimits(energy_weight=1.0, max_nodes=50000))
    assert any(s.mode == "aerial" for s in seg.states)
    assert not view.points_blocked(seg.samples).any()
    assert seg.cost >= heuristic([1.0, 2.0, 0], [3.6, 2.0, 0], PlannerLimits(), RES)


def test_weighted_heuristic_is_bounded_suboptimal():
    view = wall_with_overhead_gap()
    start, goal = RobotState.at([1.0, 2.0, 0]), [3.6, 2.0, 0]
    exact = plan_guidance(start, goal, view, PlannerLimits(max_nodes=50000))
    fast = plan_guidance(start, goal, view, PlannerLimits(max_nodes=50000, heuristic_weight=2.0))
    assert exact.cost <= fast.cost <= 2.0 * exact.cost + 1e-9
    assert fast.nodes_expanded <= exact.nodes_expanded
    with pytest.raises(InvalidParameterError):
        PlannerLimits(heuristic_weight=0.5)


def test_sealed_map_exhausts():
    blocked = np.zeros((20, 10, 5), bool)
    blocked[10, :, :] = True
    with pytest.raises(NoPathFound):
        plan_guidance(RobotState.at([0.5, 1.0, 0]), [3.5, 1.0, 0], view_from_blocked(blocked, RES),
                      PlannerLimits(max_nodes=100000))


def test_budget_exceeded_is_distinct():
    with pytest.raises(BudgetExceeded):
        plan_guidance(RobotState.at([0.5, 0.5, 0]), [5.5, 5.5, 0], open_view(), PlannerLimits(max_nodes=3))


@pytest.mark.parametrize("case", range(6))
def test_matches_enumeration_small(case):
    rng = np.random.default_rng(100 + case)
    blocked = rng.uniform(size=(12, 12, 6)) < 0.08
    blocked[:, :, 0] &= rng.uniform(size=(12, 12)) < 0.5
    start = np.array([1.1, 1.1, 0.0])
    blocked[5, 5, 0] = False
    view = view_from_blocked(blocked, RES)
    goal = start + np.r_[rng.uniform(-0.8, 0.8, 2), 0.0]
    lim = PlannerLimits(max_depth=3, position_bin=0, velocity_bin=0, energy_weight=0.5,
                        allow_aerial=False)
    expected = brute_force_guidance_cost(start, [0, 0, 0], False, goal, view, lim.v_max, lim.a_max,
                                         lim.duration, lim.energy_weight, False, 3, RES, 4)
    if not math.isfinite(expected):
        with pytest.raises(NoPathFound):
            plan_guidance(RobotState.at(start), goal, view, lim)
    else:
        assert plan_guidance(RobotState.at(start), goal, view, lim).cost == pytest.approx(expected, abs=1e-9)


def test_initial_trajectory_straight_and_deterministic():
    poly = initial_trajectory([0, 0, 0], [5, 0, 0])
    np.testing.assert_array_equal(poly, [[0, 0, 0], [5, 0, 0]])
    a = initial_trajectory([0, 0, 0], [5, 0, 0], seed=7, n_rand=3, bounds=([0] * 3, [10] * 3))
    b = initial_trajectory([0, 0, 0], [5, 0, 0], seed=7, n_rand=3, bounds=([0] * 3, [10] * 3))
    np.testing.assert_array_equal(a, b)


def test_initial_trajectory_points_in_bounds():
    for seed in range(100):
        poly = initial_trajectory([0, 0, 0], [9, 9, 9], seed=seed, n_rand=3, bounds=([0] * 3, [10] * 3))
        assert len(poly) == 5
        assert np.all((poly[1:-1] >= 0) & (poly[1:-1] <= 10))


def test_collision_segments_free_single_and_full():
    view = open_view((20, 20, 20))
    poly = np.array([[0.3, 2.0, 0.1], [3.7, 2.0, 0.1]])
    assert find_collision_segments(poly, view) == []
    blocked = np.zeros((20, 20, 20), bool)
    blocked[9:11, :, :] = True
    wall = view_from_blocked(blocked, RES)
    segs = find_collision_segments(poly, wall)
    assert len(segs) == 1
    pts = sample_polyline(poly, RES / 2)
    i, j = segs[0]
    assert not wall.points_blocked(pts[[i, j]]).any()
    assert wall.points_blocked(pts[i + 1:j]).all()
    full = view_from_blocked(np.ones((20, 20, 20), bool), RES)
    assert find_collision_segments(poly, full) == [(0, len(pts) - 1)]


def test_sample_polyline_spacing():
    pts = sample_polyline([[0, 0, 0], [1, 0, 0], [1, 1.3, 0]], 0.1)
    gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert gaps.max() <= 0.1 + 1e-12
    np.testing.assert_allclose(pts[-1], [1, 1.3, 0])
