"""Support graph, bearings, dynamic activation and travel times."""

import math

import numpy as np
import pytest

from windcast.data import ResolutionView, pairwise_distances
from windcast.graph import (DegenerateBearingError, DynamicGraph, GraphSupport,
                            TravelTimeTensor, build_support, cardinal_bearings,
                            circular_diff, estimate_travel_times, extract_ddg,
                            initial_bearing_rad)
from conftest import make_centroids, make_graph_instance, make_view


def test_build_support_pair_within_radius():
    # ~55 km apart: both ordered edges present
    c = np.array([[45.0, -96.0], [45.5, -96.0]])
    s = build_support(c, radius_km=100.0)
    assert s.edge_set() == {(0, 1), (1, 0)}
    # ~167 km apart: empty support
    c = np.array([[45.0, -96.0], [46.5, -96.0]])
    s = build_support(c, radius_km=100.0)
    assert s.n_edges == 0


def test_build_support_matches_naive_filter():
    centroids = make_centroids(10, seed=4, spread=2.0)
    d = pairwise_distances(centroids)
    s = build_support(centroids, radius_km=100.0)
    expected = {(j, i) for j in range(10) for i in range(10)
                if j != i and 0 < d[j, i] <= 100.0}
    assert s.edge_set() == expected


def test_build_support_rejects_bad_radius():
    with pytest.raises(ValueError):
        build_support(np.array([[45.0, -96.0]]), radius_km=0.0)


def test_support_rejects_self_edges():
    with pytest.raises(ValueError):
        GraphSupport(kappa=2, edges=np.array([[0, 0]]), radius_km=100.0)


def test_cardinal_bearings_compass_directions():
    c = np.array([[45.0, -96.0], [45.3, -96.0], [45.0, -95.7]])
    s = build_support(c, radius_km=100.0)
    bearings = cardinal_bearings(c, s)
    lookup = {tuple(e): b for e, b in zip(map(tuple, s.edges), bearings)}
    assert abs(lookup[(0, 1)] - 0.0) < 1e-6                 # due north
    assert abs(lookup[(1, 0)] - math.pi) < 1e-6             # due south
    assert abs(lookup[(0, 2)] - math.pi / 2) < 1e-2         # ~due east
    # opposite edges differ by ~pi
    d = abs(lookup[(2, 0)] - lookup[(0, 2)]) % (2 * math.pi)
    assert abs(min(d, 2 * math.pi - d) - math.pi) < 1e-2


def test_cardinal_bearings_rejects_coincident_centroids():
    c = np.array([[45.0, -96.0], [45.0, -96.0]])
    s = GraphSupport(kappa=2, edges=np.array([[0, 1]]), radius_km=100.0)
    with pytest.raises(DegenerateBearingError):
        cardinal_bearings(c, s)


def test_initial_bearing_range():
    rng = np.random.default_rng(1)
    for _ in range(50):
        b = initial_bearing_rad(rng.uniform(-60, 60), rng.uniform(-170, 170),
                                rng.uniform(-60, 60), rng.uniform(-170, 170))
        assert 0 <= b < 2 * math.pi


def test_circular_diff_properties():
    rng = np.random.default_rng(2)
    a = rng.uniform(-10, 10, 100)
    b = rng.uniform(-10, 10, 100)
    d = circular_diff(a, b)
    assert np.all((0 <= d) & (d <= np.pi + 1e-12))
    assert np.allclose(circular_diff(a + 2 * np.pi, b), d)
    assert np.allclose(circular_diff(b, a), d)
    assert abs(circular_diff(0.05, 2 * np.pi - 0.05) - 0.1) < 1e-12


def test_extract_ddg_exact_and_wrapped_alignment():
    c = np.array([[45.0, -96.0], [45.3, -96.0]])
    s = build_support(c, radius_km=100.0)
    bearings = cardinal_bearings(c, s)
    e01 = [tuple(e) for e in s.edges].index((0, 1))
    # upstream direction exactly on the bearing; then wrapped within 15 deg;
    # then off by 90 degrees
    b = bearings[e01]
    dirs = np.array([b, (b - 0.1) % (2 * np.pi), (b + np.pi / 2) % (2 * np.pi)])
    view = ResolutionView(kappa=2, eta=1,
                          speeds=np.full((2, 3), 5.0),
                          directions=np.vstack([dirs, dirs]))
    ddg = extract_ddg(view, bearings, s, threshold_rad=np.pi / 12)
    assert ddg.active[e01, 0]
    assert ddg.active[e01, 1]
    assert not ddg.active[e01, 2]


def test_extract_ddg_threshold_monotone():
    view, _, support, bearings, _, _ = make_graph_instance(6, 30, seed=3)
    small = extract_ddg(view, bearings, support, threshold_rad=np.pi / 24)
    large = extract_ddg(view, bearings, support, threshold_rad=np.pi / 6)
    assert np.all(large.active[small.active])
    # threshold pi activates everything
    full = extract_ddg(view, bearings, support, threshold_rad=np.pi)
    assert np.all(full.active)


def test_extract_ddg_kappa_mismatch():
    view = make_view(3, 10, seed=0)
    c = make_centroids(4, seed=1)
    s = build_support(c, radius_km=500.0)
    with pytest.raises(ValueError):
        extract_ddg(view, np.zeros(s.n_edges), s)


def test_travel_time_hand_value():
    # 90 km at a steady 10 m/s: 9000 s = 10 raw steps; one step per window
    c = np.array([[45.0, -96.0], [45.0 + 90.0 / 111.19, -96.0]])
    d = pairwise_distances(c)
    assert abs(d[0, 1] - 90.0) < 0.05
    s = build_support(c, radius_km=100.0)
    view = ResolutionView(kappa=2, eta=1,
                          speeds=np.full((2, 4), 10.0) * (d[0, 1] / 90.0),
                          directions=np.zeros((2, 4)))
    travel = estimate_travel_times(view, s, d)
    assert np.allclose(travel.steps, 10.0, atol=1e-9)
    # eta = 2 halves the step count
    view2 = ResolutionView(kappa=2, eta=2, speeds=view.speeds,
                           directions=view.directions)
    travel2 = estimate_travel_times(view2, s, d)
    assert np.allclose(travel2.steps, 5.0, atol=1e-9)


def test_travel_time_floors_calm_wind():
    c = np.array([[45.0, -96.0], [45.3, -96.0]])
    d = pairwise_distances(c)
    s = build_support(c, radius_km=100.0)
    view = ResolutionView(kappa=2, eta=1, speeds=np.zeros((2, 3)),
                          directions=np.zeros((2, 3)))
    travel = estimate_travel_times(view, s, d)
    expected = d[0, 1] * 1000.0 / 0.5 / 900.0
    assert np.allclose(travel.steps, expected)
    assert np.all(np.isfinite(travel.steps)) and np.all(travel.steps > 0)


def test_travel_time_scales_linearly_with_distance():
    near = np.array([[45.0, -96.0], [45.2, -96.0]])
    far = np.array([[45.0, -96.0], [45.4, -96.0]])
    view = make_view(2, 5, seed=6)
    t_near = estimate_travel_times(view, build_support(near),
                                   pairwise_distances(near))
    t_far = estimate_travel_times(view, build_support(far),
                                  pairwise_distances(far))
    ratio = (pairwise_distances(far)[0, 1] / pairwise_distances(near)[0, 1])
    assert np.allclose(t_far.steps, ratio * t_near.steps, rtol=1e-9)


def test_dynamic_graph_json_round_trip():
    _, _, _, _, ddg, _ = make_graph_instance(5, 12, seed=8)
    back = DynamicGraph.from_json(ddg.to_json())
    assert np.array_equal(back.active, ddg.active)
    assert np.array_equal(back.support.edges, ddg.support.edges)
    assert back.threshold_rad == ddg.threshold_rad
    assert back.to_json() == ddg.to_json()


def test_travel_tensor_csv_format():
    _, _, _, _, _, travel = make_graph_instance(4, 6, seed=9)
    text = travel.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "j,i,t,lambda_steps"
    assert len(lines) == 1 + travel.support.n_edges * travel.steps.shape[1]
    j, i, t, lam = lines[1].split(",")
    assert (int(j), int(i)) == tuple(travel.support.edges[0])
    assert float(lam) == travel.steps[0, 0]


def test_edges_at_reads_active_columns():
    _, _, support, _, ddg, _ = make_graph_instance(5, 12, seed=10)
    for t in (0, 5, 11):
        expected = {tuple(support.edges[e]) for e in range(support.n_edges)
                    if ddg.active[e, t]}
        assert ddg.edges_at(t) == expected
