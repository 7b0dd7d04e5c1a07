"""Ingestion, clustering and aggregation behaviour."""

import json

import numpy as np
import pytest

from windcast.data import (ClusterAssignment, DataError, FarmCatalog, GapError,
                           InsufficientHistoryError, InvalidResolutionError,
                           ResolutionView, WindRecords, aggregate,
                           circular_mean, file_checksum, haversine_km,
                           kmeans_cluster, kmeans_objective, load_wind_csv,
                           pairwise_distances)

HEADER = "farm_id,lat,lon,time_index,speed_mps,direction_deg\n"


def _write_csv(path, rows):
    path.write_text(HEADER + "".join(rows))
    return path


def test_load_csv_small_grid(tmp_path):
    rows = [
        "0,45.0,-96.0,0,5.0,90.0\n",
        "0,45.0,-96.0,1,6.0,180.0\n",
        "1,45.1,-96.1,0,7.0,270.0\n",
        "1,45.1,-96.1,1,8.0,0.0\n",
    ]
    catalog, records = load_wind_csv(_write_csv(tmp_path / "w.csv", rows))
    assert catalog.n_farms == 2
    assert records.speed.shape == (2, 2)
    assert records.speed[1, 1] == 8.0
    assert records.direction_deg[0, 0] == 90.0


def test_load_csv_rejects_direction_360(tmp_path):
    rows = ["0,45.0,-96.0,0,5.0,360.0\n", "1,45.1,-96.0,0,5.0,10.0\n"]
    with pytest.raises(DataError, match="direction out of range"):
        load_wind_csv(_write_csv(tmp_path / "w.csv", rows))


def test_load_csv_rejects_negative_speed(tmp_path):
    rows = ["0,45.0,-96.0,0,-1.0,10.0\n"]
    with pytest.raises(DataError, match="speed out of range"):
        load_wind_csv(_write_csv(tmp_path / "w.csv", rows))


def test_load_csv_rejects_duplicate_cell(tmp_path):
    rows = ["0,45.0,-96.0,0,5.0,10.0\n", "0,45.0,-96.0,0,6.0,20.0\n"]
    with pytest.raises(DataError, match=r"duplicate cell \(0,0\)"):
        load_wind_csv(_write_csv(tmp_path / "w.csv", rows))


def test_load_csv_names_missing_cells(tmp_path):
    # farms 0..7 observed at t in {0..3} except farm 7 at t=3
    rows = [
        f"{f},{45.0 + 0.01 * f},-96.0,{t},5.0,10.0\n"
        for f in range(8)
        for t in range(4)
        if not (f == 7 and t == 3)
    ]
    with pytest.raises(GapError, match=r"\(7,3\)"):
        load_wind_csv(_write_csv(tmp_path / "w.csv", rows))


def test_load_csv_rejects_malformed_row_with_line_number(tmp_path):
    rows = ["0,45.0,-96.0,0,5.0,10.0\n", "1,forty-five,-96.0,0,5.0,10.0\n"]
    with pytest.raises(DataError, match="line 3"):
        load_wind_csv(_write_csv(tmp_path / "w.csv", rows))


def test_load_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "w.csv"
    path.write_text("a,b,c\n0,1,2\n")
    with pytest.raises(DataError, match="bad header"):
        load_wind_csv(path)


def test_windrecords_validation():
    with pytest.raises(DataError):
        WindRecords(speed=np.ones((2, 3)), direction_deg=np.ones((3, 2)))
    with pytest.raises(DataError):
        WindRecords(speed=-np.ones((2, 3)), direction_deg=np.ones((2, 3)))


def test_kmeans_single_cluster_is_mean():
    catalog = FarmCatalog(lat=np.array([44.0, 45.0, 46.0]),
                          lon=np.array([-96.0, -95.0, -97.0]))
    a = kmeans_cluster(catalog, kappa=1, seed=0)
    assert np.allclose(a.centroids[0], [45.0, -96.0])
    assert np.all(a.labels == 0)


def test_kmeans_full_kappa_identity():
    catalog = FarmCatalog(lat=np.array([44.0, 45.0, 46.0]),
                          lon=np.array([-96.0, -95.0, -97.0]))
    a = kmeans_cluster(catalog, kappa=3, seed=0)
    # every farm alone in its cluster, centroid at the farm itself
    assert sorted(a.labels.tolist()) == [0, 1, 2]
    assert np.allclose(np.sort(a.centroids[:, 0]), np.sort(catalog.lat))


def test_kmeans_matches_brute_force_two_clusters():
    # 6 points; enumerate all 2-partitions for the optimal objective
    rng = np.random.default_rng(3)
    coords = np.vstack([rng.normal([45.0, -96.0], 0.01, (3, 2)),
                        rng.normal([45.5, -95.0], 0.01, (3, 2))])
    catalog = FarmCatalog(lat=coords[:, 0], lon=coords[:, 1])
    best = np.inf
    for mask in range(1, 63):
        sel = np.array([(mask >> b) & 1 for b in range(6)], dtype=bool)
        if sel.all() or not sel.any():
            continue
        obj = 0.0
        for group in (coords[sel], coords[~sel]):
            obj += np.sum((group - group.mean(axis=0)) ** 2)
        best = min(best, obj)
    a = kmeans_cluster(catalog, kappa=2, seed=0)
    assert kmeans_objective(coords, a) <= best + 1e-12


def test_kmeans_deterministic_and_validates_kappa():
    rng = np.random.default_rng(7)
    catalog = FarmCatalog(lat=45 + rng.normal(0, 0.1, 10),
                          lon=-96 + rng.normal(0, 0.1, 10))
    a = kmeans_cluster(catalog, kappa=3, seed=11)
    b = kmeans_cluster(catalog, kappa=3, seed=11)
    assert np.array_equal(a.labels, b.labels)
    assert np.allclose(a.centroids, b.centroids)
    with pytest.raises(InvalidResolutionError):
        kmeans_cluster(catalog, kappa=11)
    with pytest.raises(InvalidResolutionError):
        kmeans_cluster(catalog, kappa=0)


def test_circular_mean_wraps_and_rotates():
    angles = np.deg2rad(np.array([350.0, 10.0]))
    assert abs(circular_mean(angles)) < 1e-12 or \
        abs(circular_mean(angles) - 2 * np.pi) < 1e-12
    # rotation equivariance on the circle
    rng = np.random.default_rng(5)
    base = rng.uniform(0, 2 * np.pi, 20)
    shift = 1.2345
    m0 = circular_mean(base)
    m1 = circular_mean(np.mod(base + shift, 2 * np.pi))
    d = abs(m1 - (m0 + shift)) % (2 * np.pi)
    assert min(d, 2 * np.pi - d) < 1e-10


def test_aggregate_identity_at_full_resolution():
    rng = np.random.default_rng(2)
    speed = rng.uniform(0, 10, (3, 8))
    direction = rng.uniform(0, 360, (3, 8))
    records = WindRecords(speed=speed, direction_deg=direction)
    assignment = ClusterAssignment(
        kappa=3, labels=np.arange(3),
        centroids=np.column_stack([45 + np.arange(3.0), -96 + np.zeros(3)]),
    )
    view = aggregate(records, assignment, eta=1)
    order = np.argsort(assignment.labels)
    assert np.allclose(view.speeds, speed[order])
    assert np.allclose(view.directions, np.deg2rad(direction[order]))


def test_aggregate_window_means_and_truncation():
    speed = np.array([[2.0, 4.0, 6.0, 8.0, 99.0]])   # T=5, eta=2 drops t=4
    direction = np.full((1, 5), 90.0)
    records = WindRecords(speed=speed, direction_deg=direction)
    assignment = ClusterAssignment(kappa=1, labels=np.array([0]),
                                   centroids=np.array([[45.0, -96.0]]))
    view = aggregate(records, assignment, eta=2)
    assert view.n_times == 2
    assert np.allclose(view.speeds, [[3.0, 7.0]])
    assert np.allclose(view.directions, np.pi / 2)


def test_aggregate_pools_cluster_members():
    speed = np.array([[2.0, 2.0], [4.0, 4.0], [6.0, 6.0]])
    direction = np.zeros((3, 2))
    records = WindRecords(speed=speed, direction_deg=direction)
    assignment = ClusterAssignment(kappa=1, labels=np.zeros(3, dtype=int),
                                   centroids=np.array([[45.0, -96.0]]))
    view = aggregate(records, assignment, eta=2)
    assert np.allclose(view.speeds, [[4.0]])


def test_aggregate_rejects_bad_eta():
    records = WindRecords(speed=np.ones((1, 4)), direction_deg=np.zeros((1, 4)))
    assignment = ClusterAssignment(kappa=1, labels=np.array([0]),
                                   centroids=np.array([[45.0, -96.0]]))
    with pytest.raises(InvalidResolutionError):
        aggregate(records, assignment, eta=0)
    with pytest.raises(InvalidResolutionError):
        aggregate(records, assignment, eta=5)


def test_pairwise_distances_geometry():
    c = np.array([[45.0, -96.0], [46.0, -96.0]])
    d = pairwise_distances(c)
    assert d[0, 0] == 0.0 and d[1, 1] == 0.0
    assert abs(d[0, 1] - 111.2) < 0.1          # one degree of latitude
    rng = np.random.default_rng(9)
    c = np.column_stack([rng.uniform(40, 50, 5), rng.uniform(-100, -90, 5)])
    d = pairwise_distances(c)
    assert np.allclose(d, d.T)
    assert np.all(d >= 0)


def test_haversine_symmetry():
    assert np.isclose(haversine_km(45, -96, 46, -95),
                      haversine_km(46, -95, 45, -96))


def test_prefix_history_rules():
    view = ResolutionView(kappa=2, eta=1,
                          speeds=np.arange(16.0).reshape(2, 8),
                          directions=np.zeros((2, 8)))
    h = view.prefix(5, depth=5)
    assert h.n_times == 5
    assert np.allclose(h.speeds, view.speeds[:, :5])
    with pytest.raises(InsufficientHistoryError):
        view.prefix(3, depth=5)
    with pytest.raises(InsufficientHistoryError):
        view.prefix(9, depth=1)
    # prefix of a prefix equals the shorter prefix
    assert h.prefix(4, depth=2).to_json() == view.prefix(4, depth=2).to_json()


def test_view_and_assignment_json_round_trip():
    view = ResolutionView(kappa=2, eta=3,
                          speeds=np.array([[1.0, 2.0], [3.0, 4.0]]),
                          directions=np.array([[0.1, 0.2], [0.3, 0.4]]),
                          seed=5, source_checksum="abc")
    back = ResolutionView.from_json(view.to_json())
    assert back.to_json() == view.to_json()
    a = ClusterAssignment(kappa=2, labels=np.array([0, 1, 1]),
                          centroids=np.array([[45.0, -96.0], [45.1, -96.1]]),
                          seed=3, source_checksum="xyz")
    b = ClusterAssignment.from_json(a.to_json())
    assert b.to_json() == a.to_json()
    assert json.loads(a.to_json())["kappa"] == 2


def test_view_rejects_out_of_range_direction():
    with pytest.raises(DataError):
        ResolutionView(kappa=1, eta=1, speeds=np.ones((1, 2)),
                       directions=np.array([[0.0, 2 * np.pi]]))


def test_file_checksum_is_content_hash(tmp_path):
    p1, p2 = tmp_path / "a", tmp_path / "b"
    p1.write_text("hello")
    p2.write_text("hello")
    assert file_checksum(p1) == file_checksum(p2)
    p2.write_text("hello!")
    assert file_checksum(p1) != file_checksum(p2)
