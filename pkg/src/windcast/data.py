"""Raw wind data ingestion, spatial clustering and (kappa, eta) aggregation.

Wind speed is in m/s; directions are compass bearings (degrees clockwise
from north) of wind propagation. After aggregation directions are kept in
radians in [0, 2*pi).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0088

CSV_HEADER = ["farm_id", "lat", "lon", "time_index", "speed_mps", "direction_deg"]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class GapError(DataError):
    """Missing (farm, time) cells in the observation grid."""

    def __init__(self, gaps):
        self.gaps = list(gaps)
        preview = ", ".join(f"({f},{t})" for f, t in self.gaps[:10])
        suffix = "" if len(self.gaps) <= 10 else f" and {len(self.gaps) - 10} more"
        super().__init__(f"missing (farm, time) cells: {preview}{suffix}")


class InsufficientHistoryError(ValueError):
    """Not enough past observations for the requested operation."""


class InvalidResolutionError(ValueError):
    """Requested (kappa, eta) outside the valid range."""


@dataclass(frozen=True)
class FarmCatalog:
    """Per-farm coordinates. ``lat``/``lon`` are parallel arrays of length K."""

    lat: np.ndarray
    lon: np.ndarray

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=float)
        lon = np.asarray(self.lon, dtype=float)
        if lat.shape != lon.shape or lat.ndim != 1 or lat.size < 1:
            raise DataError("catalog needs matching 1-d lat/lon arrays, K >= 1")
        if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
            raise DataError("non-finite farm coordinate")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)

    @property
    def n_farms(self) -> int:
        return self.lat.size

    def coords(self) -> np.ndarray:
        return np.column_stack([self.lat, self.lon])


@dataclass(frozen=True)
class WindRecords:
    """Dense (K, T) speed and direction grids at the raw 15-minute resolution.

    ``direction_deg`` is the compass bearing of propagation in [0, 360).
    """

    speed: np.ndarray
    direction_deg: np.ndarray

    def __post_init__(self):
        speed = np.asarray(self.speed, dtype=float)
        direction = np.asarray(self.direction_deg, dtype=float)
        if speed.shape != direction.shape or speed.ndim != 2:
            raise DataError("speed/direction must be matching (K, T) matrices")
        if np.any(speed < 0):
            raise DataError("speed out of range: negative value")
        if np.any(direction < 0) or np.any(direction >= 360.0):
            raise DataError("direction out of range: must lie in [0, 360)")
        object.__setattr__(self, "speed", speed)
        object.__setattr__(self, "direction_deg", direction)

    @property
    def n_times(self) -> int:
        return self.speed.shape[1]


@dataclass(frozen=True)
class ClusterAssignment:
    kappa: int
    labels: np.ndarray            # farm index -> cluster index in [0, kappa)
    centroids: np.ndarray         # (kappa, 2) lat/lon means of member farms
    seed: int = 0
    source_checksum: str = ""

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        centroids = np.asarray(self.centroids, dtype=float)
        if centroids.shape != (self.kappa, 2):
            raise DataError("centroids must have shape (kappa, 2)")
        counts = np.bincount(labels, minlength=self.kappa)
        if np.any(counts == 0):
            raise DataError("empty cluster in assignment")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "centroids", centroids)

    def to_json(self) -> str:
        return json.dumps(
            {
                "kappa": self.kappa,
                "labels": self.labels.tolist(),
                "centroids": self.centroids.tolist(),
                "seed": self.seed,
                "source_checksum": self.source_checksum,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ClusterAssignment":
        d = json.loads(text)
        return cls(
            kappa=d["kappa"],
            labels=np.asarray(d["labels"]),
            centroids=np.asarray(d["centroids"]),
            seed=d.get("seed", 0),
            source_checksum=d.get("source_checksum", ""),
        )


@dataclass(frozen=True)
class ResolutionView:
    """Clustered and time-aggregated series for one (kappa, eta).

    ``speeds`` and ``directions`` are (kappa, T//eta) matrices; directions
    are circular means in radians [0, 2*pi).
    """

    kappa: int
    eta: int
    speeds: np.ndarray
    directions: np.ndarray
    seed: int = 0
    source_checksum: str = ""

    def __post_init__(self):
        speeds = np.asarray(self.speeds, dtype=float)
        directions = np.asarray(self.directions, dtype=float)
        if speeds.shape != directions.shape or speeds.shape[0] != self.kappa:
            raise DataError("view matrices must both be (kappa, n_times)")
        if np.any(speeds < 0):
            raise DataError("aggregated speed out of range")
        if np.any(directions < 0) or np.any(directions >= 2 * np.pi):
            raise DataError("aggregated direction must lie in [0, 2*pi)")
        object.__setattr__(self, "speeds", speeds)
        object.__setattr__(self, "directions", directions)

    @property
    def n_times(self) -> int:
        return self.speeds.shape[1]

    def prefix(self, t: int, depth: int) -> "ResolutionView":
        """History strictly before ``t``; requires at least ``depth`` steps."""
        if t < depth:
            raise InsufficientHistoryError(
                f"need at least depth={depth} steps before t={t}"
            )
        if t > self.n_times:
            raise InsufficientHistoryError(f"t={t} beyond view length {self.n_times}")
        return ResolutionView(
            kappa=self.kappa,
            eta=self.eta,
            speeds=self.speeds[:, :t],
            directions=self.directions[:, :t],
            seed=self.seed,
            source_checksum=self.source_checksum,
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "kappa": self.kappa,
                "eta": self.eta,
                "speeds": self.speeds.tolist(),
                "directions": self.directions.tolist(),
                "seed": self.seed,
                "source_checksum": self.source_checksum,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ResolutionView":
        d = json.loads(text)
        return cls(
            kappa=d["kappa"],
            eta=d["eta"],
            speeds=np.asarray(d["speeds"]),
            directions=np.asarray(d["directions"]),
            seed=d.get("seed", 0),
            source_checksum=d.get("source_checksum", ""),
        )


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def load_wind_csv(path) -> tuple[FarmCatalog, WindRecords]:
    """Parse the raw observation CSV into a catalog and dense record grids.

    Rejects duplicate (farm, time) cells, out-of-range values and grids with
    holes. T is inferred as max time_index + 1.
    """
    farms: dict[int, tuple[float, float]] = {}
    cells: dict[tuple[int, int], tuple[float, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"bad header, expected {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise DataError(f"line {lineno}: expected 6 fields, got {len(row)}")
            try:
                farm_id = int(row[0])
                lat, lon = float(row[1]), float(row[2])
                t = int(row[3])
                speed = float(row[4])
                direction = float(row[5])
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            if speed < 0:
                raise DataError(f"line {lineno}: speed out of range ({speed})")
            if not (0.0 <= direction < 360.0):
                raise DataError(
                    f"line {lineno}: direction out of range ({direction})"
                )
            if t < 0:
                raise DataError(f"line {lineno}: negative time_index")
            if farm_id in farms and farms[farm_id] != (lat, lon):
                raise DataError(f"line {lineno}: farm {farm_id} coordinates differ")
            farms[farm_id] = (lat, lon)
            if (farm_id, t) in cells:
                raise DataError(f"line {lineno}: duplicate cell ({farm_id},{t})")
            cells[(farm_id, t)] = (speed, direction)
    if not cells:
        raise DataError("empty file")

    farm_ids = sorted(farms)
    n_times = max(t for _, t in cells) + 1
    gaps = [(f, t) for f in farm_ids for t in range(n_times) if (f, t) not in cells]
    if gaps:
        raise GapError(gaps)

    speed = np.empty((len(farm_ids), n_times))
    direction = np.empty_like(speed)
    for k, f in enumerate(farm_ids):
        for t in range(n_times):
            speed[k, t], direction[k, t] = cells[(f, t)]
    catalog = FarmCatalog(
        lat=np.array([farms[f][0] for f in farm_ids]),
        lon=np.array([farms[f][1] for f in farm_ids]),
    )
    return catalog, WindRecords(speed=speed, direction_deg=direction)


def _farthest_point_init(coords: np.ndarray, kappa: int, rng: np.random.Generator):
    centers = [coords[rng.integers(coords.shape[0])]]
    for _ in range(1, kappa):
        d2 = np.min(
            [np.sum((coords - c) ** 2, axis=1) for c in centers], axis=0
        )
        centers.append(coords[int(np.argmax(d2))])
    return np.array(centers)


def kmeans_cluster(
    catalog: FarmCatalog,
    kappa: int,
    seed: int = 0,
    max_iter: int = 100,
    source_checksum: str = "",
) -> ClusterAssignment:
    """Lloyd's algorithm on Euclidean (lat, lon) with farthest-point seeding.

    Deterministic given ``seed``; empty clusters are reseeded with the point
    farthest from its assigned centroid.
    """
    coords = catalog.coords()
    n = coords.shape[0]
    if not 1 <= kappa <= n:
        raise InvalidResolutionError(f"kappa={kappa} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = _farthest_point_init(coords, kappa, rng)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = np.sum((coords[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        for c in range(kappa):
            if not np.any(new_labels == c):
                far = int(np.argmax(d2[np.arange(n), new_labels]))
                new_labels[far] = c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = np.array(
            [coords[labels == c].mean(axis=0) for c in range(kappa)]
        )
    return ClusterAssignment(
        kappa=kappa,
        labels=labels,
        centroids=centers,
        seed=seed,
        source_checksum=source_checksum,
    )


def kmeans_objective(coords: np.ndarray, assignment: ClusterAssignment) -> float:
    """Sum of squared distances from points to their assigned centroid."""
    diff = coords - assignment.centroids[assignment.labels]
    return float(np.sum(diff**2))


def circular_mean(angles_rad: np.ndarray, axis=None) -> np.ndarray:
    """Mean angle via atan2 of mean sine/cosine, wrapped to [0, 2*pi)."""
    s = np.mean(np.sin(angles_rad), axis=axis)
    c = np.mean(np.cos(angles_rad), axis=axis)
    return np.mod(np.arctan2(s, c), 2 * np.pi)


def aggregate(
    records: WindRecords, assignment: ClusterAssignment, eta: int
) -> ResolutionView:
    """Average speeds per cluster over eta-step windows; circular-mean the
    directions. Trailing partial windows are dropped."""
    n_times = records.n_times
    if not 1 <= eta <= n_times:
        raise InvalidResolutionError(f"eta={eta} outside [1, {n_times}]")
    n_windows = n_times // eta
    kappa = assignment.kappa
    speeds = np.empty((kappa, n_windows))
    directions = np.empty((kappa, n_windows))
    dir_rad = np.deg2rad(records.direction_deg)
    for c in range(kappa):
        members = assignment.labels == c
        sp = records.speed[members, : n_windows * eta].reshape(
            members.sum(), n_windows, eta
        )
        dr = dir_rad[members, : n_windows * eta].reshape(
            members.sum(), n_windows, eta
        )
        speeds[c] = sp.mean(axis=(0, 2))
        directions[c] = circular_mean(dr, axis=(0, 2))
    # guard against 2*pi round-off from the wrap
    directions[directions >= 2 * np.pi] = 0.0
    return ResolutionView(
        kappa=kappa,
        eta=eta,
        speeds=speeds,
        directions=directions,
        seed=assignment.seed,
        source_checksum=assignment.source_checksum,
    )


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; accepts scalars or arrays (degrees)."""
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dlat = p2 - p1
    dlon = np.deg2rad(lon2) - np.deg2rad(lon1)
    a = np.sin(dlat / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlon / 2) ** 2
    return EARTH_RADIUS_KM * 2 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def pairwise_distances(centroids: np.ndarray) -> np.ndarray:
    """Symmetric haversine distance matrix (km) between centroid rows."""
    centroids = np.asarray(centroids, dtype=float)
    if centroids.ndim != 2 or centroids.shape[0] < 1:
        raise DataError("need at least one (lat, lon) centroid")
    lat = centroids[:, 0]
    lon = centroids[:, 1]
    d = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    np.fill_diagonal(d, 0.0)
    return d
