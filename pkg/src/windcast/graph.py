"""Static graph support, directed dynamic graph extraction and travel times.

A support edge (j, i) exists when clusters j and i are within a fixed radius
of each other. A dynamic edge is active at time t when the wind direction at
the upstream cluster j points (within an angular threshold) along the bearing
from j to i.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .data import ResolutionView, pairwise_distances

DEFAULT_RADIUS_KM = 100.0
DEFAULT_THRESHOLD_RAD = math.pi / 12  # 15 degrees
SECONDS_PER_RAW_STEP = 900.0          # one 15-minute unit
SPEED_FLOOR_MPS = 0.5                 # calm-wind guard for travel times
LAMBDA_MIN_STEPS = 1e-6


class DegenerateBearingError(ValueError):
    """Bearing requested between coincident centroids."""


@dataclass(frozen=True)
class GraphSupport:
    """Ordered support pairs (j, i); symmetric because distance is."""

    kappa: int
    edges: np.ndarray        # (E, 2) int array of (j, i) pairs, no self-edges
    radius_km: float

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=int).reshape(-1, 2)
        if edges.size and np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("support must not contain self-edges")
        object.__setattr__(self, "edges", edges)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(j), int(i)) for j, i in self.edges}


@dataclass(frozen=True)
class DynamicGraph:
    support: GraphSupport
    active: np.ndarray       # (E, n_times) boolean, True when edge live at t
    threshold_rad: float

    def __post_init__(self):
        active = np.asarray(self.active, dtype=bool)
        if active.shape[0] != self.support.n_edges:
            raise ValueError("active mask rows must match support edges")
        object.__setattr__(self, "active", active)

    @property
    def n_times(self) -> int:
        return self.active.shape[1]

    def edges_at(self, t: int) -> set[tuple[int, int]]:
        rows = self.support.edges[self.active[:, t]]
        return {(int(j), int(i)) for j, i in rows}

    def to_json(self) -> str:
        return json.dumps(
            {
                "kappa": self.support.kappa,
                "radius_km": self.support.radius_km,
                "threshold_rad": self.threshold_rad,
                "support": self.support.edges.tolist(),
                "active": [
                    np.flatnonzero(self.active[:, t]).tolist()
                    for t in range(self.n_times)
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DynamicGraph":
        d = json.loads(text)
        support = GraphSupport(
            kappa=d["kappa"],
            edges=np.asarray(d["support"], dtype=int).reshape(-1, 2),
            radius_km=d["radius_km"],
        )
        n_times = len(d["active"])
        active = np.zeros((support.n_edges, n_times), dtype=bool)
        for t, idx in enumerate(d["active"]):
            active[idx, t] = True
        return cls(support=support, active=active, threshold_rad=d["threshold_rad"])


@dataclass(frozen=True)
class TravelTimeTensor:
    """Wind travel time per support edge and time, in eta-step units."""

    support: GraphSupport
    steps: np.ndarray        # (E, n_times) positive floats

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=float)
        if steps.shape[0] != self.support.n_edges:
            raise ValueError("travel-time rows must match support edges")
        if np.any(steps <= 0) or not np.all(np.isfinite(steps)):
            raise ValueError("travel times must be finite and positive")
        object.__setattr__(self, "steps", steps)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("j,i,t,lambda_steps\n")
        for e, (j, i) in enumerate(self.support.edges):
            for t in range(self.steps.shape[1]):
                buf.write(f"{j},{i},{t},{float(self.steps[e, t])!r}\n")
        return buf.getvalue()


def circular_diff(a, b):
    """Absolute angular difference on the circle, in [0, pi]."""
    d = np.abs(np.asarray(a) - np.asarray(b)) % (2 * np.pi)
    return np.minimum(d, 2 * np.pi - d)


def build_support(centroids, radius_km: float = DEFAULT_RADIUS_KM) -> GraphSupport:
    """All ordered pairs (j, i) with 0 < distance(j, i) <= radius_km."""
    if radius_km <= 0:
        raise ValueError("radius_km must be positive")
    distances = pairwise_distances(np.asarray(centroids, dtype=float))
    kappa = distances.shape[0]
    mask = (distances > 0) & (distances <= radius_km)
    np.fill_diagonal(mask, False)
    j_idx, i_idx = np.nonzero(mask)
    return GraphSupport(
        kappa=kappa,
        edges=np.column_stack([j_idx, i_idx]),
        radius_km=float(radius_km),
    )


def initial_bearing_rad(lat1, lon1, lat2, lon2):
    """Initial great-circle bearing from point 1 to point 2, in [0, 2*pi)."""
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dlon = np.deg2rad(lon2) - np.deg2rad(lon1)
    x = np.sin(dlon) * np.cos(p2)
    y = np.cos(p1) * np.sin(p2) - np.sin(p1) * np.cos(p2) * np.cos(dlon)
    return np.mod(np.arctan2(x, y), 2 * np.pi)


def cardinal_bearings(centroids: np.ndarray, support: GraphSupport) -> np.ndarray:
    """Per-support-edge bearing from upstream j to downstream i (radians)."""
    if support.n_edges == 0:
        raise ValueError("support is empty")
    centroids = np.asarray(centroids, dtype=float)
    j = support.edges[:, 0]
    i = support.edges[:, 1]
    coincident = np.all(np.isclose(centroids[j], centroids[i]), axis=1)
    if np.any(coincident):
        bad = support.edges[coincident][0]
        raise DegenerateBearingError(
            f"coincident centroids for edge ({bad[0]},{bad[1]})"
        )
    return initial_bearing_rad(
        centroids[j, 0], centroids[j, 1], centroids[i, 0], centroids[i, 1]
    )


def extract_ddg(
    view: ResolutionView,
    bearings: np.ndarray,
    support: GraphSupport,
    threshold_rad: float = DEFAULT_THRESHOLD_RAD,
) -> DynamicGraph:
    """Activate edge (j, i) at t when the upstream wind direction is within
    ``threshold_rad`` (circularly) of the j->i bearing."""
    if view.kappa != support.kappa:
        raise ValueError("view and support disagree on kappa")
    j = support.edges[:, 0]
    # (E, n_times): compare each edge's bearing with its upstream direction
    diff = circular_diff(bearings[:, None], view.directions[j, :])
    return DynamicGraph(
        support=support,
        active=diff <= threshold_rad,
        threshold_rad=float(threshold_rad),
    )


def estimate_travel_times(
    view: ResolutionView,
    support: GraphSupport,
    distances: np.ndarray,
    speed_floor: float = SPEED_FLOOR_MPS,
    lambda_min: float = LAMBDA_MIN_STEPS,
) -> TravelTimeTensor:
    """lambda[j,i,t] = distance(j,i) / speed(j,t), in eta-step units.

    Upstream speed is floored to keep travel times finite in calm wind.
    """
    if view.kappa != support.kappa:
        raise ValueError("view and support disagree on kappa")
    j = support.edges[:, 0]
    i = support.edges[:, 1]
    dist_m = np.asarray(distances)[j, i][:, None] * 1000.0
    speed = np.maximum(view.speeds[j, :], speed_floor)
    seconds = dist_m / speed
    steps = seconds / (view.eta * SECONDS_PER_RAW_STEP)
    return TravelTimeTensor(support=support, steps=np.maximum(steps, lambda_min))
