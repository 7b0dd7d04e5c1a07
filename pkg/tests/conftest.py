"""Shared builders for randomized test instances.

Everything is seeded so failures reproduce exactly. Builders only assemble
inputs; they never call the code paths under test to produce expected values.
"""

from __future__ import annotations

import numpy as np
import pytest

from windcast.data import FarmCatalog, ResolutionView, pairwise_distances
from windcast.graph import (build_support, cardinal_bearings, extract_ddg,
                            estimate_travel_times)
from windcast.kriging import KernelParams, MultiResDataset, SvgpState, gram
from windcast.stdr import EdgeSystem


def make_view(kappa, n_times, eta=1, seed=0, speed_scale=8.0):
    """Random resolution view with valid ranges."""
    rng = np.random.default_rng(seed)
    return ResolutionView(
        kappa=kappa,
        eta=eta,
        speeds=rng.uniform(0.5, speed_scale, (kappa, n_times)),
        directions=rng.uniform(0.0, 2 * np.pi, (kappa, n_times)),
    )


def make_centroids(kappa, seed=0, spread=0.5):
    """Centroids clustered tightly enough that most pairs fall in support."""
    rng = np.random.default_rng(seed)
    return np.column_stack([
        rng.uniform(45.0 - spread / 2, 45.0 + spread / 2, kappa),
        rng.uniform(-96.0 - spread / 2, -96.0 + spread / 2, kappa),
    ])


def make_graph_instance(kappa, n_times, eta=1, seed=0, threshold=np.pi / 12,
                        radius_km=100.0, spread=0.5):
    """View + support + bearings + dynamic graph + travel times, all seeded."""
    view = make_view(kappa, n_times, eta=eta, seed=seed)
    centroids = make_centroids(kappa, seed=seed + 1000, spread=spread)
    support = build_support(centroids, radius_km=radius_km)
    bearings = cardinal_bearings(centroids, support)
    ddg = extract_ddg(view, bearings, support, threshold_rad=threshold)
    distances = pairwise_distances(centroids)
    travel = estimate_travel_times(view, support, distances)
    return view, centroids, support, bearings, ddg, travel


def make_system(kappa, n_times, eta=1, seed=0, threshold=np.pi / 12,
                spread=0.5):
    view, centroids, support, bearings, ddg, travel = make_graph_instance(
        kappa, n_times, eta=eta, seed=seed, threshold=threshold, spread=spread
    )
    return view, EdgeSystem(ddg, travel), ddg, travel


def make_dataset(n, seed=0, resid_scale=1.0):
    """Random multi-resolution dataset with nearby spatio-temporal coords."""
    rng = np.random.default_rng(seed)
    i = rng.integers(0, 5, n)
    # distinct time indices keep the gram matrix comfortably non-singular
    t = rng.choice(20 * n, size=n, replace=False)
    kappa = rng.integers(2, 6, n)
    eta = rng.integers(1, 4, n)
    lat = 45.0 + 0.01 * i + rng.normal(0, 0.002, n)
    lon = -96.0 + 0.01 * i + rng.normal(0, 0.002, n)
    X = np.column_stack([lat, lon, (t * eta).astype(float),
                         kappa.astype(float), eta.astype(float)])
    f = rng.uniform(4.0, 9.0, n)
    y = f + resid_scale * rng.normal(0, 1.0, n)
    ids = np.column_stack([i, t, kappa, eta])
    return MultiResDataset(X=X, ids=ids, y=y, f=f)


def small_kernel_params(seed=0, k_max=10.0, t_max=64.0):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.3, 2.0, 6)
    return KernelParams(*s, k_max=k_max, t_max=t_max)


def random_state(M, params, seed=0, noise_var=0.25, jitter=1e-8):
    """Random inducing state with a well-conditioned covariance factor."""
    rng = np.random.default_rng(seed)
    Z = np.column_stack([
        45.0 + rng.normal(0, 0.01, M),
        -96.0 + rng.normal(0, 0.01, M),
        rng.uniform(0, 30, M),
        rng.uniform(2, 5, M),
        rng.uniform(1, 3, M),
    ])
    A = rng.normal(0, 0.3, (M, M))
    S = A @ A.T + np.eye(M)
    L = np.linalg.cholesky(S)
    m = rng.normal(0, 1.0, M)
    return SvgpState(Z=Z, m=m, L=L, noise_var=noise_var, jitter=jitter)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
