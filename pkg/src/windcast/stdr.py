"""Spatio-temporal delayed regressive wind-speed predictor.

The forecast for cluster i at time t is a non-negative background level plus
exponentially decaying, travel-time-gated contributions from upstream
clusters that were blowing toward i in the recent past. Parameters are
constrained to the non-negative orthant and fitted by projected SGD on an
overestimation-penalized squared error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from sklearn.base import BaseEstimator

from .data import InsufficientHistoryError, ResolutionView
from .graph import DynamicGraph, TravelTimeTensor, LAMBDA_MIN_STEPS


class DivergedError(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"loss became non-finite at epoch {epoch}")


@dataclass
class StdrConfig:
    memory_depth: int = 6
    delta: float = 0.8
    learning_rate: float = 1e-2
    epochs: int = 200
    batch: int = 32
    seed: int = 0
    refit_epochs: int = 10   # warm-started epochs per rolling-forecast step

    def __post_init__(self):
        if self.memory_depth < 1:
            raise ValueError("memory_depth must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass
class StdrParams:
    """mu per cluster, alpha per support edge (self-weight fixed at 1),
    beta decay per upstream cluster. All non-negative."""

    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        if np.any(self.mu < 0) or np.any(self.alpha < 0) or np.any(self.beta < 0):
            raise ValueError("parameters must be non-negative")

    def copy(self) -> "StdrParams":
        return StdrParams(self.mu.copy(), self.alpha.copy(), self.beta.copy())

    def to_json(self, kappa=None, eta=None, support_edges=None, config=None,
                final_loss=None) -> str:
        alpha_records = []
        if support_edges is not None:
            alpha_records = [
                {"j": int(j), "i": int(i), "value": float(a)}
                for (j, i), a in zip(support_edges, self.alpha)
            ]
        return json.dumps(
            {
                "kappa": kappa,
                "eta": eta,
                "mu": self.mu.tolist(),
                "alpha": alpha_records,
                "beta": self.beta.tolist(),
                "config": asdict(config) if config is not None else None,
                "final_loss": final_loss,
            },
            sort_keys=True,
        )


def trigger(t: int, tau: int, alpha: float, beta: float, lam: float, y_jtau: float) -> float:
    """Single upstream contribution: alpha * beta * exp(-beta*(t-tau-lam)) *
    y * 1{t - tau >= lam}."""
    if tau >= t:
        raise ValueError("tau must precede t")
    gap = t - tau
    if gap < lam:
        return 0.0
    return alpha * beta * math.exp(-beta * (gap - lam)) * y_jtau


class EdgeSystem:
    """Flattened edge bookkeeping: support edges followed by one always-active
    self-edge per cluster (weight pinned to 1, negligible travel time)."""

    def __init__(self, ddg: DynamicGraph, travel: TravelTimeTensor):
        support = ddg.support
        if travel.support is not support and not np.array_equal(
            travel.support.edges, support.edges
        ):
            raise ValueError("dynamic graph and travel times disagree on support")
        kappa = support.kappa
        n_times = ddg.n_times
        self.kappa = kappa
        self.n_support = support.n_edges
        self.support_edges = support.edges
        self.j = np.concatenate([support.edges[:, 0], np.arange(kappa)])
        self.i = np.concatenate([support.edges[:, 1], np.arange(kappa)])
        self.active = np.vstack(
            [ddg.active, np.ones((kappa, n_times), dtype=bool)]
        )
        self.lam = np.vstack(
            [travel.steps, np.full((kappa, n_times), LAMBDA_MIN_STEPS)]
        )

    def alpha_full(self, alpha: np.ndarray) -> np.ndarray:
        return np.concatenate([alpha, np.ones(self.kappa)])

    @property
    def n_params(self) -> int:
        return 2 * self.kappa + self.n_support


def _forward(params: StdrParams, y: np.ndarray, sys_: EdgeSystem, ts: np.ndarray,
             d: int, with_parts: bool = False):
    """Predictions for every cluster at each time in ``ts``.

    Returns f of shape (kappa, B); with ``with_parts`` also the per-edge
    trigger sum G (P, B) and its beta-derivative part (P, B).
    """
    ts = np.asarray(ts, dtype=int)
    if np.any(ts < d) or np.any(ts > y.shape[1]):
        raise InsufficientHistoryError("every target time needs d steps of history")
    lags = np.arange(1, d + 1)
    taus = ts[None, :] - lags[:, None]                      # (d, B)
    jj = sys_.j[:, None, None]
    ysub = y[jj, taus[None, :, :]]                          # (P, d, B)
    lamsub = sys_.lam[:, taus]                              # (P, d, B)
    act = sys_.active[:, taus]                              # (P, d, B)
    delta = lags[None, :, None] - lamsub
    mask = act & (delta >= 0)
    beta_j = params.beta[sys_.j][:, None, None]
    decay = np.exp(-beta_j * np.where(mask, delta, 0.0)) * ysub * mask
    g_edge = params.beta[sys_.j][:, None] * decay.sum(axis=1)       # (P, B)
    alpha_full = sys_.alpha_full(params.alpha)
    f = np.zeros((sys_.kappa, ts.size))
    np.add.at(f, sys_.i, alpha_full[:, None] * g_edge)
    f += params.mu[:, None]
    if not with_parts:
        return f
    dg_dbeta = ((1.0 - beta_j * delta) * np.exp(-beta_j * np.where(mask, delta, 0.0))
                * ysub * mask).sum(axis=1)                  # (P, B)
    return f, g_edge, dg_dbeta


def predict(params: StdrParams, view: ResolutionView, sys_: EdgeSystem,
            i: int, t: int, memory_depth: int) -> float:
    """One prediction f(i, t); reads history strictly before t only."""
    f = _forward(params, view.speeds, sys_, np.array([t]), memory_depth)
    return float(f[i, 0])


def predict_all(params: StdrParams, view: ResolutionView, sys_: EdgeSystem,
                ts, memory_depth: int) -> np.ndarray:
    """Predictions for all clusters at each t in ``ts``; shape (kappa, B)."""
    return _forward(params, view.speeds, sys_, np.asarray(ts), memory_depth)


def loss(params: StdrParams, view: ResolutionView, sys_: EdgeSystem,
         config: StdrConfig, ts=None) -> float:
    """Squared error with overestimations scaled by (1 + delta)."""
    d = config.memory_depth
    if view.n_times < d + 1:
        raise InsufficientHistoryError("view must contain at least d + 1 steps")
    if ts is None:
        ts = np.arange(d, view.n_times)
    f = _forward(params, view.speeds, sys_, ts, d)
    y = view.speeds[:, ts]
    e = (y - f) ** 2
    w = 1.0 + config.delta * (y <= f)
    return float(np.sum(w * e))


def loss_gradient(params: StdrParams, view: ResolutionView, sys_: EdgeSystem,
                  config: StdrConfig, ts=None):
    """Analytic partials of the loss w.r.t. (mu, alpha, beta); the
    overestimation indicator is held locally constant."""
    d = config.memory_depth
    if ts is None:
        ts = np.arange(d, view.n_times)
    ts = np.asarray(ts, dtype=int)
    f, g_edge, dg_dbeta = _forward(params, view.speeds, sys_, ts, d,
                                   with_parts=True)
    y = view.speeds[:, ts]
    w = 1.0 + config.delta * (y <= f)
    dldf = -2.0 * w * (y - f)                               # (kappa, B)
    dmu = dldf.sum(axis=1)
    dldf_edge = dldf[sys_.i, :]                             # (P, B)
    dalpha = (dldf_edge[: sys_.n_support] * g_edge[: sys_.n_support]).sum(axis=1)
    alpha_full = sys_.alpha_full(params.alpha)
    per_edge_beta = (dldf_edge * alpha_full[:, None] * dg_dbeta).sum(axis=1)
    dbeta = np.zeros(sys_.kappa)
    np.add.at(dbeta, sys_.j, per_edge_beta)
    return dmu, dalpha, dbeta


def default_init(view: ResolutionView, sys_: EdgeSystem,
                 config: StdrConfig) -> StdrParams:
    """Data-scaled start: mu at the per-cluster mean, flat small alpha."""
    return StdrParams(
        mu=view.speeds[:, : view.n_times].mean(axis=1),
        alpha=np.full(sys_.n_support, 0.1),
        beta=np.ones(sys_.kappa),
    )


def fit(view: ResolutionView, sys_: EdgeSystem, config: StdrConfig,
        warm_start: StdrParams | None = None) -> tuple[StdrParams, dict]:
    """Projected SGD over random time batches; clamps parameters to >= 0
    after each step. Returns the best-loss parameters seen and fit metadata.
    """
    d = config.memory_depth
    if view.n_times < d + 1:
        raise InsufficientHistoryError("view must contain at least d + 1 steps")
    params = warm_start.copy() if warm_start is not None else default_init(
        view, sys_, config
    )
    rng = np.random.default_rng(config.seed)
    all_ts = np.arange(d, view.n_times)
    initial = loss(params, view, sys_, config)
    best = params.copy()
    best_loss = initial
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(all_ts)
        for start in range(0, order.size, config.batch):
            ts = order[start : start + config.batch]
            dmu, dalpha, dbeta = loss_gradient(params, view, sys_, config, ts)
            # per-time-step mean gradient keeps the step size batch-invariant
            step = lr / ts.size
            params.mu = np.maximum(params.mu - step * dmu, 0.0)
            params.alpha = np.maximum(params.alpha - step * dalpha, 0.0)
            params.beta = np.maximum(params.beta - step * dbeta, 0.0)
        current = loss(params, view, sys_, config)
        if not np.isfinite(current):
            raise DivergedError(epoch)
        if current < best_loss:
            best_loss = current
            best = params.copy()
    meta = {"initial_loss": initial, "final_loss": best_loss,
            "epochs": config.epochs}
    return best, meta


def rolling_forecast(view: ResolutionView, sys_: EdgeSystem, config: StdrConfig,
                     test_ts) -> np.ndarray:
    """One-step-ahead rolling protocol: for each target t, fit on history
    strictly before t (warm-started) and predict t. Shape (kappa, len(ts))."""
    test_ts = np.asarray(test_ts, dtype=int)
    if np.any(test_ts < config.memory_depth + 1):
        raise InsufficientHistoryError("test range must start after memory depth")
    preds = np.empty((view.kappa, test_ts.size))
    params = None
    for k, t in enumerate(np.sort(test_ts)):
        history = view.prefix(int(t), config.memory_depth + 1)
        step_config = config
        if params is not None:
            step_config = StdrConfig(**{**asdict(config),
                                        "epochs": config.refit_epochs})
        params, _ = fit(history, sys_, step_config, warm_start=params)
        preds[:, k] = _forward(params, view.speeds, sys_,
                               np.array([t]), config.memory_depth)[:, 0]
    return preds


class StdrRegressor(BaseEstimator):
    """Estimator wrapper around the delayed regressive model.

    fit() consumes a ResolutionView plus the dynamic graph and travel times;
    predict() evaluates at explicit time indices of the fitted view.
    """

    def __init__(self, memory_depth=6, delta=0.8, learning_rate=1e-2,
                 epochs=200, batch=32, seed=0, refit_epochs=10):
        self.memory_depth = memory_depth
        self.delta = delta
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch = batch
        self.seed = seed
        self.refit_epochs = refit_epochs

    def _config(self) -> StdrConfig:
        return StdrConfig(
            memory_depth=self.memory_depth,
            delta=self.delta,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch=self.batch,
            seed=self.seed,
            refit_epochs=self.refit_epochs,
        )

    def fit(self, view: ResolutionView, ddg: DynamicGraph,
            travel: TravelTimeTensor, warm_start: StdrParams | None = None):
        self.system_ = EdgeSystem(ddg, travel)
        self.view_ = view
        self.params_, self.fit_meta_ = fit(view, self.system_, self._config(),
                                           warm_start=warm_start)
        return self

    def predict(self, ts) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise RuntimeError("fit() must be called before predict()")
        return predict_all(self.params_, self.view_, self.system_, ts,
                           self.memory_depth)
