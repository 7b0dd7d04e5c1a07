"""Reference predictors: persistence and a least-squares VAR(p) model."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .data import InsufficientHistoryError, ResolutionView


class SingularDesignError(ValueError):
    """Rank-deficient least-squares design; lower p or kappa."""


@dataclass
class VarParams:
    p: int
    c: np.ndarray                # intercept, length kappa
    A: np.ndarray                # (p, kappa, kappa) lag coefficient matrices

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        kappa = self.c.size
        if self.p < 1 or self.A.shape != (self.p, kappa, kappa):
            raise ValueError("inconsistent VAR parameter shapes")

    def to_json(self) -> str:
        return json.dumps(
            {"p": self.p, "c": self.c.tolist(), "A": self.A.tolist()},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "VarParams":
        d = json.loads(text)
        return cls(p=d["p"], c=np.asarray(d["c"]), A=np.asarray(d["A"]))


def persistence_forecast(view: ResolutionView, t: int) -> np.ndarray:
    """Forecast for time t equals the observation at t - 1."""
    if t < 1:
        raise InsufficientHistoryError("persistence needs one past observation")
    return view.speeds[:, t - 1].copy()


def var_fit(view: ResolutionView, p: int = 10) -> VarParams:
    """Equation-by-equation OLS over the p lagged regressors (plus intercept).

    y(t) = c + sum_tau A_tau y(t - tau); deterministic, no regularization.
    """
    y = view.speeds
    kappa, n_times = y.shape
    n_rows = n_times - p
    n_cols = kappa * p + 1
    if n_rows <= n_cols - 1:
        raise InsufficientHistoryError(
            f"need more than kappa*p + 1 = {n_cols} usable steps, have {n_rows}"
        )
    design = np.empty((n_rows, n_cols))
    design[:, 0] = 1.0
    for tau in range(1, p + 1):
        design[:, 1 + (tau - 1) * kappa : 1 + tau * kappa] = \
            y[:, p - tau : n_times - tau].T
    target = y[:, p:].T
    rank = np.linalg.matrix_rank(design)
    if rank < n_cols:
        raise SingularDesignError(
            f"design rank {rank} < {n_cols}; lower p or kappa"
        )
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    c = coef[0]
    A = np.stack(
        [coef[1 + (tau - 1) * kappa : 1 + tau * kappa, :].T
         for tau in range(1, p + 1)]
    )
    return VarParams(p=p, c=c, A=A)


def var_forecast(params: VarParams, view: ResolutionView, t: int) -> np.ndarray:
    """One-step-ahead VAR prediction for time t from the last p observations."""
    if t < params.p:
        raise InsufficientHistoryError(f"need {params.p} past observations")
    out = params.c.copy()
    for tau in range(1, params.p + 1):
        out += params.A[tau - 1] @ view.speeds[:, t - tau]
    return out


class PersistenceForecaster(BaseEstimator):
    """Estimator facade for the persistence baseline (no parameters)."""

    def fit(self, view: ResolutionView):
        self.view_ = view
        return self

    def predict(self, ts) -> np.ndarray:
        return np.column_stack(
            [persistence_forecast(self.view_, int(t)) for t in np.atleast_1d(ts)]
        )


class VarForecaster(BaseEstimator):
    def __init__(self, p: int = 10):
        self.p = p

    def fit(self, view: ResolutionView):
        self.view_ = view
        self.params_ = var_fit(view, self.p)
        return self

    def predict(self, ts) -> np.ndarray:
        return np.column_stack(
            [var_forecast(self.params_, self.view_, int(t))
             for t in np.atleast_1d(ts)]
        )
