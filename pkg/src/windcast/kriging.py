"""Multi-resolution spatio-temporal Kriging of prediction residuals.

A zero-mean GP over coordinates x = (location, recorded time, kappa, eta)
models the error of the deterministic predictor across data resolutions.
The kernel is a product of Gaussian space/time factors and two resolution
correlation factors. Large datasets are handled by a sparse variational
approximation with M inducing points: kernel/noise/inducing parameters
follow plain stochastic gradients of the ELBO (via jax autodiff), while the
variational Gaussian q(u) = N(m, LL^T) follows closed-form natural-gradient
steps.

Coordinate vectors are rows [lat, lon, t*eta, kappa, eta]; kappa and eta are
treated as continuous during optimization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from sklearn.base import BaseEstimator

import jax
import jax.numpy as jnp

jax.config.update("jax_enable_x64", True)

DEFAULT_JITTER_SCALE = 1e-6
MAX_JITTER_SCALE = 1e-2
DEFAULT_QUAD_ORDER = 20
MAX_LOG_STEP = 0.1
MIN_NOISE_VAR = 1e-8


class NonPositiveDefiniteError(np.linalg.LinAlgError):
    """Gram factorization failed even after jitter escalation."""


class SvgpDivergedError(RuntimeError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"ELBO became non-finite at iteration {iteration}")


@dataclass(frozen=True)
class Coord:
    """Spatio-temporal coordinate of one prediction cell."""

    i: int
    t: int
    kappa: int
    eta: int
    lat: float
    lon: float

    def vector(self) -> np.ndarray:
        return np.array(
            [self.lat, self.lon, float(self.t * self.eta),
             float(self.kappa), float(self.eta)]
        )


def coord_matrix(coords) -> np.ndarray:
    """Stack Coord objects (or ready-made rows) into an (N, 5) array."""
    arr = np.asarray(
        [c.vector() if isinstance(c, Coord) else np.asarray(c, dtype=float)
         for c in coords]
    )
    return arr.reshape(-1, 5)


@dataclass
class KernelParams:
    """Six learnable positive scales plus the fixed (K, T) constants of the
    resolution factors."""

    sigma_s: float = 1.0
    sigma_t: float = 1.0
    sigma_k0: float = 1.0
    sigma_k1: float = 1.0
    sigma_e0: float = 1.0
    sigma_e1: float = 1.0
    k_max: float = 506.0
    t_max: float = 750.0

    def __post_init__(self):
        if min(self.sigma_s, self.sigma_t, self.sigma_k0, self.sigma_k1,
               self.sigma_e0, self.sigma_e1) <= 0:
            raise ValueError("kernel scales must be strictly positive")

    def vector(self) -> np.ndarray:
        return np.array([self.sigma_s, self.sigma_t, self.sigma_k0,
                         self.sigma_k1, self.sigma_e0, self.sigma_e1])

    def replace_vector(self, vec) -> "KernelParams":
        return KernelParams(*[float(v) for v in vec],
                            k_max=self.k_max, t_max=self.t_max)


@dataclass
class SvgpState:
    """Inducing inputs plus the variational Gaussian over their values."""

    Z: np.ndarray            # (M, 5) continuous-relaxed coordinates
    m: np.ndarray            # (M,)
    L: np.ndarray            # (M, M) lower triangular, S = L L^T
    noise_var: float
    jitter: float

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.m = np.asarray(self.m, dtype=float)
        self.L = np.atleast_2d(np.asarray(self.L, dtype=float))
        if self.Z.shape[0] < 1 or self.noise_var <= 0:
            raise ValueError("need M >= 1 inducing points and positive noise")
        if np.any(np.diag(self.L) <= 0):
            raise ValueError("L must have a positive diagonal")

    @property
    def n_inducing(self) -> int:
        return self.Z.shape[0]

    def S(self) -> np.ndarray:
        return self.L @ self.L.T

    def to_json(self, params: KernelParams, seed: int | None = None) -> str:
        return json.dumps(
            {
                "Z": self.Z.tolist(),
                "m": self.m.tolist(),
                "L": self.L.tolist(),
                "noise_var": self.noise_var,
                "jitter": self.jitter,
                "kernel": asdict(params),
                "seed": seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> tuple["SvgpState", KernelParams]:
        d = json.loads(text)
        state = cls(Z=np.asarray(d["Z"]), m=np.asarray(d["m"]),
                    L=np.asarray(d["L"]), noise_var=d["noise_var"],
                    jitter=d["jitter"])
        return state, KernelParams(**d["kernel"])


@dataclass
class MultiResDataset:
    """Coordinates, truths and deterministic predictions across resolutions.

    ``ids`` carries the integer (i, t, kappa, eta) of each row for cluster-
    bias bookkeeping; ``X`` is the kernel-space coordinate matrix.
    """

    X: np.ndarray            # (N, 5)
    ids: np.ndarray          # (N, 4) int columns (i, t, kappa, eta)
    y: np.ndarray            # (N,)
    f: np.ndarray            # (N,)
    resolutions: tuple = ()

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(-1, 5)
        self.ids = np.asarray(self.ids, dtype=int).reshape(-1, 4)
        self.y = np.asarray(self.y, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        n = self.X.shape[0]
        if not (self.ids.shape[0] == self.y.size == self.f.size == n):
            raise ValueError("X, ids, y, f must agree in length")

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass
class ClusterBias:
    """Signed mean residual per (kappa, cluster)."""

    values: dict = field(default_factory=dict)

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        return np.array(
            [self.values.get((int(k), int(i)), 0.0) for i, _, k, _ in ids]
        )


def estimate_cluster_bias(dataset: MultiResDataset) -> ClusterBias:
    """Average the signed residual y - f within each (kappa, cluster)."""
    if dataset.n == 0:
        raise ValueError("empty dataset has no clusters to average")
    resid = dataset.y - dataset.f
    sums: dict[tuple[int, int], list] = {}
    for r, (i, _, k, _) in zip(resid, dataset.ids):
        sums.setdefault((int(k), int(i)), []).append(r)
    return ClusterBias({key: float(np.mean(v)) for key, v in sums.items()})


def residuals(dataset: MultiResDataset, bias: ClusterBias | None) -> np.ndarray:
    r = dataset.y - dataset.f
    if bias is not None:
        r = r - bias.lookup(dataset.ids)
    return r


# --- kernel ---------------------------------------------------------------

def _kernel_core(vec, Xa, Xb, k_max, t_max):
    sigma_s, sigma_t, sk0, sk1, se0, se1 = vec
    d2 = jnp.sum((Xa[:, None, 0:2] - Xb[None, :, 0:2]) ** 2, axis=-1)
    ups = jnp.exp(-sigma_s * d2)
    upt = jnp.exp(-sigma_t * (Xa[:, 2, None] - Xb[None, :, 2]) ** 2)
    ka, kb = Xa[:, 3], Xb[:, 3]
    nus = (jnp.exp(-sk0 * (ka[:, None] - kb[None, :]) ** 2)
           + jnp.exp(-sk1 * (ka[:, None] - k_max) ** 2)
           + jnp.exp(-sk1 * (kb[None, :] - k_max) ** 2))
    ea, eb = Xa[:, 4], Xb[:, 4]
    nut = (jnp.exp(-se0 * (ea[:, None] - eb[None, :]) ** 2)
           + jnp.exp(-se1 * (ea[:, None] - t_max) ** 2)
           + jnp.exp(-se1 * (eb[None, :] - t_max) ** 2))
    return ups * upt * nus * nut


def _kernel_diag_core(vec, X, k_max, t_max):
    _, _, _, sk1, _, se1 = vec
    nus = 1.0 + 2.0 * jnp.exp(-sk1 * (X[:, 3] - k_max) ** 2)
    nut = 1.0 + 2.0 * jnp.exp(-se1 * (X[:, 4] - t_max) ** 2)
    return nus * nut


def kernel_eval(x, xp, params: KernelParams) -> float:
    """Separable kernel value for a single coordinate pair."""
    Xa = coord_matrix([x])
    Xb = coord_matrix([xp])
    k = _kernel_core(jnp.asarray(params.vector()), jnp.asarray(Xa),
                     jnp.asarray(Xb), params.k_max, params.t_max)
    return float(k[0, 0])


def kernel_diag(X, params: KernelParams) -> np.ndarray:
    """k(x, x) for each row of X (no jitter)."""
    X = np.asarray(X, dtype=float).reshape(-1, 5)
    return np.asarray(_kernel_diag_core(jnp.asarray(params.vector()),
                                        jnp.asarray(X), params.k_max,
                                        params.t_max))


def gram(X, Xp=None, params: KernelParams = None, jitter: float | None = None):
    """Pairwise kernel matrix. A self-gram (Xp omitted) gets jitter added to
    its diagonal; the default jitter scales with the mean diagonal."""
    X = np.asarray(X, dtype=float).reshape(-1, 5)
    self_gram = Xp is None
    Xp_arr = X if self_gram else np.asarray(Xp, dtype=float).reshape(-1, 5)
    K = np.asarray(_kernel_core(jnp.asarray(params.vector()), jnp.asarray(X),
                                jnp.asarray(Xp_arr), params.k_max,
                                params.t_max))
    if self_gram:
        K = 0.5 * (K + K.T)
        if jitter is None:
            jitter = DEFAULT_JITTER_SCALE * float(np.mean(np.diag(K)))
        K = K + jitter * np.eye(K.shape[0])
    return K


def _chol_with_escalation(K: np.ndarray, base_jitter: float):
    """Cholesky with x10 jitter escalation up to the hard cap."""
    scale = float(np.mean(np.diag(K)))
    extra = 0.0
    step = base_jitter
    while True:
        try:
            return np.linalg.cholesky(K + extra * np.eye(K.shape[0]))
        except np.linalg.LinAlgError:
            step = step * 10 if extra else base_jitter * 10
            extra = step * scale
            if step > MAX_JITTER_SCALE:
                raise NonPositiveDefiniteError(
                    "gram not positive definite; jitter escalation exhausted "
                    "(consider rescaling inputs)"
                ) from None


# --- exact GP oracle path ---------------------------------------------------

def exact_log_marginal(dataset: MultiResDataset, params: KernelParams,
                       noise_var: float, bias: ClusterBias | None = None,
                       jitter: float | None = None) -> float:
    """Dense log marginal likelihood of the residuals; N must stay small."""
    r = residuals(dataset, bias)
    K = gram(dataset.X, params=params, jitter=jitter) \
        + noise_var * np.eye(dataset.n)
    L = _chol_with_escalation(K, DEFAULT_JITTER_SCALE)
    w = np.linalg.solve(L, r)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * w @ w - 0.5 * logdet
                 - 0.5 * dataset.n * np.log(2 * np.pi))


def exact_posterior(dataset: MultiResDataset, params: KernelParams,
                    noise_var: float, X_star,
                    bias: ClusterBias | None = None,
                    jitter: float | None = None):
    """Conditional Gaussian of the residual process at X_star."""
    r = residuals(dataset, bias)
    X_star = np.asarray(X_star, dtype=float).reshape(-1, 5)
    K = gram(dataset.X, params=params, jitter=jitter) \
        + noise_var * np.eye(dataset.n)
    L = _chol_with_escalation(K, DEFAULT_JITTER_SCALE)
    K_sx = gram(X_star, dataset.X, params=params)
    K_ss = gram(X_star, params=params, jitter=jitter)
    V = np.linalg.solve(L, K_sx.T)
    mean = V.T @ np.linalg.solve(L, r)
    cov = K_ss - V.T @ V
    return mean, 0.5 * (cov + cov.T)


# --- variational pieces -----------------------------------------------------

def kl_qu_pu(state: SvgpState, K_ZZ: np.ndarray) -> float:
    """KL( N(m, LL^T) || N(0, K_ZZ) ), closed form."""
    m_vec = state.m
    M = state.n_inducing
    Lz = _chol_with_escalation(np.asarray(K_ZZ), DEFAULT_JITTER_SCALE)
    W = np.linalg.solve(Lz, state.L)
    v = np.linalg.solve(Lz, m_vec)
    logdet_K = 2.0 * np.sum(np.log(np.diag(Lz)))
    logdet_S = 2.0 * np.sum(np.log(np.diag(state.L)))
    trace = np.sum(W * W)
    return float(0.5 * (logdet_K - logdet_S - M + trace + v @ v))


def q_eps_marginal(X_batch, state: SvgpState, params: KernelParams):
    """Per-point mean and variance of q(eps) = N(Am, K_XX + A(S-K_ZZ)A^T)."""
    X_batch = np.asarray(X_batch, dtype=float).reshape(-1, 5)
    K_zz = gram(state.Z, params=params, jitter=state.jitter)
    K_xz = gram(X_batch, state.Z, params=params)
    Lz = _chol_with_escalation(K_zz, DEFAULT_JITTER_SCALE)
    A = np.linalg.solve(Lz.T, np.linalg.solve(Lz, K_xz.T)).T
    mean = A @ state.m
    diag_prior = np.asarray(
        _kernel_diag_core(jnp.asarray(params.vector()), jnp.asarray(X_batch),
                          params.k_max, params.t_max)
    ) + state.jitter
    S = state.S()
    var = diag_prior + np.sum((A @ (S - K_zz)) * A, axis=1)
    return mean, np.maximum(var, 1e-12)


_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gh_nodes(order: int):
    if order not in _GH_CACHE:
        _GH_CACHE[order] = np.polynomial.hermite.hermgauss(order)
    return _GH_CACHE[order]


def expected_log_lik(y, f, c, q_mean, q_var, noise_var,
                     quad_order: int = DEFAULT_QUAD_ORDER):
    """E_{q(eps)}[log N(y | f + c + eps, noise_var)] by Gauss-Hermite.

    Vectorized over points; returns an array matching the input shape.
    """
    if quad_order < 1 or noise_var <= 0:
        raise ValueError("need quad_order >= 1 and positive noise_var")
    y, f, c = np.asarray(y, dtype=float), np.asarray(f, dtype=float), np.asarray(c, dtype=float)
    q_mean, q_var = np.asarray(q_mean, dtype=float), np.asarray(q_var, dtype=float)
    nodes, weights = _gh_nodes(quad_order)
    eps = q_mean[..., None] + np.sqrt(2.0 * np.maximum(q_var, 0.0))[..., None] * nodes
    loglik = (-0.5 * np.log(2 * np.pi * noise_var)
              - (y[..., None] - f[..., None] - c[..., None] - eps) ** 2
              / (2 * noise_var))
    return (loglik @ weights) / np.sqrt(np.pi)


def elbo(dataset_batch: MultiResDataset, state: SvgpState,
         params: KernelParams, scale: float = 1.0,
         bias: ClusterBias | None = None,
         quad_order: int = DEFAULT_QUAD_ORDER) -> float:
    """scale * sum of expected log likelihoods - KL(q(u) || p(u))."""
    if dataset_batch.n == 0:
        raise ValueError("batch must be non-empty")
    q_mean, q_var = q_eps_marginal(dataset_batch.X, state, params)
    c = bias.lookup(dataset_batch.ids) if bias is not None else np.zeros(dataset_batch.n)
    ell = expected_log_lik(dataset_batch.y, dataset_batch.f, c, q_mean, q_var,
                           state.noise_var, quad_order)
    K_zz = gram(state.Z, params=params, jitter=state.jitter)
    return float(scale * np.sum(ell) - kl_qu_pu(state, K_zz))


# --- jax ELBO for hyperparameter / inducing-input gradients -----------------

def _elbo_jax(log_vec, log_noise, Z, m, L, Xb, rb, scale, gh_nodes, gh_weights,
              k_max, t_max, jitter_scale):
    vec = jnp.exp(log_vec)
    noise_var = jnp.exp(log_noise)
    M = Z.shape[0]
    K_zz = _kernel_core(vec, Z, Z, k_max, t_max)
    K_zz = 0.5 * (K_zz + K_zz.T) + jitter_scale * jnp.eye(M)
    Lz = jnp.linalg.cholesky(K_zz)
    K_xz = _kernel_core(vec, Xb, Z, k_max, t_max)
    A = jax.scipy.linalg.cho_solve((Lz, True), K_xz.T).T
    q_mean = A @ m
    S = L @ L.T
    diag_prior = _kernel_diag_core(vec, Xb, k_max, t_max) + jitter_scale
    q_var = jnp.maximum(diag_prior + jnp.sum((A @ (S - K_zz)) * A, axis=1),
                        1e-12)
    eps = q_mean[:, None] + jnp.sqrt(2.0 * q_var)[:, None] * gh_nodes
    loglik = (-0.5 * jnp.log(2 * jnp.pi * noise_var)
              - (rb[:, None] - eps) ** 2 / (2 * noise_var))
    ell = (loglik @ gh_weights) / jnp.sqrt(jnp.pi)
    W = jax.scipy.linalg.solve_triangular(Lz, L, lower=True)
    v = jax.scipy.linalg.solve_triangular(Lz, m, lower=True)
    kl = 0.5 * (2.0 * jnp.sum(jnp.log(jnp.diag(Lz)))
                - 2.0 * jnp.sum(jnp.log(jnp.diag(L)))
                - M + jnp.sum(W * W) + v @ v)
    return scale * jnp.sum(ell) - kl


_elbo_value_and_grads = jax.jit(
    jax.value_and_grad(_elbo_jax, argnums=(0, 1, 2)),
    static_argnames=("k_max", "t_max"),
)


@dataclass
class SvgpConfig:
    n_inducing: int = 50
    batch: int = 256
    iters: int = 500
    lr: float = 1e-2
    nat_lr: float = 0.1
    seed: int = 0
    quad_order: int = DEFAULT_QUAD_ORDER
    optimize_inducing: bool = True
    optimize_hypers: bool = True


def _init_kernel_params(X: np.ndarray, k_max: float, t_max: float) -> KernelParams:
    """Median-heuristic starting scales so the kernel neither saturates nor
    vanishes on the observed coordinate spreads."""

    def scale_for(values):
        v = np.asarray(values, dtype=float)
        diffs = (v[:, None] - v[None, :]) ** 2
        med = np.median(diffs[diffs > 0]) if np.any(diffs > 0) else 1.0
        return 1.0 / max(med, 1e-12)

    d2 = np.sum((X[:, None, 0:2] - X[None, :, 0:2]) ** 2, axis=-1)
    med_s = np.median(d2[d2 > 0]) if np.any(d2 > 0) else 1.0
    return KernelParams(
        sigma_s=1.0 / max(med_s, 1e-12),
        sigma_t=scale_for(X[:, 2]),
        sigma_k0=scale_for(X[:, 3]),
        sigma_k1=1.0 / max((np.mean(X[:, 3]) - k_max) ** 2, 1.0),
        sigma_e0=scale_for(X[:, 4]),
        sigma_e1=1.0 / max((np.mean(X[:, 4]) - t_max) ** 2, 1.0),
        k_max=k_max,
        t_max=t_max,
    )


def _natural_gradient_step(state: SvgpState, params: KernelParams,
                           Xb: np.ndarray, rb: np.ndarray, scale: float,
                           lr: float) -> tuple[np.ndarray, np.ndarray]:
    """One natural-gradient step on q(u) for the Gaussian likelihood.

    The ELBO gradient in expectation parameters yields the update
      S_new^-1 = (1 - lr) S^-1 + lr (K_ZZ^-1 + scale/noise * A^T A)
      theta1   = (1 - lr) S^-1 m + lr * scale/noise * A^T r
    which at lr = 1 on a full batch lands on the optimal q.
    """
    M = state.n_inducing
    K_zz = gram(state.Z, params=params, jitter=state.jitter)
    Lz = _chol_with_escalation(K_zz, DEFAULT_JITTER_SCALE)
    K_xz = gram(Xb, state.Z, params=params)
    A = np.linalg.solve(Lz.T, np.linalg.solve(Lz, K_xz.T)).T
    Kzz_inv = np.linalg.solve(Lz.T, np.linalg.solve(Lz, np.eye(M)))
    S = state.S()
    S_inv = np.linalg.solve(state.L.T, np.linalg.solve(state.L, np.eye(M)))
    lam = Kzz_inv + (scale / state.noise_var) * (A.T @ A)
    g_hat = (scale / state.noise_var) * (A.T @ rb)
    S_inv_new = (1 - lr) * S_inv + lr * lam
    theta1_new = (1 - lr) * (S_inv @ state.m) + lr * g_hat
    Ls_inv = _chol_with_escalation(0.5 * (S_inv_new + S_inv_new.T),
                                   DEFAULT_JITTER_SCALE)
    S_new = np.linalg.solve(Ls_inv.T, np.linalg.solve(Ls_inv, np.eye(M)))
    S_new = 0.5 * (S_new + S_new.T)
    m_new = S_new @ theta1_new
    L_new = _chol_with_escalation(S_new, DEFAULT_JITTER_SCALE)
    return m_new, L_new


def init_svgp_state(dataset: MultiResDataset, params: KernelParams,
                    n_inducing: int, seed: int,
                    noise_var: float | None = None) -> SvgpState:
    """Seeded random-subset inducing inputs; q starts at the prior."""
    if n_inducing > dataset.n:
        raise ValueError("n_inducing must not exceed the dataset size")
    rng = np.random.default_rng(seed)
    idx = rng.choice(dataset.n, size=n_inducing, replace=False)
    Z = dataset.X[idx].copy()
    if noise_var is None:
        resid = dataset.y - dataset.f
        noise_var = max(0.1 * float(np.var(resid)), 1e-4)
    K_zz = gram(Z, params=params)
    jitter = DEFAULT_JITTER_SCALE * float(np.mean(np.diag(K_zz)))
    L = _chol_with_escalation(K_zz, DEFAULT_JITTER_SCALE)
    return SvgpState(Z=Z, m=np.zeros(n_inducing), L=L, noise_var=noise_var,
                     jitter=jitter)


def fit_svgp(dataset: MultiResDataset, config: SvgpConfig,
             bias: ClusterBias | None = None,
             init_params: KernelParams | None = None,
             init_state: SvgpState | None = None,
             k_max: float | None = None, t_max: float | None = None):
    """Stochastic variational fit. Returns (state, params, elbo_trace)."""
    if k_max is None:
        k_max = init_params.k_max if init_params is not None else 506.0
    if t_max is None:
        t_max = init_params.t_max if init_params is not None else 750.0
    params = init_params or _init_kernel_params(dataset.X, k_max, t_max)
    state = init_state or init_svgp_state(dataset, params, config.n_inducing,
                                          config.seed)
    r_all = residuals(dataset, bias)
    rng = np.random.default_rng(config.seed + 1)
    gh_nodes, gh_weights = _gh_nodes(config.quad_order)
    log_vec = np.log(params.vector())
    log_noise = float(np.log(state.noise_var))
    Z = state.Z.copy()
    m_vec, L_mat = state.m.copy(), state.L.copy()
    batch = min(config.batch, dataset.n)
    trace = []
    for it in range(config.iters):
        idx = (np.arange(dataset.n) if batch == dataset.n
               else rng.choice(dataset.n, size=batch, replace=False))
        Xb, rb = dataset.X[idx], r_all[idx]
        scale = dataset.n / idx.size
        value, (g_vec, g_noise, g_Z) = _elbo_value_and_grads(
            jnp.asarray(log_vec), log_noise, jnp.asarray(Z),
            jnp.asarray(m_vec), jnp.asarray(L_mat), jnp.asarray(Xb),
            jnp.asarray(rb), scale, jnp.asarray(gh_nodes),
            jnp.asarray(gh_weights), k_max, t_max, state.jitter)
        value = float(value)
        if not np.isfinite(value):
            raise SvgpDivergedError(it)
        trace.append(value)
        # Gradients of the bound grow with n; normalising keeps the step
        # size meaningful across dataset sizes, and the clip stops a single
        # mini-batch from throwing log-parameters out of floating range.
        if config.optimize_hypers:
            step = np.clip(config.lr * np.asarray(g_vec) / dataset.n,
                           -MAX_LOG_STEP, MAX_LOG_STEP)
            log_vec = log_vec + step
            log_noise = log_noise + float(
                np.clip(config.lr * float(g_noise) / dataset.n,
                        -MAX_LOG_STEP, MAX_LOG_STEP))
            # keep the likelihood non-degenerate
            log_noise = max(log_noise, np.log(MIN_NOISE_VAR))
        if config.optimize_inducing:
            Z = Z + config.lr * np.asarray(g_Z) / dataset.n
        step_params = params.replace_vector(np.exp(log_vec))
        step_state = SvgpState(Z=Z, m=m_vec, L=L_mat,
                               noise_var=float(np.exp(log_noise)),
                               jitter=state.jitter)
        m_vec, L_mat = _natural_gradient_step(step_state, step_params, Xb, rb,
                                              scale, config.nat_lr)
    params = params.replace_vector(np.exp(log_vec))
    state = SvgpState(Z=Z, m=m_vec, L=L_mat,
                      noise_var=float(np.exp(log_noise)), jitter=state.jitter)
    return state, params, np.asarray(trace)


def predict_posterior(X_star, state: SvgpState, params: KernelParams):
    """Sparse predictive posterior N(A* m, A* S A*^T + B*) at X_star."""
    X_star = np.asarray(X_star, dtype=float).reshape(-1, 5)
    K_zz = gram(state.Z, params=params, jitter=state.jitter)
    Lz = _chol_with_escalation(K_zz, DEFAULT_JITTER_SCALE)
    K_sz = gram(X_star, state.Z, params=params)
    K_ss = gram(X_star, params=params, jitter=state.jitter)
    A = np.linalg.solve(Lz.T, np.linalg.solve(Lz, K_sz.T)).T
    mean = A @ state.m
    B = K_ss - A @ K_sz.T
    cov = A @ state.S() @ A.T + B
    return mean, 0.5 * (cov + cov.T)


@dataclass
class CorrectedPrediction:
    mean: np.ndarray
    intervals: dict          # z level -> (lo, hi) arrays


def correct_predictions(f_star, c, post_mean, post_cov, noise_var,
                        z_levels=(1.0, 2.0)) -> CorrectedPrediction:
    """Corrected mean f* + c + posterior mean, with z-sigma intervals that
    include the observation noise."""
    f_star = np.asarray(f_star, dtype=float)
    c = np.broadcast_to(np.asarray(c, dtype=float), f_star.shape)
    post_mean = np.asarray(post_mean, dtype=float)
    var = np.maximum(np.diag(np.atleast_2d(post_cov)), 0.0) + noise_var
    sd = np.sqrt(var)
    mean = f_star + c + post_mean
    intervals = {float(z): (mean - z * sd, mean + z * sd) for z in z_levels}
    return CorrectedPrediction(mean=mean, intervals=intervals)


def rolling_correct(past: MultiResDataset, test: MultiResDataset,
                    params: KernelParams, noise_var: float,
                    bias: ClusterBias | None = None,
                    window_raw: float = 128.0, max_points: int = 400,
                    z_levels=(1.0, 2.0)) -> CorrectedPrediction:
    """One-step-ahead noise prediction over a test set.

    Each test cell (i, t, kappa, eta) covers raw time [t*eta, (t+1)*eta) and
    is predicted from all residuals -- held-out history plus earlier test
    cells -- whose covering window has already closed by the cell's start,
    restricted to the most recent ``window_raw`` raw units (at most
    ``max_points`` points). Strictly causal: no cell conditions on data at
    or after its own start.
    """
    all_X = np.vstack([past.X, test.X])
    all_ids = np.vstack([past.ids, test.ids])
    all_y = np.concatenate([past.y, test.y])
    all_f = np.concatenate([past.f, test.f])
    end_raw = (all_ids[:, 1] + 1.0) * all_ids[:, 3]
    start_raw = test.ids[:, 1].astype(float) * test.ids[:, 3]
    post_mean = np.empty(test.n)
    post_var = np.empty(test.n)
    for s in np.unique(start_raw):
        group = np.flatnonzero(start_raw == s)
        avail = np.flatnonzero((end_raw <= s) & (end_raw > s - window_raw))
        if avail.size > max_points:
            avail = avail[np.argsort(end_raw[avail])[-max_points:]]
        if avail.size == 0:
            diag = kernel_diag(test.X[group], params)
            post_mean[group] = 0.0
            post_var[group] = diag
            continue
        sub = MultiResDataset(X=all_X[avail], ids=all_ids[avail],
                              y=all_y[avail], f=all_f[avail])
        mean, cov = exact_posterior(sub, params, noise_var, test.X[group],
                                    bias=bias)
        post_mean[group] = mean
        post_var[group] = np.maximum(np.diag(cov), 0.0)
    c = (bias.lookup(test.ids) if bias is not None else
         np.zeros(test.n))
    return correct_predictions(test.f, c, post_mean, np.diag(post_var),
                               noise_var, z_levels=z_levels)


def exact_q_state(dataset: MultiResDataset, params: KernelParams,
                  noise_var: float, bias: ClusterBias | None = None,
                  jitter: float | None = None) -> SvgpState:
    """SvgpState with Z = X and q(u) at the exact posterior of the residual
    process — the configuration where the sparse bound is tight."""
    r = residuals(dataset, bias)
    K = gram(dataset.X, params=params, jitter=0.0)
    if jitter is None:
        jitter = DEFAULT_JITTER_SCALE * float(np.mean(np.diag(K)))
    K = K + jitter * np.eye(dataset.n)
    Ky = K + noise_var * np.eye(dataset.n)
    Lk = _chol_with_escalation(Ky, DEFAULT_JITTER_SCALE)
    V = np.linalg.solve(Lk, K)
    mean = V.T @ np.linalg.solve(Lk, r)
    S = K - V.T @ V
    S = 0.5 * (S + S.T) + jitter * np.eye(dataset.n)
    L = _chol_with_escalation(S, DEFAULT_JITTER_SCALE)
    return SvgpState(Z=dataset.X.copy(), m=mean, L=L, noise_var=noise_var,
                     jitter=jitter)


class MultiResGPCorrector(BaseEstimator):
    """Estimator wrapper: fit the sparse GP on residuals of a deterministic
    predictor, then correct new predictions with calibrated intervals."""

    def __init__(self, n_inducing=50, batch=256, iters=500, lr=1e-2,
                 nat_lr=0.1, seed=0, quad_order=DEFAULT_QUAD_ORDER,
                 k_max=506.0, t_max=750.0):
        self.n_inducing = n_inducing
        self.batch = batch
        self.iters = iters
        self.lr = lr
        self.nat_lr = nat_lr
        self.seed = seed
        self.quad_order = quad_order
        self.k_max = k_max
        self.t_max = t_max

    def fit(self, dataset: MultiResDataset):
        self.bias_ = estimate_cluster_bias(dataset)
        config = SvgpConfig(
            n_inducing=min(self.n_inducing, dataset.n), batch=self.batch,
            iters=self.iters, lr=self.lr, nat_lr=self.nat_lr, seed=self.seed,
            quad_order=self.quad_order)
        self.state_, self.kernel_params_, self.elbo_trace_ = fit_svgp(
            dataset, config, bias=self.bias_, k_max=self.k_max,
            t_max=self.t_max)
        return self

    def predict(self, X_star, f_star, ids):
        """Corrected means and z-sigma intervals at new coordinates."""
        if not hasattr(self, "state_"):
            raise RuntimeError("fit() must be called before predict()")
        post_mean, post_cov = predict_posterior(X_star, self.state_,
                                                self.kernel_params_)
        c = self.bias_.lookup(np.asarray(ids))
        return correct_predictions(f_star, c, post_mean, post_cov,
                                   self.state_.noise_var)
