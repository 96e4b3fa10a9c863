"""Two-hidden-layer deep GP trained by sparse variational inference.

The generative model stacks three GP layers X -> L -> H -> Y with ARD
kernels and per-layer additive Gaussian noise. Inference maximizes an
evidence lower bound with:

- free Gaussian posteriors over the inducing outputs of the H and Y
  layers (full covariance), handled in closed form;
- a free Gaussian posterior over L per dimension (full covariance for
  small N, diagonal above the configurable threshold) whose KL against
  the exact first-layer prior is closed form;
- a diagonal Gaussian posterior over H whose entropy is closed form;
- the two expected log-likelihood terms estimated by reparameterized
  Monte-Carlo sampling of L and H; the conditional layer outputs and
  inducing outputs are integrated analytically, so sampling noise enters
  only through the layer inputs.

Everything differentiable runs in JAX (float64) so training can ascend
the bound over all variational parameters, inducing inputs, kernel
hyperparameters, and noises at once, with positivity kept by log-space
and SPD factors by Cholesky parameterization.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
from jax.scipy.linalg import solve_triangular as jsolve_triangular

from .core import Dataset, GridSpec, Position, RadioMap
from .errors import InputError, NumericsError
from .gp import ArdParams, _as_xy

__all__ = [
    "Gaussian",
    "DgpConfig",
    "DgpModel",
    "DgpTrainOptions",
    "DgpMapOptions",
    "default_dgp_config",
    "init_dgp",
    "kl_gaussians",
    "elbo_estimate",
    "elbo_components",
    "train_dgp",
    "dgp_predict",
    "dgp_predict_many",
    "build_dgp_radio_map",
    "model_to_json",
    "model_from_json",
]

FULL_QL_MAX_N = 500  # above this, q(L) covariance falls back to diagonal
_KZZ_JITTER = 1e-6  # relative jitter on inducing covariances
LOG2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Public closed-form KL on plain numpy Gaussians


@dataclass(frozen=True)
class Gaussian:
    """A multivariate Gaussian given by mean vector and covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise InputError(f"covariance shape {cov.shape} does not match mean size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def kl_gaussians(q: Gaussian, p: Gaussian) -> float:
    """KL(q || p) between multivariate Gaussians, via Cholesky factors."""
    if q.mean.size != p.mean.size:
        raise InputError("dimension mismatch between q and p")
    k = q.mean.size
    try:
        lq = np.linalg.cholesky(q.cov)
        lp = np.linalg.cholesky(p.cov)
    except np.linalg.LinAlgError as exc:
        raise NumericsError("covariance is not positive definite") from exc
    from scipy.linalg import solve_triangular

    a = solve_triangular(lp, lq, lower=True)
    b = solve_triangular(lp, q.mean - p.mean, lower=True)
    logdet_q = 2.0 * np.sum(np.log(np.diag(lq)))
    logdet_p = 2.0 * np.sum(np.log(np.diag(lp)))
    return float(0.5 * (np.sum(a**2) + np.sum(b**2) - k + logdet_p - logdet_q))


# ---------------------------------------------------------------------------
# Configuration and model state


@dataclass(frozen=True)
class DgpConfig:
    """Layer widths, inducing counts, and initial kernels/noises."""

    d_l: int = 2
    d_h: int = 2
    k_l: int = 32
    k_h: int = 32
    kernel_l: ArdParams = ArdParams(variance=1.0, weights=(1.0, 1.0))
    kernel_h: ArdParams = ArdParams(variance=1.0, weights=(1.0, 1.0))
    kernel_y: ArdParams = ArdParams(variance=1.0, weights=(1.0, 1.0))
    noise_l: float = 1e-2
    noise_h: float = 1e-2
    noise_y: float = 0.1
    full_ql: bool | None = None  # None -> full covariance iff N <= FULL_QL_MAX_N

    def __post_init__(self):
        if min(self.d_l, self.d_h, self.k_l, self.k_h) < 1:
            raise InputError("widths and inducing counts must be positive")
        if len(self.kernel_l.weights) != 2:
            raise InputError("kernel_l needs one weight per input dimension (2)")
        if len(self.kernel_h.weights) != self.d_l:
            raise InputError(f"kernel_h needs {self.d_l} weights")
        if len(self.kernel_y.weights) != self.d_h:
            raise InputError(f"kernel_y needs {self.d_h} weights")
        for name in ("noise_l", "noise_h", "noise_y"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")


def default_dgp_config(X, Y, d_l: int = 2, d_h: int = 2, k_l: int | None = None, k_h: int | None = None) -> DgpConfig:
    """Scale-aware defaults: length scales from the input extent, output scale from Y."""
    xy = _as_xy(X)
    y = np.asarray(Y, dtype=float).ravel()
    n = xy.shape[0]
    extent = np.maximum(xy.max(axis=0) - xy.min(axis=0), 1.0)
    w_in = tuple(1.0 / (e / 2.0) ** 2 for e in extent)
    msq_x = float(np.mean(xy**2)) + 1.0
    var_x = max(float(np.mean(np.var(xy, axis=0))), 1e-2)
    var_y = max(float(np.var(y)), 1e-2)

    def padded(weights, d):
        w = list(weights)[:d]
        return tuple(w + [1.0] * (d - len(w)))

    return DgpConfig(
        d_l=d_l,
        d_h=d_h,
        k_l=min(32 if k_l is None else k_l, n),
        k_h=min(32 if k_h is None else k_h, n),
        kernel_l=ArdParams(variance=msq_x, weights=w_in),
        kernel_h=ArdParams(variance=msq_x, weights=padded(w_in, d_l)),
        kernel_y=ArdParams(variance=var_y, weights=padded(w_in, d_h)),
        noise_l=0.1 * var_x,
        noise_h=0.1 * var_x,
        noise_y=0.1 * var_y,
    )


@dataclass(frozen=True)
class DgpModel:
    """All state of a two-hidden-layer DGP: data, variational posteriors, kernels, noises.

    Posterior covariances are stored as lower-triangular Cholesky factors.
    ``ql_chol`` is None when q(L) uses the diagonal fallback, in which case
    ``ql_sd`` carries the per-point standard deviations.
    """

    x: np.ndarray  # (N, 2)
    y: np.ndarray  # (N,)
    ql_mean: np.ndarray  # (N, D_L)
    ql_sd: np.ndarray | None  # (N, D_L) diagonal case
    ql_chol: np.ndarray | None  # (D_L, N, N) full case
    qh_mean: np.ndarray  # (N, D_H)
    qh_sd: np.ndarray  # (N, D_H)
    zl: np.ndarray  # (K_L, D_L) inducing inputs of the H layer
    zh: np.ndarray  # (K_H, D_H) inducing inputs of the Y layer
    quh_mean: np.ndarray  # (K_L, D_H)
    quh_chol: np.ndarray  # (D_H, K_L, K_L)
    quy_mean: np.ndarray  # (K_H,)
    quy_chol: np.ndarray  # (K_H, K_H)
    kernel_l: ArdParams
    kernel_h: ArdParams
    kernel_y: ArdParams
    noise_l: float
    noise_h: float
    noise_y: float
    y_shift: float = 0.0  # added back to predictive means

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_l(self) -> int:
        return self.ql_mean.shape[1]

    @property
    def d_h(self) -> int:
        return self.qh_mean.shape[1]

    @property
    def full_ql(self) -> bool:
        return self.ql_chol is not None


def _project(values: np.ndarray, d: int) -> np.ndarray:
    """Truncate or zero-pad columns to width d (identity when widths match)."""
    n, width = values.shape
    if d <= width:
        return values[:, :d].copy()
    return np.hstack([values, np.zeros((n, d - width))])


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 25) -> np.ndarray:
    """Deterministic-for-seed k-means++ with Lloyd refinement."""
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(k - 1):
        total = d2.sum()
        if total <= 0:
            centers.append(points[rng.integers(n)])
            continue
        pick = rng.choice(n, p=d2 / total)
        centers.append(points[pick])
        d2 = np.minimum(d2, np.sum((points - centers[-1]) ** 2, axis=1))
    centers = np.array(centers)
    for _ in range(iters):
        dist = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dist, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            mask = assign == j
            if np.any(mask):
                new_centers[j] = points[mask].mean(axis=0)
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    return centers


def _ard_np(a: np.ndarray, b: np.ndarray, params: ArdParams) -> np.ndarray:
    w = np.asarray(params.weights)
    d2 = np.einsum("ijk,ijk->ij", (a[:, None, :] - b[None, :, :]) * np.sqrt(w), (a[:, None, :] - b[None, :, :]) * np.sqrt(w))
    return params.variance * np.exp(-0.5 * d2)


def init_dgp(X, Y, config: DgpConfig, seed: int = 0, y_shift: float | None = None) -> DgpModel:
    """Initialize the variational state from data.

    q(L) means start at a linear projection of X (identity at width 2),
    q(H) means at their projection to the H width; inducing inputs come
    from k-means over those means; q(U) means start at zero with prior
    covariances. Deterministic for a fixed seed. ``y_shift=None`` centers
    Y by its mean (the model is zero-mean).
    """
    xy = _as_xy(X)
    y = np.asarray(Y, dtype=float).ravel()
    n = xy.shape[0]
    if y.shape[0] != n:
        raise InputError("X and Y lengths differ")
    if n < max(config.k_l, config.k_h):
        raise InputError(f"need at least max(K_L, K_H)={max(config.k_l, config.k_h)} observations, got {n}")
    if y_shift is None:
        y_shift = float(y.mean())
    rng = np.random.default_rng(seed)

    ql_mean = _project(xy, config.d_l)
    qh_mean = _project(ql_mean, config.d_h)
    scale_l = np.maximum(ql_mean.std(axis=0), 1e-2)
    scale_h = np.maximum(qh_mean.std(axis=0), 1e-2)
    ql_sd = np.tile(0.1 * scale_l, (n, 1))
    qh_sd = np.tile(0.1 * scale_h, (n, 1))

    zl = _kmeans(ql_mean, config.k_l, rng)
    zh = _kmeans(qh_mean, config.k_h, rng)

    kzz_h = _ard_np(zl, zl, config.kernel_h) + _KZZ_JITTER * config.kernel_h.variance * np.eye(config.k_l)
    kzz_y = _ard_np(zh, zh, config.kernel_y) + _KZZ_JITTER * config.kernel_y.variance * np.eye(config.k_h)
    try:
        chol_h = np.linalg.cholesky(kzz_h)
        chol_y = np.linalg.cholesky(kzz_y)
    except np.linalg.LinAlgError as exc:
        raise NumericsError("inducing covariance is not positive definite at init") from exc

    full_ql = config.full_ql if config.full_ql is not None else (n <= FULL_QL_MAX_N)
    if full_ql:
        ql_chol = np.stack([np.diag(ql_sd[:, d]) for d in range(config.d_l)])
        ql_sd_field = None
    else:
        ql_chol = None
        ql_sd_field = ql_sd

    return DgpModel(
        x=xy,
        y=y - y_shift,
        ql_mean=ql_mean,
        ql_sd=ql_sd_field,
        ql_chol=ql_chol,
        qh_mean=qh_mean,
        qh_sd=qh_sd,
        zl=zl,
        zh=zh,
        quh_mean=np.zeros((config.k_l, config.d_h)),
        quh_chol=np.tile(chol_h, (config.d_h, 1, 1)),
        quy_mean=np.zeros(config.k_h),
        quy_chol=chol_y,
        kernel_l=config.kernel_l,
        kernel_h=config.kernel_h,
        kernel_y=config.kernel_y,
        noise_l=config.noise_l,
        noise_h=config.noise_h,
        noise_y=config.noise_y,
        y_shift=y_shift,
    )


# ---------------------------------------------------------------------------
# JAX parameterization


def _raw_from_chol(chol: np.ndarray) -> np.ndarray:
    """Lower-triangular factor -> unconstrained raw (log on the diagonal)."""
    raw = np.tril(chol, -1)
    idx = np.arange(chol.shape[-1])
    raw[..., idx, idx] = np.log(np.clip(chol[..., idx, idx], 1e-300, None))
    return raw


def _chol_from_raw(raw: jnp.ndarray) -> jnp.ndarray:
    idx = jnp.arange(raw.shape[-1])
    lower = jnp.tril(raw, -1)
    return lower.at[..., idx, idx].set(jnp.exp(raw[..., idx, idx]))


def _params_from_model(model: DgpModel) -> dict:
    params = {
        "ql_mean": jnp.asarray(model.ql_mean),
        "qh_mean": jnp.asarray(model.qh_mean),
        "qh_log_sd": jnp.log(jnp.asarray(model.qh_sd)),
        "zl": jnp.asarray(model.zl),
        "zh": jnp.asarray(model.zh),
        "quh_mean": jnp.asarray(model.quh_mean),
        "quh_raw": jnp.asarray(_raw_from_chol(model.quh_chol)),
        "quy_mean": jnp.asarray(model.quy_mean),
        "quy_raw": jnp.asarray(_raw_from_chol(model.quy_chol)),
        "log_kl_var": jnp.log(jnp.asarray(model.kernel_l.variance)),
        "log_kl_w": jnp.log(jnp.asarray(model.kernel_l.weights)),
        "log_kh_var": jnp.log(jnp.asarray(model.kernel_h.variance)),
        "log_kh_w": jnp.log(jnp.asarray(model.kernel_h.weights)),
        "log_ky_var": jnp.log(jnp.asarray(model.kernel_y.variance)),
        "log_ky_w": jnp.log(jnp.asarray(model.kernel_y.weights)),
        "log_eps_l": jnp.log(jnp.asarray(model.noise_l)),
        "log_eps_h": jnp.log(jnp.asarray(model.noise_h)),
        "log_eps_y": jnp.log(jnp.asarray(model.noise_y)),
    }
    if model.full_ql:
        params["ql_raw"] = jnp.asarray(_raw_from_chol(model.ql_chol))
    else:
        params["ql_log_sd"] = jnp.log(jnp.asarray(model.ql_sd))
    return params


def _model_with_params(model: DgpModel, params: dict) -> DgpModel:
    def arr(name):
        return np.asarray(params[name])

    full = "ql_raw" in params
    return replace(
        model,
        ql_mean=arr("ql_mean"),
        ql_sd=None if full else np.exp(arr("ql_log_sd")),
        ql_chol=np.asarray(_chol_from_raw(params["ql_raw"])) if full else None,
        qh_mean=arr("qh_mean"),
        qh_sd=np.exp(arr("qh_log_sd")),
        zl=arr("zl"),
        zh=arr("zh"),
        quh_mean=arr("quh_mean"),
        quh_chol=np.asarray(_chol_from_raw(params["quh_raw"])),
        quy_mean=arr("quy_mean"),
        quy_chol=np.asarray(_chol_from_raw(params["quy_raw"])),
        kernel_l=ArdParams(float(np.exp(arr("log_kl_var"))), tuple(np.exp(arr("log_kl_w")))),
        kernel_h=ArdParams(float(np.exp(arr("log_kh_var"))), tuple(np.exp(arr("log_kh_w")))),
        kernel_y=ArdParams(float(np.exp(arr("log_ky_var"))), tuple(np.exp(arr("log_ky_w")))),
        noise_l=float(np.exp(arr("log_eps_l"))),
        noise_h=float(np.exp(arr("log_eps_h"))),
        noise_y=float(np.exp(arr("log_eps_y"))),
    )


def _data_from_model(model: DgpModel) -> dict:
    xu, idx, counts = np.unique(model.x, axis=0, return_inverse=True, return_counts=True)
    return {
        "x": jnp.asarray(model.x),
        "y": jnp.asarray(model.y),
        "xu": jnp.asarray(xu),
        "idx": jnp.asarray(idx.astype(np.int32)),
        "sqrt_c": jnp.asarray(np.sqrt(counts.astype(float))),
    }


# ---------------------------------------------------------------------------
# ELBO pieces (pure JAX)


def _ard(a, b, var, w):
    diff = a[:, None, :] - b[None, :, :]
    return var * jnp.exp(-0.5 * jnp.einsum("ijk,k,ijk->ij", diff, w, diff))


def _kl_to_inducing_prior(z, q_mean, q_chol, var, w):
    """Sum over output dims of KL(q(U) || N(0, K_zz)); q_mean (K, D), q_chol (D, K, K)."""
    k = z.shape[0]
    kzz = _ard(z, z, var, w) + _KZZ_JITTER * var * jnp.eye(k)
    lp = jnp.linalg.cholesky(kzz)
    a = jsolve_triangular(jnp.broadcast_to(lp, q_chol.shape), q_chol, lower=True)  # (D, K, K)
    b = jsolve_triangular(lp, q_mean, lower=True)  # (K, D)
    logdet_p = 2.0 * jnp.sum(jnp.log(jnp.diag(lp)))
    d = q_mean.shape[1]
    logdet_q = 2.0 * jnp.sum(jnp.log(jnp.abs(jnp.diagonal(q_chol, axis1=-2, axis2=-1))))
    return 0.5 * (jnp.sum(a**2) + jnp.sum(b**2) - d * k + d * logdet_p - logdet_q)


def _first_layer_prior_pieces(data, var, w, eps):
    """Compressed Cholesky pieces of p(L|X) = N(0, K(X,X) + eps I)."""
    xu, sqrt_c = data["xu"], data["sqrt_c"]
    ku = _ard(xu, xu, var, w)
    g = sqrt_c[:, None] * ku * sqrt_c[None, :]
    m = g + eps * jnp.eye(xu.shape[0])
    lm = jnp.linalg.cholesky(m)
    return g, lm


def _kl_ql_diag(params, data, var, w, eps):
    """KL(q(L)||p(L|X)) with diagonal q, via the unique-position compression."""
    n = data["x"].shape[0]
    u = data["xu"].shape[0]
    idx, sqrt_c = data["idx"], data["sqrt_c"]
    g, lm = _first_layer_prior_pieces(data, var, w, eps)
    logdet_p = (n - u) * jnp.log(eps) + 2.0 * jnp.sum(jnp.log(jnp.diag(lm)))

    minv = jax.scipy.linalg.cho_solve((lm, True), jnp.eye(u))
    gm = g @ minv
    diag_n = gm[idx, idx] / (sqrt_c[idx] ** 2)  # (W G M^-1 W^T)_nn

    mu = params["ql_mean"]  # (N, D)
    s2 = jnp.exp(2.0 * params["ql_log_sd"])  # (N, D)
    mu_t = jax.ops.segment_sum(mu, idx, num_segments=u) / sqrt_c[:, None]  # (U, D)
    quad = (jnp.sum(mu**2, axis=0) - jnp.einsum("ud,ud->d", mu_t, g @ jax.scipy.linalg.cho_solve((lm, True), mu_t))) / eps
    tr = (jnp.sum(s2, axis=0) - jnp.sum(s2 * diag_n[:, None], axis=0)) / eps
    logdet_q = jnp.sum(2.0 * params["ql_log_sd"], axis=0)
    d = mu.shape[1]
    return 0.5 * jnp.sum(tr + quad - n + logdet_p - logdet_q)


def _kl_ql_full(params, data, var, w, eps):
    """KL(q(L)||p(L|X)) with full per-dimension covariance (dense prior)."""
    x = data["x"]
    n = x.shape[0]
    kp = _ard(x, x, var, w) + eps * jnp.eye(n)
    lp = jnp.linalg.cholesky(kp)
    logdet_p = 2.0 * jnp.sum(jnp.log(jnp.diag(lp)))
    lq = _chol_from_raw(params["ql_raw"])  # (D, N, N)
    a = jsolve_triangular(jnp.broadcast_to(lp, lq.shape), lq, lower=True)
    b = jsolve_triangular(lp, params["ql_mean"], lower=True)  # (N, D)
    d = params["ql_mean"].shape[1]
    logdet_q = 2.0 * jnp.sum(jnp.log(jnp.abs(jnp.diagonal(lq, axis1=-2, axis2=-1))))
    return 0.5 * (jnp.sum(a**2) + jnp.sum(b**2) - d * n + d * logdet_p - logdet_q)


def _sample_ql(params, zeta_l):
    """Reparameterized draws of L; zeta_l has shape (S, N, D_L)."""
    if "ql_raw" in params:
        chols = _chol_from_raw(params["ql_raw"])  # (D, N, N)
        return params["ql_mean"][None] + jnp.einsum("dij,sjd->sid", chols, zeta_l)
    return params["ql_mean"][None] + jnp.exp(params["ql_log_sd"])[None] * zeta_l


def _sparse_expected_ll(inputs, t_mean, t_var, z, q_mean, q_chol, var, w, eps):
    """E[log N(targets; F, eps)] with F the sparse-GP layer output at ``inputs``.

    Analytic over the inducing posterior and the conditional; ``t_var``
    carries the target's own variance (zero for observed outputs).
    Shapes: inputs (N, Din), t_mean/t_var (N, D), q_mean (K, D),
    q_chol (D, K, K).
    """
    k = z.shape[0]
    kzz = _ard(z, z, var, w) + _KZZ_JITTER * var * jnp.eye(k)
    lz = jnp.linalg.cholesky(kzz)
    kxz = _ard(inputs, z, var, w)  # (N, K)
    a = jax.scipy.linalg.cho_solve((lz, True), kxz.T).T  # (N, K)
    q_diag = jnp.sum(a * kxz, axis=1)
    vf = jnp.clip(var - q_diag, 0.0, None)  # (N,)
    m = a @ q_mean  # (N, D)
    proj = jnp.einsum("nk,dkj->ndj", a, q_chol)  # (N, D, K)
    su = jnp.sum(proj**2, axis=-1)  # (N, D)
    sq = (t_mean - m) ** 2 + t_var + su + vf[:, None]
    n, d = t_mean.shape
    return -0.5 * n * d * (LOG2PI + jnp.log(eps)) - jnp.sum(sq) / (2.0 * eps)


def _elbo_impl(params, data, zeta_l, zeta_h):
    """ELBO estimate plus its closed-form/MC components."""
    eps_l = jnp.exp(params["log_eps_l"])
    eps_h = jnp.exp(params["log_eps_h"])
    eps_y = jnp.exp(params["log_eps_y"])
    kl_var, kl_w = jnp.exp(params["log_kl_var"]), jnp.exp(params["log_kl_w"])
    kh_var, kh_w = jnp.exp(params["log_kh_var"]), jnp.exp(params["log_kh_w"])
    ky_var, ky_w = jnp.exp(params["log_ky_var"]), jnp.exp(params["log_ky_w"])

    if "ql_raw" in params:
        kl_ql = _kl_ql_full(params, data, kl_var, kl_w, eps_l)
    else:
        kl_ql = _kl_ql_diag(params, data, kl_var, kl_w, eps_l)
    quh_chol = _chol_from_raw(params["quh_raw"])
    quy_chol = _chol_from_raw(params["quy_raw"])[None]  # single output dim
    kl_quh = _kl_to_inducing_prior(params["zl"], params["quh_mean"], quh_chol, kh_var, kh_w)
    kl_quy = _kl_to_inducing_prior(params["zh"], params["quy_mean"][:, None], quy_chol, ky_var, ky_w)

    qh_sd = jnp.exp(params["qh_log_sd"])
    entropy_qh = jnp.sum(0.5 * (1.0 + LOG2PI) + params["qh_log_sd"])

    qh_var_arr = qh_sd**2
    y_col = data["y"][:, None]

    l_samples = _sample_ql(params, zeta_l)  # (S, N, D_L)
    h_samples = params["qh_mean"][None] + qh_sd[None] * zeta_h  # (S, N, D_H)

    def mid_term(l_s):
        return _sparse_expected_ll(
            l_s, params["qh_mean"], qh_var_arr, params["zl"], params["quh_mean"], quh_chol, kh_var, kh_w, eps_h
        )

    def out_term(h_s):
        return _sparse_expected_ll(
            h_s, y_col, jnp.zeros_like(y_col), params["zh"], params["quy_mean"][:, None], quy_chol, ky_var, ky_w, eps_y
        )

    mid_ll = jnp.mean(jax.vmap(mid_term)(l_samples))
    out_ll = jnp.mean(jax.vmap(out_term)(h_samples))

    total = out_ll + mid_ll + entropy_qh - kl_ql - kl_quh - kl_quy
    comps = {
        "output_loglik": out_ll,
        "hidden_loglik": mid_ll,
        "entropy_qh": entropy_qh,
        "kl_ql": kl_ql,
        "kl_quh": kl_quh,
        "kl_quy": kl_quy,
    }
    return total, comps


_elbo_jit = jax.jit(_elbo_impl)


def _draw_noises(n: int, d_l: int, d_h: int, mc_samples: int, seed: int):
    key = jax.random.PRNGKey(seed)
    k1, k2 = jax.random.split(key)
    zeta_l = jax.random.normal(k1, (mc_samples, n, d_l), dtype=jnp.float64)
    zeta_h = jax.random.normal(k2, (mc_samples, n, d_h), dtype=jnp.float64)
    return zeta_l, zeta_h


def elbo_components(model: DgpModel, mc_samples: int = 8, seed: int = 0) -> dict[str, float]:
    """The ELBO and its named terms; KL terms are nonnegative by construction."""
    if mc_samples < 1:
        raise InputError("mc_samples must be >= 1")
    params = _params_from_model(model)
    data = _data_from_model(model)
    zeta_l, zeta_h = _draw_noises(model.n, model.d_l, model.d_h, mc_samples, seed)
    total, comps = _elbo_jit(params, data, zeta_l, zeta_h)
    out = {k: float(v) for k, v in comps.items()}
    out["total"] = float(total)
    return out


def elbo_estimate(model: DgpModel, mc_samples: int = 8, seed: int = 0) -> float:
    """Unbiased Monte-Carlo estimate of the evidence lower bound."""
    return elbo_components(model, mc_samples, seed)["total"]


def elbo_with_noise(model: DgpModel, zeta_l: np.ndarray, zeta_h: np.ndarray) -> float:
    """ELBO under explicit reparameterization noise (for symmetry/determinism tests)."""
    params = _params_from_model(model)
    data = _data_from_model(model)
    total, _ = _elbo_jit(params, data, jnp.asarray(zeta_l), jnp.asarray(zeta_h))
    return float(total)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class DgpTrainOptions:
    """Ascent settings.

    During the first ``warmup_frac`` of the steps the hidden-layer
    posteriors q(L), q(H) and the noises stay frozen at their inits while
    the inducing outputs and kernels learn to reproduce them, i.e. the
    warmup is two plain sparse-GP regressions. Without it the hidden
    posteriors collapse toward their priors before the upper layers can
    make use of them (the output layer starts at zero, so early on
    nothing defends the hidden geometry). All parameters train jointly
    after warmup.
    """

    step_size: float = 5e-3
    mc_samples: int = 8
    seed: int = 0
    warmup_frac: float = 0.3


def _adam_init(params):
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return zeros, jax.tree_util.tree_map(jnp.zeros_like, params)


@jax.jit
def _train_scan(params, data, key, steps_arr, step_size, warmup_steps, mc_samples_dummy):
    # mc_samples enters through the shape of the noise drawn per step, which
    # is fixed by the dummy array's leading dimension.
    s = mc_samples_dummy.shape[0]
    n, d_l = params["ql_mean"].shape
    d_h = params["qh_mean"].shape[1]
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    frozen_in_warmup = (
        "ql_mean",
        "ql_log_sd",
        "ql_raw",
        "qh_mean",
        "qh_log_sd",
        "log_eps_l",
        "log_eps_h",
        "log_eps_y",
    )

    def objective(p, zl, zh):
        total, _ = _elbo_impl(p, data, zl, zh)
        return total

    def step_fn(carry, i):
        p, m, v = carry
        sub = jax.random.fold_in(key, i)
        k1, k2 = jax.random.split(sub)
        zl = jax.random.normal(k1, (s, n, d_l), dtype=jnp.float64)
        zh = jax.random.normal(k2, (s, n, d_h), dtype=jnp.float64)
        val, grads = jax.value_and_grad(objective)(p, zl, zh)
        scale = jnp.where(i < warmup_steps, 0.0, 1.0)
        for name in frozen_in_warmup:
            if name in grads:
                grads[name] = grads[name] * scale
        t = (i + 1).astype(jnp.float64)
        m = jax.tree_util.tree_map(lambda a, g: beta1 * a + (1 - beta1) * g, m, grads)
        v = jax.tree_util.tree_map(lambda a, g: beta2 * a + (1 - beta2) * g**2, v, grads)
        p = jax.tree_util.tree_map(
            lambda w, mm, vv: w
            + step_size * (mm / (1 - beta1**t)) / (jnp.sqrt(vv / (1 - beta2**t)) + adam_eps),
            p,
            m,
            v,
        )
        return (p, m, v), val

    m0, v0 = _adam_init(params)
    (params, _, _), trace = jax.lax.scan(step_fn, (params, m0, v0), steps_arr)
    return params, trace


def train_dgp(model: DgpModel, steps: int, opts: DgpTrainOptions = DgpTrainOptions()) -> tuple[DgpModel, np.ndarray]:
    """Stochastic gradient ascent on the ELBO; returns the final model and the per-step trace.

    All variational parameters, inducing inputs, kernel hyperparameters,
    and noises are trained jointly. Deterministic for fixed options.
    """
    if steps < 0:
        raise InputError("steps must be nonnegative")
    if steps == 0:
        return model, np.zeros(0)
    if not 0.0 <= opts.warmup_frac < 1.0:
        raise InputError("warmup_frac must lie in [0, 1)")
    params = _params_from_model(model)
    data = _data_from_model(model)
    key = jax.random.PRNGKey(opts.seed)
    steps_arr = jnp.arange(steps, dtype=jnp.int32)
    dummy = jnp.zeros(opts.mc_samples)
    warmup_steps = jnp.int32(int(opts.warmup_frac * steps))
    params, trace = _train_scan(
        params, data, key, steps_arr, jnp.float64(opts.step_size), warmup_steps, dummy
    )
    trace = np.asarray(trace)
    bad = np.flatnonzero(~np.isfinite(trace))
    if bad.size:
        raise NumericsError(f"ELBO became non-finite at step {int(bad[0])}")
    return _model_with_params(model, params), trace


# ---------------------------------------------------------------------------
# Prediction


def _predict_impl(params, data, xstar, zeta_l, zeta_fh, zeta_nh, zeta_fy):
    """Pathwise predictive sampling; noise arrays fix the draws.

    Shapes: xstar (Q, 2); zeta_l (S, Q, D_L); zeta_fh/zeta_nh (S, Q, D_H);
    zeta_fy (S, Q). Returns per-point mean and variance of the sampled
    output-layer function values plus output noise.
    """
    eps_l = jnp.exp(params["log_eps_l"])
    eps_h = jnp.exp(params["log_eps_h"])
    eps_y = jnp.exp(params["log_eps_y"])
    kl_var, kl_w = jnp.exp(params["log_kl_var"]), jnp.exp(params["log_kl_w"])
    kh_var, kh_w = jnp.exp(params["log_kh_var"]), jnp.exp(params["log_kh_w"])
    ky_var, ky_w = jnp.exp(params["log_ky_var"]), jnp.exp(params["log_ky_w"])

    xu, idx, sqrt_c = data["xu"], data["idx"], data["sqrt_c"]
    u = xu.shape[0]
    s, q = zeta_fy.shape[0], xstar.shape[0]

    # First layer: condition the prior GP at x* on L ~ q(L).
    g, lm = _first_layer_prior_pieces(data, kl_var, kl_w, eps_l)
    ku_q = _ard(xstar, xu, kl_var, kl_w)  # (Q, U)
    k_star = ku_q[:, idx]  # (Q, N)
    t = jax.scipy.linalg.cho_solve((lm, True), (sqrt_c[None, :] * ku_q).T).T  # (Q, U)
    back = (t @ g) / sqrt_c[None, :]  # (Q, U)
    a = (k_star - back[:, idx]) / eps_l  # (Q, N) rows of Sigma_p^{-1} k_*
    mean_l = a @ params["ql_mean"]  # (Q, D_L)
    cond = jnp.clip(kl_var + eps_l - jnp.sum(a * k_star, axis=1), 0.0, None)  # (Q,)
    if "ql_raw" in params:
        chols = _chol_from_raw(params["ql_raw"])  # (D, N, N)
        qcov = jnp.stack([jnp.sum((a @ chols[d]) ** 2, axis=1) for d in range(chols.shape[0])], axis=1)
    else:
        qcov = (a**2) @ jnp.exp(2.0 * params["ql_log_sd"])  # (Q, D_L)
    var_l = cond[:, None] + qcov
    l_star = mean_l[None] + jnp.sqrt(var_l)[None] * zeta_l  # (S, Q, D_L)

    def sparse_layer(inputs, z, q_mean, q_chol, var, w):
        k = z.shape[0]
        kzz = _ard(z, z, var, w) + _KZZ_JITTER * var * jnp.eye(k)
        lz = jnp.linalg.cholesky(kzz)
        kxz = _ard(inputs, z, var, w)
        aa = jax.scipy.linalg.cho_solve((lz, True), kxz.T).T
        vf = jnp.clip(var - jnp.sum(aa * kxz, axis=1), 0.0, None)
        m = aa @ q_mean
        proj = jnp.einsum("nk,dkj->ndj", aa, q_chol)
        su = jnp.sum(proj**2, axis=-1)
        return m, su + vf[:, None]

    flat_l = l_star.reshape(s * q, -1)
    quh_chol = _chol_from_raw(params["quh_raw"])
    m_h, v_h = sparse_layer(flat_l, params["zl"], params["quh_mean"], quh_chol, kh_var, kh_w)
    f_h = m_h + jnp.sqrt(v_h) * zeta_fh.reshape(s * q, -1)
    h_star = f_h + jnp.sqrt(eps_h) * zeta_nh.reshape(s * q, -1)

    quy_chol = _chol_from_raw(params["quy_raw"])[None]
    m_y, v_y = sparse_layer(h_star, params["zh"], params["quy_mean"][:, None], quy_chol, ky_var, ky_w)
    f_y = (m_y[:, 0] + jnp.sqrt(v_y[:, 0]) * zeta_fy.reshape(s * q)).reshape(s, q)

    mu = jnp.mean(f_y, axis=0)
    var = jnp.var(f_y, axis=0, ddof=1) + eps_y
    return mu, var


_predict_jit = jax.jit(_predict_impl)


def dgp_predict_many(model: DgpModel, points, mc_samples: int = 200, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Pathwise MC predictive mean and variance at an (m, 2) array of points."""
    if mc_samples < 2:
        raise InputError("mc_samples must be >= 2 for a sample variance")
    pts = _as_xy(points)
    params = _params_from_model(model)
    data = _data_from_model(model)
    key = jax.random.PRNGKey(seed)
    k1, k2, k3, k4 = jax.random.split(key, 4)
    s, q = mc_samples, pts.shape[0]
    zeta_l = jax.random.normal(k1, (s, q, model.d_l), dtype=jnp.float64)
    zeta_fh = jax.random.normal(k2, (s, q, model.d_h), dtype=jnp.float64)
    zeta_nh = jax.random.normal(k3, (s, q, model.d_h), dtype=jnp.float64)
    zeta_fy = jax.random.normal(k4, (s, q), dtype=jnp.float64)
    mu, var = _predict_jit(params, data, jnp.asarray(pts), zeta_l, zeta_fh, zeta_nh, zeta_fy)
    return np.asarray(mu) + model.y_shift, np.asarray(var)


def dgp_predict(model: DgpModel, x_star, mc_samples: int = 200, seed: int = 0) -> tuple[float, float]:
    """Predictive mean and variance at a single position."""
    mu, var = dgp_predict_many(model, _as_xy(x_star), mc_samples=mc_samples, seed=seed)
    return float(mu[0]), float(var[0])


# ---------------------------------------------------------------------------
# Radio-map construction and checkpoints


@dataclass(frozen=True)
class DgpMapOptions:
    steps: int = 2000
    train: DgpTrainOptions = field(default_factory=DgpTrainOptions)
    predict_samples: int = 200
    predict_seed: int = 0
    variance_floor: float = 1e-6
    min_observations: int | None = None  # defaults to max(K_L, K_H)


def build_dgp_radio_map(
    dataset: Dataset,
    grid: GridSpec,
    config: DgpConfig | None = None,
    opts: DgpMapOptions = DgpMapOptions(),
) -> RadioMap:
    """Fit a DGP per AP and evaluate its pathwise predictive at every cell center."""
    if len(dataset) == 0:
        raise InputError("dataset is empty")
    centers = grid.cell_centers()
    means: dict[str, np.ndarray] = {}
    variances: dict[str, np.ndarray] = {}
    for ap_id in dataset.ap_ids:
        xy, y = dataset.observations_for(ap_id)
        ap_config = config if config is not None else default_dgp_config(xy, y)
        needed = opts.min_observations if opts.min_observations is not None else max(ap_config.k_l, ap_config.k_h)
        if y.size < needed:
            warnings.warn(f"skipping AP {ap_id!r}: {y.size} observation(s) < {needed}", stacklevel=2)
            continue
        model = init_dgp(xy, y, ap_config, seed=opts.train.seed)
        model, _ = train_dgp(model, opts.steps, opts.train)
        mu, var = dgp_predict_many(model, centers, mc_samples=opts.predict_samples, seed=opts.predict_seed)
        means[ap_id] = mu
        variances[ap_id] = np.maximum(var, opts.variance_floor)
    if not means:
        raise InputError("no AP had enough observations to fit")
    return RadioMap(grid=grid, means=means, variances=variances)


def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": np.asarray(arr, dtype=float).ravel().tolist()}


def _unpack(doc: dict) -> np.ndarray:
    return np.array(doc["data"], dtype=float).reshape(doc["shape"])


def model_to_json(model: DgpModel) -> str:
    """Serialize all model state as a shape-tagged JSON document."""
    arrays = {
        "x": model.x,
        "y": model.y,
        "ql_mean": model.ql_mean,
        "qh_mean": model.qh_mean,
        "qh_sd": model.qh_sd,
        "zl": model.zl,
        "zh": model.zh,
        "quh_mean": model.quh_mean,
        "quh_chol": model.quh_chol,
        "quy_mean": model.quy_mean,
        "quy_chol": model.quy_chol,
    }
    if model.full_ql:
        arrays["ql_chol"] = model.ql_chol
    else:
        arrays["ql_sd"] = model.ql_sd
    doc = {name: _pack(arr) for name, arr in arrays.items()}
    doc["scalars"] = {
        "noise_l": model.noise_l,
        "noise_h": model.noise_h,
        "noise_y": model.noise_y,
        "y_shift": model.y_shift,
    }
    for name, kern in (("kernel_l", model.kernel_l), ("kernel_h", model.kernel_h), ("kernel_y", model.kernel_y)):
        doc[name] = {"variance": kern.variance, "weights": list(kern.weights)}
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str) -> DgpModel:
    doc = json.loads(text)
    scalars = doc["scalars"]

    def kern(name):
        return ArdParams(variance=doc[name]["variance"], weights=tuple(doc[name]["weights"]))

    return DgpModel(
        x=_unpack(doc["x"]),
        y=_unpack(doc["y"]),
        ql_mean=_unpack(doc["ql_mean"]),
        ql_sd=_unpack(doc["ql_sd"]) if "ql_sd" in doc else None,
        ql_chol=_unpack(doc["ql_chol"]) if "ql_chol" in doc else None,
        qh_mean=_unpack(doc["qh_mean"]),
        qh_sd=_unpack(doc["qh_sd"]),
        zl=_unpack(doc["zl"]),
        zh=_unpack(doc["zh"]),
        quh_mean=_unpack(doc["quh_mean"]),
        quh_chol=_unpack(doc["quh_chol"]),
        quy_mean=_unpack(doc["quy_mean"]),
        quy_chol=_unpack(doc["quy_chol"]),
        kernel_l=kern("kernel_l"),
        kernel_h=kern("kernel_h"),
        kernel_y=kern("kernel_y"),
        noise_l=scalars["noise_l"],
        noise_h=scalars["noise_h"],
        noise_y=scalars["noise_y"],
        y_shift=scalars["y_shift"],
    )
