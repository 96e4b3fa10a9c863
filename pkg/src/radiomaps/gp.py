"""Exact Gaussian-process regression per AP and GP radio-map construction.

The model is a zero-mean GP with an isotropic squared-exponential kernel
plus i.i.d. Gaussian observation noise. Hyperparameters are learned by
maximizing the log marginal likelihood with its analytic gradient,
optimized in log-space by a full-batch Adam ascent.

Survey datasets often repeat positions (many fingerprints per grid
cell). The likelihood and its gradient are therefore evaluated through
an exact compression onto the unique positions: with N inputs of which
U are unique, K(X) = P K_u P^T for the indicator P, and every quantity
reduces to U-sized linear algebra via the Woodbury identity. The result
is bit-for-bit the same likelihood, at O(U^3) instead of O(N^3) per
optimizer step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .core import Dataset, GridSpec, Position, RadioMap
from .errors import InputError, NumericsError

__all__ = [
    "GpHyperparams",
    "ArdParams",
    "TrainedGp",
    "GpFitOptions",
    "GpMapOptions",
    "se_kernel",
    "ard_kernel",
    "gram",
    "log_marginal_likelihood",
    "lml_gradient",
    "fit_gp",
    "gp_predict",
    "default_hyperparams",
    "build_gp_radio_map",
]

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GpHyperparams:
    """SE-kernel hyperparameters: length scale, signal variance, noise variance."""

    length_scale: float
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        for name in ("length_scale", "signal_variance", "noise_variance"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise InputError(f"{name} must be positive and finite, got {value}")

    def log_vector(self) -> np.ndarray:
        return np.log([self.length_scale, self.signal_variance, self.noise_variance])

    @classmethod
    def from_log_vector(cls, v: np.ndarray) -> "GpHyperparams":
        l, sf2, sn2 = np.exp(np.asarray(v, dtype=float))
        return cls(length_scale=float(l), signal_variance=float(sf2), noise_variance=float(sn2))


@dataclass(frozen=True)
class ArdParams:
    """ARD kernel parameters: signal variance and one inverse-squared-length weight per dimension."""

    variance: float
    weights: tuple[float, ...]

    def __post_init__(self):
        if not (self.variance > 0 and math.isfinite(self.variance)):
            raise InputError(f"variance must be positive and finite, got {self.variance}")
        weights = tuple(float(w) for w in self.weights)
        if not weights or any(not (w > 0 and math.isfinite(w)) for w in weights):
            raise InputError("weights must be non-empty and strictly positive")
        object.__setattr__(self, "weights", weights)


def _as_xy(points) -> np.ndarray:
    """Coerce positions (Position objects, pairs, or an (n, 2) array) to an (n, 2) float array."""
    if isinstance(points, Position):
        return points.as_array().reshape(1, 2)
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=float)
    else:
        rows = [p.as_array() if isinstance(p, Position) else np.asarray(p, dtype=float) for p in points]
        arr = np.stack(rows) if rows else np.zeros((0, 2))
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError(f"expected (n, 2) positions, got shape {arr.shape}")
    return arr


def se_kernel(p, q, theta: GpHyperparams) -> float:
    """Squared-exponential covariance between two positions."""
    pv = _as_xy(p)[0]
    qv = _as_xy(q)[0]
    d2 = float(np.sum((pv - qv) ** 2))
    return theta.signal_variance * math.exp(-d2 / (2.0 * theta.length_scale**2))


def ard_kernel(p: Sequence[float], q: Sequence[float], params: ArdParams) -> float:
    """ARD squared-exponential covariance with per-dimension weights."""
    pv = np.asarray(p, dtype=float).ravel()
    qv = np.asarray(q, dtype=float).ravel()
    w = np.asarray(params.weights, dtype=float)
    if pv.shape != qv.shape or pv.shape != w.shape:
        raise InputError(f"dimension mismatch: p {pv.shape}, q {qv.shape}, weights {w.shape}")
    return params.variance * math.exp(-0.5 * float(np.sum(w * (pv - qv) ** 2)))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between rows of a and b."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _se_matrix(a: np.ndarray, b: np.ndarray, theta: GpHyperparams) -> np.ndarray:
    return theta.signal_variance * np.exp(-_sqdist(a, b) / (2.0 * theta.length_scale**2))


def gram(X, theta: GpHyperparams, jitter: float = 0.0) -> np.ndarray:
    """Covariance matrix of noisy observations: K(X) + (noise + jitter) * I."""
    xy = _as_xy(X)
    if xy.shape[0] < 1:
        raise InputError("need at least one input")
    if jitter < 0:
        raise InputError(f"jitter must be nonnegative, got {jitter}")
    K = _se_matrix(xy, xy, theta)
    K[np.diag_indices_from(K)] += theta.noise_variance + jitter
    return K


_JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


def _chol_with_ladder(build, mean_diag: float):
    """Try Cholesky over the jitter ladder; ``build(jitter)`` returns the matrix."""
    for scale in _JITTER_LADDER:
        jitter = scale * mean_diag
        try:
            return cholesky(build(jitter), lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericsError("Cholesky failed even at the top of the jitter ladder")


@dataclass(frozen=True)
class _Compressed:
    """Sufficient statistics of (X, Y) over unique positions."""

    xu: np.ndarray  # (U, 2) unique positions
    sqrt_c: np.ndarray  # (U,) sqrt of multiplicities
    y_tilde: np.ndarray  # (U,) group sums of Y divided by sqrt_c
    yty: float
    n: int

    @property
    def u(self) -> int:
        return self.xu.shape[0]


def _compress(xy: np.ndarray, y: np.ndarray) -> _Compressed:
    xu, idx, counts = np.unique(xy, axis=0, return_inverse=True, return_counts=True)
    sqrt_c = np.sqrt(counts.astype(float))
    sums = np.bincount(idx, weights=y, minlength=xu.shape[0])
    return _Compressed(
        xu=xu,
        sqrt_c=sqrt_c,
        y_tilde=sums / sqrt_c,
        yty=float(y @ y),
        n=xy.shape[0],
    )


def _lml_and_grad(stats: _Compressed, theta: GpHyperparams) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient in (log l, log sf2, log sn2).

    Works on the unique-position compression; exact for the full data.
    """
    d2 = _sqdist(stats.xu, stats.xu)
    ku = theta.signal_variance * np.exp(-d2 / (2.0 * theta.length_scale**2))
    g = stats.sqrt_c[:, None] * ku * stats.sqrt_c[None, :]
    mean_diag = theta.signal_variance + theta.noise_variance

    def build(jitter):
        m = g.copy()
        m[np.diag_indices_from(m)] += theta.noise_variance + jitter
        return m

    lm, jitter = _chol_with_ladder(build, mean_diag)
    s2 = theta.noise_variance + jitter
    n, u = stats.n, stats.u

    b = cho_solve((lm, True), stats.y_tilde)
    gb = g @ b
    quad = (stats.yty - stats.y_tilde @ gb) / s2
    logdet = (n - u) * math.log(s2) + 2.0 * np.sum(np.log(np.diag(lm)))
    lml = -0.5 * quad - 0.5 * logdet - 0.5 * n * LOG2PI

    minv = cho_solve((lm, True), np.eye(u))
    r = stats.sqrt_c[:, None] * minv * stats.sqrt_c[None, :]
    beta = stats.sqrt_c * b

    dku_logl = ku * (d2 / theta.length_scale**2)
    grad_logl = 0.5 * (beta @ dku_logl @ beta - np.sum(r * dku_logl))
    grad_logsf2 = 0.5 * (beta @ ku @ beta - np.sum(r * ku))
    alpha_sq = (stats.yty - 2.0 * stats.y_tilde @ gb + gb @ gb) / s2**2
    trace_inv = (n - np.sum(g * minv)) / s2
    grad_logsn2 = 0.5 * theta.noise_variance * (alpha_sq - trace_inv)

    return float(lml), np.array([grad_logl, grad_logsf2, grad_logsn2])


def _validate_xy_y(X, Y) -> tuple[np.ndarray, np.ndarray]:
    xy = _as_xy(X)
    y = np.asarray(Y, dtype=float).ravel()
    if xy.shape[0] != y.shape[0]:
        raise InputError(f"X has {xy.shape[0]} rows but Y has {y.shape[0]} values")
    if xy.shape[0] < 1:
        raise InputError("need at least one observation")
    if not (np.all(np.isfinite(xy)) and np.all(np.isfinite(y))):
        raise InputError("inputs must be finite")
    return xy, y


def log_marginal_likelihood(X, Y, theta: GpHyperparams) -> float:
    """Log marginal likelihood of Y under the GP prior at hyperparameters theta."""
    xy, y = _validate_xy_y(X, Y)
    lml, _ = _lml_and_grad(_compress(xy, y), theta)
    return lml


def lml_gradient(X, Y, theta: GpHyperparams) -> np.ndarray:
    """Gradient of the log marginal likelihood over (log l, log sf2, log sn2)."""
    xy, y = _validate_xy_y(X, Y)
    _, grad = _lml_and_grad(_compress(xy, y), theta)
    return grad


@dataclass(frozen=True)
class TrainedGp:
    """A fitted GP: training data, hyperparameters, and Cholesky solve state."""

    X: np.ndarray  # (N, 2)
    Y: np.ndarray  # (N,)
    theta: GpHyperparams
    chol: np.ndarray  # lower-triangular factor of K(X) + sn2*I (plus any ladder jitter)
    alpha: np.ndarray  # (K(X) + sn2*I)^{-1} Y

    @property
    def lml(self) -> float:
        return log_marginal_likelihood(self.X, self.Y, self.theta)


@dataclass(frozen=True)
class GpFitOptions:
    """Adam-ascent settings for hyperparameter optimization."""

    max_iters: int = 500
    tol: float = 1e-6
    step: float = 0.05


def default_hyperparams(X, Y) -> GpHyperparams:
    """Scale-aware initialization: l from the input bounding box, variances from Y."""
    xy, y = _validate_xy_y(X, Y)
    extent = xy.max(axis=0) - xy.min(axis=0)
    diag = float(np.hypot(extent[0], extent[1]))
    var_y = float(np.var(y))
    return GpHyperparams(
        length_scale=max(diag / 4.0, 1e-2),
        signal_variance=max(var_y, 1e-2),
        noise_variance=max(0.1 * var_y, 1e-3),
    )


def _finalize(xy: np.ndarray, y: np.ndarray, theta: GpHyperparams) -> TrainedGp:
    mean_diag = theta.signal_variance + theta.noise_variance

    def build(jitter):
        return gram(xy, theta, jitter=jitter)

    chol, _ = _chol_with_ladder(build, mean_diag)
    alpha = cho_solve((chol, True), y)
    return TrainedGp(X=xy, Y=y, theta=theta, chol=chol, alpha=alpha)


def fit_gp(X, Y, theta0: GpHyperparams | None = None, opts: GpFitOptions = GpFitOptions()) -> TrainedGp:
    """Maximize the log marginal likelihood from theta0 and return the best iterate.

    Full-batch Adam ascent in log-parameter space; stops at max_iters or
    when the gradient norm falls below opts.tol.
    """
    xy, y = _validate_xy_y(X, Y)
    if xy.shape[0] < 2:
        raise InputError("fitting needs at least 2 observations")
    if theta0 is None:
        theta0 = default_hyperparams(xy, y)
    stats = _compress(xy, y)

    log_theta = theta0.log_vector()
    lml, grad = _lml_and_grad(stats, theta0)
    if not math.isfinite(lml):
        raise InputError("log marginal likelihood is not finite at theta0")

    best_lml, best_log_theta = lml, log_theta.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for it in range(1, opts.max_iters + 1):
        if np.linalg.norm(grad) < opts.tol:
            break
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad**2
        m_hat = m / (1.0 - beta1**it)
        v_hat = v / (1.0 - beta2**it)
        log_theta = log_theta + opts.step * m_hat / (np.sqrt(v_hat) + eps)
        lml, grad = _lml_and_grad(stats, GpHyperparams.from_log_vector(log_theta))
        if math.isfinite(lml) and lml > best_lml:
            best_lml, best_log_theta = lml, log_theta.copy()

    return _finalize(xy, y, GpHyperparams.from_log_vector(best_log_theta))


def gp_predict(model: TrainedGp, x_star) -> tuple[float, float, float]:
    """Predictive mean, latent variance, and total (latent + noise) variance at one point."""
    mu, var_latent, var_total = gp_predict_many(model, _as_xy(x_star))
    return float(mu[0]), float(var_latent[0]), float(var_total[0])


def gp_predict_many(model: TrainedGp, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized predictive equations at an (m, 2) array of query points."""
    pts = _as_xy(points)
    k_star = _se_matrix(pts, model.X, model.theta)  # (m, N)
    mu = k_star @ model.alpha
    vs = solve_triangular(model.chol, k_star.T, lower=True)  # (N, m)
    var_latent = model.theta.signal_variance - np.einsum("ij,ij->j", vs, vs)
    var_latent = np.clip(var_latent, 0.0, model.theta.signal_variance)
    return mu, var_latent, var_latent + model.theta.noise_variance


@dataclass(frozen=True)
class GpMapOptions:
    """Radio-map construction settings."""

    fit: GpFitOptions = field(default_factory=GpFitOptions)
    variance_floor: float = 1e-6
    rssi_shift: float = 0.0  # added to RSSI before fitting, removed from predicted means
    min_observations: int = 2


def build_gp_radio_map(
    dataset: Dataset, grid: GridSpec, opts: GpMapOptions = GpMapOptions()
) -> tuple[RadioMap, Mapping[str, GpHyperparams]]:
    """Fit one GP per AP and evaluate it at every cell center.

    APs with fewer than ``opts.min_observations`` readings are skipped
    with a warning. Stored variances are the total predictive variances,
    floored at ``opts.variance_floor``.
    """
    if len(dataset) == 0:
        raise InputError("dataset is empty")
    centers = grid.cell_centers()
    means: dict[str, np.ndarray] = {}
    variances: dict[str, np.ndarray] = {}
    hyper: dict[str, GpHyperparams] = {}
    export: dict[str, dict[str, float]] = {}
    for ap_id in dataset.ap_ids:
        xy, y = dataset.observations_for(ap_id)
        if y.size < opts.min_observations:
            warnings.warn(f"skipping AP {ap_id!r}: only {y.size} observation(s)", stacklevel=2)
            continue
        model = fit_gp(xy, y + opts.rssi_shift, opts=opts.fit)
        mu, _, var_total = gp_predict_many(model, centers)
        means[ap_id] = mu - opts.rssi_shift
        variances[ap_id] = np.maximum(var_total, opts.variance_floor)
        hyper[ap_id] = model.theta
        export[ap_id] = {
            "l": model.theta.length_scale,
            "sf2": model.theta.signal_variance,
            "sn2": model.theta.noise_variance,
        }
    if not means:
        raise InputError("no AP had enough observations to fit")
    radio_map = RadioMap(grid=grid, means=means, variances=variances, hyperparams=export)
    return radio_map, hyper
