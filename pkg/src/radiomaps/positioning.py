"""One-shot MAP localization on a grid from per-AP Gaussian radio maps.

All probability arithmetic happens in log-space with log-sum-exp
normalization; APs heard by the device but absent from the radio map
contribute nothing to the likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from .core import GridSpec, Position, RadioMap, cell_center
from .errors import InputError

__all__ = ["PosteriorGrid", "Estimate", "log_likelihood_grid", "posterior_grid", "map_estimate"]


@dataclass(frozen=True)
class PosteriorGrid:
    """Normalized location posterior over the grid cells (row-major)."""

    grid: GridSpec
    log_unnorm: np.ndarray
    prob: np.ndarray


@dataclass(frozen=True)
class Estimate:
    """MAP cell, its center position, and the posterior mass it carries."""

    cell: tuple[int, int]
    position: Position
    posterior_mass: float


def log_likelihood_grid(obs: Mapping[str, float], radio_map: RadioMap) -> np.ndarray:
    """Per-cell log-likelihood of the observation vector.

    Sums, in sorted AP order, the Gaussian log-density of each heard AP
    under the map's per-cell mean and variance. Raises when no heard AP
    is present in the map.
    """
    if not obs:
        raise InputError("observation map is empty")
    usable = sorted(ap for ap in obs if ap in radio_map.means)
    if not usable:
        raise InputError("none of the observed APs appear in the radio map")
    total = np.zeros(radio_map.grid.n_cells)
    for ap_id in usable:
        y = float(obs[ap_id])
        mean = radio_map.means[ap_id]
        var = radio_map.variances[ap_id]
        total += -0.5 * np.log(2.0 * np.pi * var) - (y - mean) ** 2 / (2.0 * var)
    return total


def posterior_grid(
    obs: Mapping[str, float], radio_map: RadioMap, prior: np.ndarray | None = None
) -> PosteriorGrid:
    """Posterior over cells given one observation vector and an optional prior.

    The prior defaults to uniform; a supplied prior must be nonnegative
    with positive sum (cells with zero prior keep zero posterior).
    """
    log_lik = log_likelihood_grid(obs, radio_map)
    n = radio_map.grid.n_cells
    if prior is None:
        log_prior = np.zeros(n)
    else:
        prior = np.asarray(prior, dtype=float)
        if prior.shape != (n,):
            raise InputError(f"prior must have length {n}, got shape {prior.shape}")
        if np.any(prior < 0) or not np.any(prior > 0):
            raise InputError("prior must be nonnegative with positive sum")
        with np.errstate(divide="ignore"):
            log_prior = np.log(prior)
    log_unnorm = log_lik + log_prior
    prob = np.exp(log_unnorm - logsumexp(log_unnorm))
    prob /= prob.sum()
    return PosteriorGrid(grid=radio_map.grid, log_unnorm=log_unnorm, prob=prob)


def map_estimate(posterior: PosteriorGrid) -> Estimate:
    """Argmax cell of the posterior; ties break to the lowest row-major index."""
    idx = int(np.argmax(posterior.prob))
    row, col = divmod(idx, posterior.grid.cols)
    return Estimate(
        cell=(row, col),
        position=cell_center(posterior.grid, row, col),
        posterior_mass=float(posterior.prob[idx]),
    )
