"""Gaussian log-density and Levene's test for heteroscedasticity.

The Levene statistic is the classic mean-centered form; its p-value
comes from the upper tail of the F distribution, computed here via a
continued-fraction regularized incomplete beta so the test code can
check it against independent references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, NumericsError

__all__ = ["LeveneResult", "gaussian_log_pdf", "levene_statistic", "f_upper_tail"]

_BETACF_TOL = 1e-12
_BETACF_MAX_ITERS = 500


def gaussian_log_pdf(y: float, mean: float, variance: float) -> float:
    """Log of the univariate Gaussian density N(y; mean, variance)."""
    if not variance > 0:
        raise InputError(f"variance must be positive, got {variance}")
    return -0.5 * math.log(2.0 * math.pi * variance) - (y - mean) ** 2 / (2.0 * variance)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITERS + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_TOL:
            return h
    raise NumericsError("incomplete beta continued fraction failed to converge")


def _reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # Continued fraction converges fast only for x below the split point.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_upper_tail(w: float, df1: int, df2: int) -> float:
    """P(F(df1, df2) > w), the upper tail of the F distribution."""
    if w < 0:
        raise InputError(f"F statistic must be nonnegative, got {w}")
    if df1 < 1 or df2 < 1:
        raise InputError("degrees of freedom must be >= 1")
    if math.isinf(w):
        return 0.0
    x = df2 / (df2 + df1 * w)
    return min(1.0, max(0.0, _reg_inc_beta(df2 / 2.0, df1 / 2.0, x)))


@dataclass(frozen=True)
class LeveneResult:
    """Levene's test outcome: the W statistic, its F degrees of freedom, and p-value."""

    W: float
    df1: int
    df2: int
    p_value: float


def levene_statistic(groups: Sequence[Sequence[float]]) -> LeveneResult:
    """Classic mean-centered Levene test of equal variances across groups.

    Computes absolute deviations z_ij = |y_ij - mean_i| and the one-way
    ANOVA F statistic over them. Requires at least two groups with two
    observations each; raises NumericsError when the z values carry no
    spread at all (zero denominator).
    """
    if len(groups) < 2:
        raise InputError(f"need at least 2 groups, got {len(groups)}")
    arrays = [np.asarray(g, dtype=float) for g in groups]
    for i, arr in enumerate(arrays):
        if arr.ndim != 1 or arr.size < 2:
            raise InputError(f"group {i} must hold at least 2 observations")
        if not np.all(np.isfinite(arr)):
            raise InputError(f"group {i} holds non-finite observations")

    k = len(arrays)
    n_total = sum(arr.size for arr in arrays)
    z_groups = [np.abs(arr - arr.mean()) for arr in arrays]
    z_means = np.array([z.mean() for z in z_groups])
    z_grand = sum(z.sum() for z in z_groups) / n_total

    between = sum(z.size * (zm - z_grand) ** 2 for z, zm in zip(z_groups, z_means))
    within = sum(((z - zm) ** 2).sum() for z, zm in zip(z_groups, z_means))
    if within <= 0.0:
        raise NumericsError("degenerate Levene statistic: no within-group spread in |deviations|")

    df1 = k - 1
    df2 = n_total - k
    w = (df2 / df1) * (between / within)
    return LeveneResult(W=float(w), df1=df1, df2=df2, p_value=f_upper_tail(float(w), df1, df2))
