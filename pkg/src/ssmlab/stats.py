"""Statistical machinery: bootstrap/Wilson intervals, permutation tests,
Holm-Bonferroni step-down correction, and log-log OLS exponent fits.

All randomness flows through counter-based generators (Philox) keyed by
explicit 64-bit seeds, so resampling is reproducible and parallelizable by
mixing stream indices into the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sp_stats

__all__ = [
    "InsufficientDataError",
    "CiResult",
    "OlsFit",
    "rng_for",
    "wilson_interval",
    "bootstrap_ci",
    "permutation_test",
    "holm_bonferroni",
    "loglog_ols",
    "DEFAULT_SEEDS",
]

DEFAULT_SEEDS = (42, 123, 456)


class InsufficientDataError(ValueError):
    """Too few samples for the requested statistic."""


@dataclass(frozen=True)
class CiResult:
    point: float
    lower: float
    upper: float
    method: str
    n_resamples: int = 0

    def __post_init__(self):
        if not self.lower <= self.point <= self.upper:
            raise ValueError("interval must contain the point estimate")


@dataclass(frozen=True)
class OlsFit:
    slope: float
    intercept: float
    r_squared: float
    slope_ci: tuple


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for (seed, stream...) so chunks stay independent."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def wilson_interval(successes: int, total: int, level: float = 0.95):
    """Closed-form Wilson score interval for a binomial proportion."""
    if total < 1:
        raise InsufficientDataError("need at least one trial")
    z = sp_stats.norm.ppf(0.5 + level / 2.0)
    p_hat = successes / total
    denom = 1.0 + z * z / total
    center = (p_hat + z * z / (2 * total)) / denom
    half = z * np.sqrt(p_hat * (1 - p_hat) / total + z * z / (4 * total * total)) / denom
    return float(center - half), float(center + half)


def _is_binary(samples: np.ndarray) -> bool:
    return np.all((samples == 0) | (samples == 1))


def bootstrap_ci(samples, level: float = 0.95, n_resamples: int = 10_000,
                 seed: int = 0) -> CiResult:
    """Interval for the mean: Wilson for 0/1 proportions, else percentile bootstrap.

    The method is auto-selected by sample type and recorded on the result so
    every reported interval is auditable.
    """
    x = np.asarray(list(samples), dtype=np.float64)
    if x.size < 2:
        raise InsufficientDataError("need n >= 2 samples")
    point = float(x.mean())
    if _is_binary(x):
        lo, hi = wilson_interval(int(x.sum()), x.size, level)
        # Wilson contains p_hat by construction; clamp float dust
        return CiResult(point=point, lower=min(lo, point), upper=max(hi, point),
                        method="wilson", n_resamples=0)
    rng = rng_for(seed, 0xB007)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return CiResult(point=point, lower=min(float(lo), point),
                    upper=max(float(hi), point),
                    method="percentile-bootstrap", n_resamples=n_resamples)


def permutation_test(group_a, group_b, n_perm: int = 10_000, seed: int = 0) -> float:
    """Two-sided permutation test on the difference of means.

    p = (1 + #{|perm diff| >= |observed|}) / (n_perm + 1); the add-one makes
    the p-value valid (super-uniform under the null).
    """
    a = np.asarray(list(group_a), dtype=np.float64)
    b = np.asarray(list(group_b), dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be non-empty")
    observed = abs(a.mean() - b.mean())
    # canonical pooled order and split size keep p exactly label-symmetric
    pooled = np.sort(np.concatenate([a, b]))
    n_first = min(a.size, b.size)
    rng = rng_for(seed, 0x9E12)
    count = 0
    chunk = max(1, min(n_perm, 200_000 // max(pooled.size, 1)))
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        perms = rng.permuted(np.tile(pooled, (m, 1)), axis=1)
        diffs = perms[:, :n_first].mean(axis=1) - perms[:, n_first:].mean(axis=1)
        count += int(np.sum(np.abs(diffs) >= observed - 1e-15))
        done += m
    return (1 + count) / (n_perm + 1)


def holm_bonferroni(p_values, alpha: float = 0.05):
    """Step-down Holm correction; returns per-hypothesis reject flags."""
    p = np.asarray(list(p_values), dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    reject = np.zeros(m, dtype=bool)
    for rank, idx in enumerate(order):
        if p[idx] <= alpha / (m - rank):
            reject[idx] = True
        else:
            break
    return [bool(r) for r in reject]


def loglog_ols(pairs, level: float = 0.95) -> OlsFit:
    """OLS of ln(count) on ln(N) with an asymptotic CI on the slope."""
    pts = [(float(n), float(c)) for n, c in pairs]
    if len(pts) < 2:
        raise InsufficientDataError("need at least two points")
    arr = np.asarray(pts)
    if np.any(arr <= 0):
        raise ValueError("log-log regression needs strictly positive values")
    x = np.log(arr[:, 0])
    y = np.log(arr[:, 1])
    sxx = np.sum((x - x.mean()) ** 2)
    if sxx == 0:
        raise ValueError("degenerate regressor: all N identical")
    slope = float(np.sum((x - x.mean()) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    df = len(pts) - 2
    if df > 0 and ss_res > 0:
        se = np.sqrt(ss_res / df / sxx)
        t = sp_stats.t.ppf(0.5 + level / 2.0, df)
        ci = (slope - t * se, slope + t * se)
    else:
        ci = (slope, slope)
    return OlsFit(slope=slope, intercept=intercept, r_squared=float(r2),
                  slope_ci=(float(ci[0]), float(ci[1])))
