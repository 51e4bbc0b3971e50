"""Shared test utilities: goodness-of-fit checks and tolerance helpers."""
import numpy as np
from scipy import stats

# Significance level for distributional checks. Chosen small so the suite
# stays quiet under repeated runs; seeds are fixed anyway.
GOF_ALPHA = 1e-3


def assert_gof_normal(sample, mean, sd, alpha=GOF_ALPHA):
    """Kolmogorov-Smirnov check against N(mean, sd^2)."""
    sample = np.asarray(sample, dtype=float).ravel()
    res = stats.kstest(sample, "norm", args=(mean, sd))
    assert res.pvalue > alpha, (
        f"KS rejects N({mean}, {sd}^2): p={res.pvalue:.2e}, n={sample.size}")


def assert_gof_cdf(sample, cdf, alpha=GOF_ALPHA):
    """Kolmogorov-Smirnov check against an arbitrary scalar CDF."""
    sample = np.asarray(sample, dtype=float).ravel()
    res = stats.kstest(sample, cdf)
    assert res.pvalue > alpha, f"KS rejects target CDF: p={res.pvalue:.2e}"


def assert_within_se(value, expected, se, k=3.0, label=""):
    lo, hi = expected - k * se, expected + k * se
    assert lo <= value <= hi, (
        f"{label or 'value'} {value} outside {expected} +/- {k}*{se}")


def binomial_se(p, n):
    return float(np.sqrt(p * (1.0 - p) / n))
