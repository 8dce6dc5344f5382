"""Evaluation statistics: log-scale MSE, paired t-tests and ICC."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgumentError

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAXITER = 10000


def mse_log(predicted, observed) -> float:
    """Mean squared difference of natural logs, pooled over every pair."""
    p = np.asarray(predicted, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    if p.shape != o.shape:
        raise InvalidArgumentError(f"shape mismatch: {p.shape} vs {o.shape}")
    if p.size == 0:
        raise InvalidArgumentError("mse_log of empty input")
    if np.any(p <= 0) or np.any(o <= 0):
        raise InvalidArgumentError("mse_log needs strictly positive values")
    return float(np.mean((np.log(p) - np.log(o)) ** 2))


# ---------------------------------------------------------------------------
# Student t distribution


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAXITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _CF_TINY if abs(d) < _CF_TINY else d
        c = 1.0 + aa / c
        c = _CF_TINY if abs(c) < _CF_TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _CF_TINY if abs(d) < _CF_TINY else d
        c = 1.0 + aa / c
        c = _CF_TINY if abs(c) < _CF_TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float, x_complement: float | None = None) -> float:
    """Regularised incomplete beta ``I_x(a, b)``.

    ``x_complement`` may carry an accurately computed ``1 - x``.
    """
    y = 1.0 - x if x_complement is None else x_complement
    if x <= 0.0:
        return 0.0
    if y <= 0.0:
        return 1.0
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log(y))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise InvalidArgumentError("degrees of freedom must be positive")
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0
    t2 = t * t
    x = df / (df + t2)
    return min(1.0, betainc_reg(0.5 * df, 0.5, x, t2 / (df + t2)))


def student_t_cdf(t: float, df: float) -> float:
    half = 0.5 * student_t_two_sided_p(t, df)
    return 1.0 - half if t > 0 else half


class TTestResult(NamedTuple):
    t: float
    p: float
    df: int
    degenerate: bool


def paired_t_test(a, b) -> TTestResult:
    """Paired t-test on ``d = a - b`` with the sample (n-1) standard deviation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgumentError("paired_t_test needs two equal-length vectors")
    n = a.size
    if n < 2:
        raise InvalidArgumentError("paired_t_test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, student_t_two_sided_p(t, df), df, False)


def paired_t_test_map(A, B) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxel-wise paired tests; ``A`` and ``B`` are ``(n_pairs, V)``.

    Returns ``t``, ``p`` and the degeneracy flags, each of length ``V``.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2:
        raise InvalidArgumentError("paired_t_test_map needs two (n, V) arrays of equal shape")
    res = [paired_t_test(A[:, v], B[:, v]) for v in range(A.shape[1])]
    return (np.array([r.t for r in res]), np.array([r.p for r in res]),
            np.array([r.degenerate for r in res], dtype=bool))


def neglogp(p, base: float = math.e) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return -np.log(p) / math.log(base)


def neglogp_threshold_counts(p_map, thresholds: Sequence[float], mask=None,
                             base: float = math.e) -> list[int]:
    """Number of voxels with ``-log(p) > tau`` for each threshold (natural log by default)."""
    p = np.asarray(p_map, dtype=np.float64)
    if mask is not None:
        p = p[np.asarray(mask, bool)]
    s = neglogp(p.reshape(-1), base)
    s = s[~np.isnan(s)]
    return [int(np.sum(s > tau)) for tau in thresholds]


# ---------------------------------------------------------------------------
# intra-class correlation


class ICCResult(NamedTuple):
    value: float
    clipped: bool
    undefined: bool


def icc(values) -> ICCResult:
    """``1 - within / total`` with mean-of-sample-variances within subjects.

    ``values`` is a sequence of per-subject sequences of per-scan values.
    The result is clipped to ``[0, 1]``; a zero total variance yields NaN.
    """
    groups = [np.asarray(g, dtype=np.float64).reshape(-1) for g in values]
    if len(groups) < 2 or any(g.size < 2 for g in groups):
        raise InvalidArgumentError("icc needs at least 2 subjects with at least 2 scans each")
    within = float(np.mean([g.var(ddof=1) for g in groups]))
    total = float(np.concatenate(groups).var(ddof=1))
    if total == 0.0:
        return ICCResult(math.nan, False, True)
    raw = 1.0 - within / total
    val = min(max(raw, 0.0), 1.0)
    return ICCResult(val, val != raw, False)


def icc_map(values) -> tuple[np.ndarray, np.ndarray]:
    """Voxel-wise ICC for an array ``(subjects, scans, V)``.

    Returns the clipped ICC (NaN where undefined) and the clip flags.
    """
    X = np.asarray(values, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] < 2 or X.shape[1] < 2:
        raise InvalidArgumentError("icc_map needs an array of shape (subjects>=2, scans>=2, V)")
    within = X.var(axis=1, ddof=1).mean(axis=0)
    total = X.reshape(-1, X.shape[2]).var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(total > 0, 1.0 - within / np.where(total > 0, total, 1.0), np.nan)
    out = np.clip(raw, 0.0, 1.0)
    clipped = ~np.isnan(raw) & (out != raw)
    return out, clipped


def icc_difference_map(original, harmonized, regions=None) -> dict:
    """ICC(harmonized) - ICC(original) per voxel with improved-fraction summaries.

    Both inputs are ``(subjects, scans, V)``.  ``regions`` optionally labels
    each voxel; summaries are then also reported per label.
    """
    O = np.asarray(original, dtype=np.float64)
    H = np.asarray(harmonized, dtype=np.float64)
    if O.shape != H.shape:
        raise InvalidArgumentError(f"manifest mismatch: original {O.shape} vs harmonized {H.shape}")
    icc_o, _ = icc_map(O)
    icc_h, _ = icc_map(H)
    diff = icc_h - icc_o

    def summary(sel):
        d = diff[sel]
        d = d[~np.isnan(d)]
        if d.size == 0:
            return {"n": 0, "improved_fraction": 0.0, "worse_fraction": 0.0,
                    "median_difference": math.nan, "all_ties": True}
        return {"n": int(d.size),
                "improved_fraction": float(np.mean(d > 0)),
                "worse_fraction": float(np.mean(d < 0)),
                "median_difference": float(np.median(d)),
                "all_ties": bool(np.all(d == 0))}

    out = {"icc_original": icc_o, "icc_harmonized": icc_h, "difference": diff,
           "summary": summary(np.ones(diff.shape, bool))}
    if regions is not None:
        lab = np.asarray(regions)
        if lab.shape != diff.shape:
            raise InvalidArgumentError("manifest mismatch: region labels do not match voxel count")
        out["regions"] = {int(r) if np.issubdtype(lab.dtype, np.integer) else r: summary(lab == r)
                          for r in np.unique(lab)}
    return out


def abs_difference_quantiles(values, reference, quantiles=(0.5, 0.75, 0.9, 0.95, 0.99)) -> dict:
    """Quantiles of ``|values - reference|`` (used for gold-standard comparisons)."""
    d = np.abs(np.asarray(values, dtype=np.float64) - np.asarray(reference, dtype=np.float64))
    d = d[~np.isnan(d)]
    return {float(q): float(np.quantile(d, q)) for q in quantiles}
