"""Special functions and small dense SPD linear algebra.

Everything here is self-contained: the regularized incomplete gamma function
(series and continued-fraction branches), chi-square CDF and quantile, the
standard normal quantile, and Cholesky-based solves for symmetric positive
definite matrices. numpy is used for array storage and elementwise
arithmetic only; no external special-function or factorization library is
involved.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import AccuracyError, DomainError, SingularMatrix

__all__ = [
    "reg_lower_gamma",
    "chi2_cdf",
    "chi2_pdf",
    "chi2_quantile",
    "normal_cdf",
    "normal_pdf",
    "normal_quantile",
    "cholesky",
    "solve_lower",
    "solve_cholesky",
    "solve_spd",
    "quad_form_inv",
    "solve_lower_many",
    "quad_form_inv_many",
]

_MAX_ITER = 500
_CONVERGENCE = 1e-14
_TINY = 1e-300


def reg_lower_gamma(s: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(s, x).

    Uses the power series for x < s + 1 and the Lentz continued fraction for
    the complement otherwise; both iterate to a 1e-14 term-convergence cutoff.
    """
    if not (math.isfinite(s) and math.isfinite(x)):
        raise DomainError(f"reg_lower_gamma requires finite arguments, got s={s}, x={x}")
    if s <= 0:
        raise DomainError(f"reg_lower_gamma requires s > 0, got {s}")
    if x < 0:
        raise DomainError(f"reg_lower_gamma requires x >= 0, got {x}")
    if x == 0.0:
        return 0.0

    log_prefactor = s * math.log(x) - x - math.lgamma(s)
    if x < s + 1.0:
        # Series: P(s,x) = x^s e^-x / Gamma(s) * sum_n x^n / (s (s+1) ... (s+n))
        ap = s
        term = 1.0 / s
        total = term
        for _ in range(_MAX_ITER):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _CONVERGENCE:
                return min(1.0, total * math.exp(log_prefactor))
        raise AccuracyError(f"incomplete gamma series did not converge for s={s}, x={x}")

    # Continued fraction for the upper tail Q(s,x), modified Lentz algorithm.
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CONVERGENCE:
            q = math.exp(log_prefactor) * h
            return max(0.0, 1.0 - q)
    raise AccuracyError(f"incomplete gamma continued fraction did not converge for s={s}, x={x}")


def chi2_cdf(df: int, x: float) -> float:
    """CDF of the chi-square distribution with ``df`` degrees of freedom."""
    if df < 1 or int(df) != df:
        raise DomainError(f"chi2_cdf requires integer df >= 1, got {df}")
    if x == math.inf:
        return 1.0
    return reg_lower_gamma(df / 2.0, x / 2.0)


def chi2_pdf(df: int, x: float) -> float:
    """Density of the chi-square distribution with ``df`` degrees of freedom."""
    if df < 1 or int(df) != df:
        raise DomainError(f"chi2_pdf requires integer df >= 1, got {df}")
    if x < 0:
        return 0.0
    if x == 0.0:
        if df == 1:
            return math.inf
        return 0.5 if df == 2 else 0.0
    half = df / 2.0
    return math.exp((half - 1.0) * math.log(x) - x / 2.0 - half * math.log(2.0) - math.lgamma(half))


def chi2_quantile(df: int, prob: float) -> float:
    """Inverse of chi2_cdf: x with chi2_cdf(df, x) = prob to 1e-12 or better.

    Wilson-Hilferty starting point, then Newton steps safeguarded by a
    bracketing interval maintained from the CDF signs.
    """
    if df < 1 or int(df) != df:
        raise DomainError(f"chi2_quantile requires integer df >= 1, got {df}")
    if not (0.0 < prob < 1.0):
        raise DomainError(f"chi2_quantile requires prob in (0, 1), got {prob}")

    lo = 0.0
    hi = df + 10.0 * math.sqrt(2.0 * df) + 10.0
    for _ in range(200):
        if chi2_cdf(df, hi) > prob:
            break
        lo = hi
        hi *= 2.0
    else:
        raise AccuracyError(f"chi2_quantile failed to bracket prob={prob} for df={df}")

    # Wilson-Hilferty normal approximation as the initial guess.
    z = normal_quantile(prob)
    t = 1.0 - 2.0 / (9.0 * df) + z * math.sqrt(2.0 / (9.0 * df))
    x = df * t * t * t if t > 0 else 0.5 * (lo + hi)
    if not (lo < x < hi):
        x = 0.5 * (lo + hi)

    for _ in range(200):
        f = chi2_cdf(df, x) - prob
        if f > 0:
            hi = x
        else:
            lo = x
        pdf = chi2_pdf(df, x)
        if pdf > 0 and math.isfinite(pdf):
            step = f / pdf
            x_new = x - step
            if not (lo < x_new < hi):
                x_new = 0.5 * (lo + hi)
        else:
            x_new = 0.5 * (lo + hi)
        converged = abs(f) <= 1e-12 and abs(x_new - x) <= 1e-12 * (1.0 + x)
        x = x_new
        if converged:
            return x
    if abs(chi2_cdf(df, x) - prob) <= 1e-10:
        return x
    raise AccuracyError(f"chi2_quantile did not converge for df={df}, prob={prob}")


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(z: float) -> float:
    """Standard normal CDF via erfc, accurate across both tails."""
    return 0.5 * math.erfc(-z / _SQRT2)


def normal_pdf(z: float) -> float:
    """Standard normal density."""
    return _INV_SQRT_2PI * math.exp(-0.5 * z * z)


# Acklam's rational approximation for the lower-tail normal quantile.
_ACKLAM_A = (
    -3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
    1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00,
)
_ACKLAM_B = (
    -5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
    6.680131188771972e+01, -1.328068155288572e+01,
)
_ACKLAM_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
    -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00,
)
_ACKLAM_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
    3.754408661907416e+00,
)
_ACKLAM_SPLIT = 0.02425


def _normal_quantile_lower(p: float) -> float:
    """Quantile for p in (0, 0.5]: rational approximation plus Newton polish."""
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    if p < _ACKLAM_SPLIT:
        q = math.sqrt(-2.0 * math.log(p))
        z = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    else:
        q = p - 0.5
        r = q * q
        z = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / (
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
        )
    for _ in range(4):
        err = normal_cdf(z) - p
        pdf = normal_pdf(z)
        if pdf <= 0.0:
            break
        z -= err / pdf
        if abs(err) <= 1e-16 * max(p, 1e-10):
            break
    return z


def normal_quantile(prob: float) -> float:
    """Standard normal quantile with |Phi(z) - prob| <= 1e-12.

    Computed from the smaller tail, so normal_quantile(p) and
    normal_quantile(1 - p) are negatives of each other.
    """
    if not (0.0 < prob < 1.0):
        raise DomainError(f"normal_quantile requires prob in (0, 1), got {prob}")
    if prob == 0.5:
        return 0.0
    if prob > 0.5:
        return -_normal_quantile_lower(1.0 - prob)
    return _normal_quantile_lower(prob)


def _as_square_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("matrix has non-finite entries")
    return a


def cholesky(m) -> np.ndarray:
    """Lower-triangular L with L L^T = m for a symmetric positive definite m.

    Raises SingularMatrix with the failing pivot index when a pivot is not
    strictly positive; raises DomainError when m is not symmetric to 1e-12
    relative tolerance.
    """
    a = _as_square_matrix(m)
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if a.size and float(np.max(np.abs(a - a.T))) > 1e-12 * (1.0 + scale):
        raise DomainError("matrix is not symmetric")
    n = a.shape[0]
    lower = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - float(lower[j, :j] @ lower[j, :j])
        if not (d > 0.0 and math.isfinite(d)):
            raise SingularMatrix(j)
        ljj = math.sqrt(d)
        lower[j, j] = ljj
        if j + 1 < n:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / ljj
    return lower


def solve_lower(lower: np.ndarray, b) -> np.ndarray:
    """Solve L y = b by forward substitution for lower-triangular L."""
    y = np.asarray(b, dtype=float).copy()
    n = lower.shape[0]
    for i in range(n):
        y[i] = (y[i] - lower[i, :i] @ y[:i]) / lower[i, i]
    return y


def _solve_upper_from_lower(lower: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Solve L^T x = y by backward substitution."""
    x = y.copy()
    n = lower.shape[0]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - lower[i + 1 :, i] @ x[i + 1 :]) / lower[i, i]
    return x


def solve_cholesky(lower: np.ndarray, rhs) -> np.ndarray:
    """Solve (L L^T) x = rhs given a precomputed Cholesky factor L."""
    return _solve_upper_from_lower(lower, solve_lower(lower, rhs))


def solve_spd(m, rhs) -> np.ndarray:
    """Solve m x = rhs for symmetric positive definite m."""
    return solve_cholesky(cholesky(m), rhs)


def quad_form_inv(lower: np.ndarray, v) -> float:
    """Quadratic form v^T m^{-1} v given the Cholesky factor L of m.

    Computed as ||L^{-1} v||^2 with one forward solve; no explicit inverse.
    """
    y = solve_lower(lower, v)
    return float(y @ y)


def solve_lower_many(lower: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Forward-substitute many right-hand sides at once.

    ``rows`` has shape (m, n); returns Y with L Y[i] = rows[i] rowwise.
    """
    rows = np.asarray(rows, dtype=float)
    y = np.empty_like(rows)
    n = lower.shape[0]
    for i in range(n):
        y[:, i] = (rows[:, i] - y[:, :i] @ lower[i, :i]) / lower[i, i]
    return y


def quad_form_inv_many(lower: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Rowwise quadratic forms v^T m^{-1} v for a batch of vectors."""
    y = solve_lower_many(lower, rows)
    return np.einsum("ij,ij->i", y, y)
