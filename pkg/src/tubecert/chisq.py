"""Chi-squared distribution helpers.

The quantile is inverted by bisection on the regularized lower incomplete
gamma function rather than through an opaque distribution object, so the
tolerance is explicit and under our control.
"""

from __future__ import annotations

from scipy.special import gammainc


def chi2_cdf(dof: int, x: float) -> float:
    """P(chi2_dof <= x) via the regularized lower incomplete gamma."""
    if x <= 0.0:
        return 0.0
    return float(gammainc(dof / 2.0, x / 2.0))


def chi2_quantile(dof: int, p: float, tol: float = 1e-10) -> float:
    """Smallest x with P(chi2_dof <= x) >= p, by bisection."""
    if not 0.0 < p < 1.0:
        raise ValueError("probability level must be in (0, 1)")
    if dof < 1:
        raise ValueError("degrees of freedom must be >= 1")
    lo, hi = 0.0, float(max(dof, 1))
    while chi2_cdf(dof, hi) < p:
        hi *= 2.0
        if hi > 1e12:
            raise ValueError("quantile bracket blew up")
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(dof, mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
