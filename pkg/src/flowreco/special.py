"""Special functions and bracketed root finding.

Thin, contract-checked wrappers around scipy.special for the classical
functions, plus a safeguarded monotone root finder (bisection with optional
Newton refinement) used to invert the radial sphere transforms and the
kernel flows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special as _sp


class DomainError(ValueError):
    """Argument outside the supported domain."""


class BracketError(ValueError):
    """Root bracket endpoints do not straddle zero."""


class ConvergenceError(RuntimeError):
    """Iteration budget exhausted before reaching the requested tolerance."""


def _check_finite(x, name: str):
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} must be finite")


def erf(x):
    """Error function; odd, strictly increasing, range (-1, 1)."""
    _check_finite(x, "x")
    out = _sp.erf(x)
    return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out


def erf_inv(p):
    """Inverse error function on (-1, 1)."""
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(np.abs(p_arr) >= 1.0):
        raise DomainError("erf_inv requires |p| < 1")
    out = _sp.erfinv(p_arr)
    return float(out) if np.ndim(p) == 0 else out


def reg_upper_gamma(a: float, x):
    """Regularized upper incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a)."""
    if a <= 0:
        raise DomainError("reg_upper_gamma requires a > 0")
    x_arr = np.asarray(x, dtype=np.float64)
    if np.any(x_arr < 0):
        raise DomainError("reg_upper_gamma requires x >= 0")
    out = _sp.gammaincc(a, x_arr)
    return float(out) if np.ndim(x) == 0 else out


def gauss_2f1(a: float, b: float, c: float, x) -> float:
    """Gauss hypergeometric function 2F1(a, b; c; x) for x <= 0."""
    if c <= 0 and float(c).is_integer():
        raise DomainError("gauss_2f1 undefined for non-positive integer c")
    x_arr = np.asarray(x, dtype=np.float64)
    if np.any(x_arr > 0):
        raise DomainError("gauss_2f1 supports x <= 0 only")
    out = _sp.hyp2f1(a, b, c, x_arr)
    return float(out) if np.ndim(x) == 0 else out


def chi2_cdf(n: int, lam):
    """P(chi^2_n <= lam) = 1 - Q(n/2, lam/2)."""
    if n < 1 or int(n) != n:
        raise DomainError("chi2_cdf requires a positive integer dof")
    lam_arr = np.asarray(lam, dtype=np.float64)
    if np.any(lam_arr < 0):
        raise DomainError("chi2_cdf requires lambda >= 0")
    out = 1.0 - _sp.gammaincc(0.5 * n, 0.5 * lam_arr)
    return float(out) if np.ndim(lam) == 0 else out


def chi2_quantile(n: int, p):
    """Inverse of chi2_cdf in its second argument, for p in [0, 1)."""
    if n < 1 or int(n) != n:
        raise DomainError("chi2_quantile requires a positive integer dof")
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr < 0) | (p_arr >= 1)):
        raise DomainError("chi2_quantile requires 0 <= p < 1")
    out = 2.0 * _sp.gammainccinv(0.5 * n, 1.0 - p_arr)
    return float(out) if np.ndim(p) == 0 else out


@dataclass(frozen=True)
class RootBracket:
    """An interval whose endpoint function values straddle zero."""

    lo: float
    hi: float
    f_lo: float
    f_hi: float

    def __post_init__(self):
        if not (self.lo < self.hi):
            raise BracketError("bracket requires lo < hi")
        if self.f_lo * self.f_hi > 0.0:
            raise BracketError(
                f"f({self.lo}) = {self.f_lo} and f({self.hi}) = {self.f_hi} "
                "do not straddle zero"
            )

    @classmethod
    def from_function(cls, f: Callable[[float], float], lo: float, hi: float) -> "RootBracket":
        return cls(lo, hi, f(lo), f(hi))


def solve_monotone(f: Callable[[float], float], bracket: RootBracket,
                   x_tol: float, df: Optional[Callable[[float], float]] = None,
                   max_iter: int = 200) -> float:
    """Root of a monotone continuous f inside ``bracket``.

    Bisection provides global safety; when ``df`` is supplied, Newton steps
    refine the estimate and fall back to bisection whenever a step would
    leave the current bracket. The returned point never lies outside the
    initial bracket.
    """
    lo, hi = bracket.lo, bracket.hi
    f_lo, f_hi = bracket.f_lo, bracket.f_hi
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        fx = f(x)
        if fx == 0.0:
            return x
        if fx * f_lo < 0.0:
            hi, f_hi = x, fx
        else:
            lo, f_lo = x, fx
        if hi - lo <= x_tol:
            return 0.5 * (lo + hi)
        x_next = None
        if df is not None:
            d = df(x)
            if d != 0.0 and np.isfinite(d):
                cand = x - fx / d
                if lo < cand < hi:
                    x_next = cand
        x = x_next if x_next is not None else 0.5 * (lo + hi)
    raise ConvergenceError(
        f"solve_monotone did not reach x_tol={x_tol} in {max_iter} iterations"
    )


def norm_cdf(x):
    """Standard normal CDF, Phi(x) = (1 + erf(x / sqrt(2))) / 2."""
    return 0.5 * (1.0 + _sp.erf(np.asarray(x, dtype=np.float64) / math.sqrt(2.0)))


def sphere_surface_area(d: int) -> float:
    """Surface area of the unit d-sphere embedded in R^(d+1)."""
    if d < 0:
        raise DomainError("sphere dimension must be non-negative")
    return 2.0 * math.pi ** ((d + 1) / 2.0) / math.gamma((d + 1) / 2.0)
