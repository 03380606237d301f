"""Special functions used by the moment formulas.

Only the hypergeometric shape 2F1(n, n - delta; n - delta + 1; -z) appears in
the interference exponents, so that is the only one implemented here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "ConvergenceError",
    "SeriesControl",
    "gauss_2f1",
    "log_gauss_2f1",
    "gen_binomial",
    "binomial_sequence",
    "reg_inc_beta",
]

# The connection formula is used only while its correction term stays below
# this fraction of the leading term, so at most a digit is lost.
_MAX_CANCELLATION = 0.5
# Term cap for the vectorised series used when the connection formula cancels.
_LONG_SERIES_CAP = 200_000


class ConvergenceError(ArithmeticError):
    """A series or quadrature did not reach its tolerance within budget."""


@dataclass(frozen=True)
class SeriesControl:
    """Truncation policy for the infinite sums.

    A sum stops once ``|term| < rel_tol * |partial sum| + abs_tol`` or raises
    :class:`ConvergenceError` after ``max_terms`` terms.
    """

    rel_tol: float = 1e-10
    abs_tol: float = 1e-14
    max_terms: int = 500

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError(f"rel_tol must be positive, got {self.rel_tol}")
        if not self.abs_tol > 0:
            raise ValueError(f"abs_tol must be positive, got {self.abs_tol}")
        if int(self.max_terms) != self.max_terms or self.max_terms < 1:
            raise ValueError(f"max_terms must be a positive integer, got {self.max_terms}")

    def converged(self, term, partial) -> bool:
        return abs(term) < self.rel_tol * abs(partial) + self.abs_tol


DEFAULT_CONTROL = SeriesControl()


def _check_2f1_args(n, delta, z):
    if not n > 0:
        raise ValueError(f"n must be positive, got {n}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not z >= 0:
        raise ValueError(f"z must be non-negative, got {z}")


def _pochhammer_ratio_series(a, c, x, ctrl, budget):
    """Sum_k (a)_k / (c)_k x^k for 0 <= x < 1 (i.e. 2F1(a, 1; c; x))."""
    total = 1.0
    term = 1.0
    for k in range(budget):
        term *= (a + k) / (c + k) * x
        total += term
        ratio = (a + k + 1) / (c + k + 1) * x
        # term ratios increase towards x, so term * x / (1 - x) bounds the tail
        if ratio < 1 and ctrl.converged(term * max(ratio, x) / (1.0 - x), total):
            return total
    raise ConvergenceError(
        f"2F1 series with a={a}, c={c}, x={x} not converged after {budget} terms"
    )


def _long_series(a, c, x, ctrl):
    """Vectorised ``_pochhammer_ratio_series`` for up to ``_LONG_SERIES_CAP`` terms."""
    k = np.arange(_LONG_SERIES_CAP, dtype=float)
    log_terms = np.cumsum(np.log((a + k) / (c + k) * x))
    terms = np.exp(log_terms)
    total = 1.0 + np.cumsum(terms)
    ratio = (a + k + 1) / (c + k + 1) * x
    tail = terms * np.maximum(ratio, x) / (1.0 - x)
    ok = (ratio < 1) & (tail <= np.maximum(ctrl.rel_tol * total, ctrl.abs_tol))
    if not ok.any():
        raise ConvergenceError(f"2F1 series with a={a}, c={c}, x={x} needs more than {_LONG_SERIES_CAP} terms")
    return float(total[np.argmax(ok)])


def _pfaff_terms(w, ctrl):
    """Rough number of Pfaff-series terms needed at argument ``w``."""
    if w <= 0.0:
        return 1
    return math.ceil(math.log(ctrl.rel_tol * (1.0 - w)) / math.log(w)) + 2


def log_gauss_2f1(n, delta, z, ctrl: SeriesControl = DEFAULT_CONTROL) -> float:
    """Natural log of ``2F1(n, n - delta; n - delta + 1; -z)``.

    Working in logs lets callers form ``z**n * 2F1`` for large ``n``
    without underflow.
    """
    n = float(n)
    delta = float(delta)
    z = float(z)
    _check_2f1_args(n, delta, z)
    if z == 0.0:
        return 0.0
    c = n - delta + 1.0
    w = z / (1.0 + z)
    # 2F1(n, n-d; n-d+1; -z) = (1+z)^-n 2F1(n, 1; n-d+1; w)
    log_pre = -n * math.log1p(z)
    if _pfaff_terms(w, ctrl) <= ctrl.max_terms:
        s = _pochhammer_ratio_series(n, c, w, ctrl, ctrl.max_terms)
        return log_pre + math.log(s)

    # Connection formula around w = 1 (c - a - b = -delta is never an integer):
    #   2F1(n,1;c;w) = -(n-d)/d 2F1(n,1;1+d;v)
    #                  + v^-d w^-(n-d) Gamma(n-d+1) Gamma(d) / Gamma(n),  v = 1-w
    v = 1.0 / (1.0 + z)
    s1 = _pochhammer_ratio_series(n, 1.0 + delta, v, ctrl, ctrl.max_terms)
    log_t2 = (
        -delta * math.log(v)
        - (n - delta) * math.log(w)
        + special.gammaln(n - delta + 1.0)
        + special.gammaln(delta)
        - special.gammaln(n)
    )
    # t2 dominates; fold t1 in as a relative correction
    ratio = (n - delta) / delta * s1 * math.exp(-log_t2)
    if 1.0 - ratio > _MAX_CANCELLATION:
        return log_pre + log_t2 + math.log1p(-ratio)
    # large n at moderate z: both connection terms are huge and cancel
    return log_pre + math.log(_long_series(n, c, w, ctrl))


def gauss_2f1(n, delta, z, ctrl: SeriesControl = DEFAULT_CONTROL) -> float:
    """Evaluate ``2F1(n, n - delta; n - delta + 1; -z)`` for ``z >= 0``.

    Equals ``(n - delta) * int_0^1 t**(n - delta - 1) * (1 + z t)**(-n) dt``,
    so the value lies in (0, 1].

    Raises
    ------
    ConvergenceError
        If neither the series within ``ctrl.max_terms`` terms nor the
        connection formula applies and the long fallback series also fails
        (very large ``z`` together with large ``n``).
    """
    return math.exp(log_gauss_2f1(n, delta, z, ctrl))


def gen_binomial(b, n: int) -> complex:
    """Binomial coefficient ``C(b, n)`` for complex ``b`` and integer ``n >= 0``.

    Uses the running product ``prod_{k<n} (b - k) / (k + 1)``, which has no
    poles and is exact for integer ``b >= n``.
    """
    if int(n) != n or n < 0:
        raise ValueError(f"n must be a non-negative integer, got {n}")
    out = 1.0 + 0.0j
    for k in range(int(n)):
        out *= (b - k) / (k + 1)
    return out


def binomial_sequence(b, nmax: int) -> np.ndarray:
    """``C(b, n)`` for ``n = 0..nmax`` along the last axis.

    ``b`` may be a scalar or an array; the result has shape
    ``np.shape(b) + (nmax + 1,)`` and is complex.
    """
    b = np.asarray(b, dtype=complex)
    k = np.arange(nmax, dtype=float)
    factors = (b[..., None] - k) / (k + 1.0)
    out = np.ones(b.shape + (nmax + 1,), dtype=complex)
    out[..., 1:] = np.cumprod(factors, axis=-1)
    return out


def reg_inc_beta(x, a, b):
    """Regularized incomplete beta function ``I_x(a, b)``.

    Thin wrapper over :func:`scipy.special.betainc` that rejects arguments
    outside ``a > 0, b > 0, 0 <= x <= 1`` instead of returning NaN.
    """
    x_arr = np.asarray(x, dtype=float)
    if not (np.all(np.asarray(a) > 0) and np.all(np.asarray(b) > 0)):
        raise ValueError(f"shape parameters must be positive, got a={a}, b={b}")
    if np.any(x_arr < 0) or np.any(x_arr > 1) or np.any(np.isnan(x_arr)):
        raise ValueError("x must lie in [0, 1]")
    out = special.betainc(a, b, x_arr)
    return float(out) if np.ndim(out) == 0 else out
