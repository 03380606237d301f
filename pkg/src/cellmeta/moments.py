"""Moments of the conditional success probability for CCUs and CEUs.

All interference exponents reduce to

    V(b; z, q) = delta * sum_{n>=1} C(b, n) (-1)**(n+1) (q z)**n / (n - delta)
                 * 2F1(n, n - delta; n - delta + 1; -z)

with ``z = theta`` (``V1``) or ``z = theta R**alpha`` (``V2``). The same
quantity has the integral form

    V = delta * int_0^1 (1 - (1 - q z u / (1 + z u))**b) u**(-delta-1) du,

which is what gets used for imaginary orders ``b = jt`` with large ``t``,
where the binomial series cancels catastrophically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate, optimize

from .geometry import NetworkParams, UserClass
from .specialfn import (
    DEFAULT_CONTROL,
    ConvergenceError,
    SeriesControl,
    gauss_2f1,
    log_gauss_2f1,
)

__all__ = [
    "ActivityModel",
    "MomentResult",
    "InternalConsistencyError",
    "FINITE_EVERYWHERE",
    "v_series",
    "v_integral",
    "moment_ccu",
    "moment_ccu_quadrature",
    "moment_ceu_dominant_active",
    "moment_ceu_dominant_inactive",
    "moment_ceu",
    "moment_ceu_mixture",
    "moment",
    "moments_imaginary",
    "mean_local_delay",
    "delay_divergence_term",
    "critical_activity",
    "critical_theta",
]

FINITE_EVERYWHERE = math.inf
"""Returned by the critical-value solvers when no finite root exists."""

# Above this |Im b| the binomial series loses more than ~5 digits to
# cancellation (growth roughly exp(pi |Im b| / 2)), so the integral is used.
_SERIES_IMAG_LIMIT = 8.0

_GL_X, _GL_W = leggauss(16)

_THINNING = ("none", "reserved_ccu", "reserved_ceu")


class InternalConsistencyError(ArithmeticError):
    """A moment that must be a probability came out clearly negative."""


@dataclass(frozen=True)
class ActivityModel:
    """Per-slot activity of interfering BSs.

    Parameters
    ----------
    q : float
        Marginal probability that an interfering BS transmits.
    thinning_mode : {"none", "reserved_ccu", "reserved_ceu"}
        Reserved-band scenarios scale the activity by ``R**2`` or
        ``1 - R**2`` respectively.
    q_moments : tuple of float, optional
        Raw moments ``E[q**n]``, ``n = 1, 2, ...`` of a random activity.
        When given, ``q`` must equal the first entry, and only integer
        orders up to ``len(q_moments)`` can be evaluated.
    """

    q: float
    thinning_mode: str = "none"
    q_moments: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"activity q must lie in [0, 1], got {self.q}")
        if self.thinning_mode not in _THINNING:
            raise ValueError(f"thinning_mode must be one of {_THINNING}, got {self.thinning_mode!r}")
        if self.q_moments is not None:
            m = tuple(float(v) for v in self.q_moments)
            if not m or abs(m[0] - self.q) > 1e-12:
                raise ValueError("q_moments[0] must equal q")
            if any(not 0.0 <= v <= 1.0 for v in m):
                raise ValueError("activity moments must lie in [0, 1]")
            object.__setattr__(self, "q_moments", m)

    def factor(self, ratio: float) -> float:
        if self.thinning_mode == "reserved_ccu":
            return ratio * ratio
        if self.thinning_mode == "reserved_ceu":
            return 1.0 - ratio * ratio
        return 1.0

    def effective(self, ratio: float) -> float:
        """Activity seen by the moment formulas, ``q`` times the thinning factor."""
        return self.q * self.factor(ratio)

    def effective_moments(self, ratio: float):
        if self.q_moments is None:
            return None
        f = self.factor(ratio)
        return tuple(m * f ** (n + 1) for n, m in enumerate(self.q_moments))


@dataclass(frozen=True)
class MomentResult:
    """A moment value with its truncation bookkeeping.

    ``value`` is a Python ``complex`` for complex orders and a ``float``
    otherwise; it may be ``inf`` for negative orders past the critical value.
    """

    value: complex | float
    terms_used: int
    truncation_error_bound: float

    def __float__(self):
        return float(np.real(self.value))

    def __complex__(self):
        return complex(self.value)


_PRECISE = SeriesControl(rel_tol=1e-15, abs_tol=1e-16)


def _inner_argument(params: NetworkParams, inner_scale) -> float:
    if inner_scale in ("unit", 1, None):
        return params.sir_threshold
    if inner_scale in ("R^alpha", "R**alpha", "scaled"):
        return params.sir_threshold * params.ratio_threshold**params.pathloss_exponent
    raise ValueError(f"inner_scale must be 'unit' or 'R^alpha', got {inner_scale!r}")


def _v_series_z(b, z, q, delta, ctrl, q_moments=None):
    """Series for V at argument ``z``; returns ``(value, terms, tail_bound)``."""
    if z == 0.0 or q == 0.0:
        return 0.0, 0, 0.0
    b = complex(b)
    is_int = b.imag == 0 and b.real == round(b.real) and b.real >= 0
    # 2F1 factors go to machine precision so the bound reflects the n-sum only
    inner = SeriesControl(min(ctrl.rel_tol, 1e-15), min(ctrl.abs_tol, 1e-16), ctrl.max_terms)
    total = 0.0j
    coeff = 1.0 + 0.0j
    log_qz = math.log(q * z)
    last = 0.0
    for n in range(1, ctrl.max_terms + 1):
        coeff *= (b - (n - 1)) / n
        if coeff == 0:
            return delta * total, n, 0.0
        if q_moments is not None:
            if n > len(q_moments):
                raise ValueError(f"order {b} needs E[q^{n}] but only {len(q_moments)} moments given")
            qn = q_moments[n - 1]
            if qn == 0.0:
                continue
            log_mag = n * math.log(z) + math.log(qn)
        else:
            log_mag = n * log_qz
        log_mag += log_gauss_2f1(n, delta, z, inner) - math.log(n - delta)
        term = coeff * (-1) ** (n + 1) * math.exp(log_mag)
        total += term
        last = abs(term)
        if is_int and n >= b.real:
            return delta * total, n, 0.0
        if ctrl.converged(term, total):
            # terms shrink at least like (q z / (1 + z))**n
            w = q * z / (1.0 + z)
            return delta * total, n, delta * last * w / (1.0 - w)
    raise ConvergenceError(
        f"V series for b={b}, z={z}, q={q} not converged after {ctrl.max_terms} terms "
        f"(last term {last:.3e})"
    )


def v_series(
    params: NetworkParams,
    b,
    q: float,
    inner_scale: str = "unit",
    ctrl: SeriesControl = DEFAULT_CONTROL,
    q_moments: Sequence[float] | None = None,
) -> complex:
    """Interference exponent ``V1`` (``inner_scale="unit"``) or ``V2``.

    Parameters
    ----------
    params : NetworkParams
        Supplies ``theta``, ``delta`` and ``R**alpha``.
    b : complex
        Moment order.
    q : float
        Effective activity of the interfering BSs.
    inner_scale : {"unit", "R^alpha"}
        ``V2`` multiplies the threshold by ``R**alpha``.
    q_moments : sequence of float, optional
        ``E[q**n]`` replacing ``q**n`` term by term.

    Raises
    ------
    ConvergenceError
        If the series does not settle within ``ctrl.max_terms`` terms.
    """
    z = _inner_argument(params, inner_scale)
    value, _, _ = _v_series_z(b, z, q, params.delta, ctrl, q_moments)
    return complex(value)


def _panel_nodes(npan):
    edges = np.linspace(0.0, 1.0, npan + 1)
    h = np.diff(edges)
    nodes = (edges[:-1, None] + h[:, None] * (_GL_X + 1.0) / 2.0).ravel()
    weights = (h[:, None] * _GL_W / 2.0).ravel()
    return nodes, weights


def _v_integral_z(b, z, q, delta, refine=1):
    b = np.atleast_1d(np.asarray(b, dtype=complex))
    if z == 0.0 or q == 0.0:
        return np.zeros(b.shape, dtype=complex)
    # u = v**k makes the integrand smooth at the origin
    k = 1.0 / (1.0 - delta)
    log_g_min = abs(math.log1p(-q * z / (1.0 + z)))
    npan = int(np.max(np.abs(b)) * log_g_min / 8.0 + 4.0 + 4.0 * math.log10(1.0 + z))
    v, w = _panel_nodes(refine * npan)
    u = v**k
    log_g = np.log1p(-q * z * u / (1.0 + z * u))
    weight = delta * k * v ** (-k * delta - 1.0) * w
    # one-minus-power per node; chunk over b to bound memory
    out = np.empty(b.shape, dtype=complex)
    step = max(1, 2_000_000 // v.size)
    for i in range(0, b.size, step):
        bb = b[i : i + step]
        out[i : i + step] = -np.expm1(np.outer(bb, log_g)) @ weight
    return out


def v_integral(params: NetworkParams, b, q: float, inner_scale: str = "unit") -> np.ndarray:
    """Integral-form ``V1`` or ``V2``, vectorized over ``b``.

    Uses composite 16-point Gauss-Legendre panels whose count grows with
    ``|b|`` so every panel sees a bounded phase change.
    """
    z = _inner_argument(params, inner_scale)
    return _v_integral_z(b, z, q, params.delta)


def _v_auto(params, b, q, inner_scale, ctrl, q_moments=None):
    """V with its bookkeeping, series first and integral as fallback."""
    z = _inner_argument(params, inner_scale)
    b = complex(b)
    if q_moments is None and abs(b.imag) > _SERIES_IMAG_LIMIT:
        coarse = _v_integral_z([b], z, q, params.delta)[0]
        fine = _v_integral_z([b], z, q, params.delta, refine=2)[0]
        return complex(fine), 0, abs(fine - coarse)
    try:
        return _v_series_z(b, z, q, params.delta, ctrl, q_moments)
    except ConvergenceError:
        if q_moments is not None:
            raise
        coarse = _v_integral_z([b], z, q, params.delta)[0]
        fine = _v_integral_z([b], z, q, params.delta, refine=2)[0]
        return complex(fine), 0, abs(fine - coarse)


def _pack(value, b, terms, bound):
    value = complex(value)
    if complex(b).imag == 0:
        value = value.real
    return MomentResult(value=value, terms_used=int(terms), truncation_error_bound=float(bound))


def _inv_one_plus(v):
    # 1 / (1 + V) for negative orders can pass through a pole; report inf
    if v == -1 or (np.imag(v) == 0 and np.real(v) <= -1):
        return math.inf
    return 1.0 / (1.0 + v)


def moment_ccu(b, params: NetworkParams, activity: ActivityModel, ctrl: SeriesControl = DEFAULT_CONTROL) -> MomentResult:
    """``b``-th moment for a cell-center user, ``1 / (1 + V2(b))``.

    Interferers of a CCU at distance ``r`` lie beyond ``r / R``, so the
    exponent is ``V`` evaluated at ``theta R**alpha``.
    """
    q = activity.effective(params.ratio_threshold)
    v2, terms, bound = _v_auto(params, b, q, "R^alpha", ctrl, activity.effective_moments(params.ratio_threshold))
    val = _inv_one_plus(v2)
    return _pack(val, b, terms, bound * abs(val) ** 2 if np.isfinite(val) else math.inf)


def moment_ccu_quadrature(b: float, params: NetworkParams, activity: ActivityModel, *, rtol: float = 1e-11) -> float:
    """Independent two-level quadrature of the CCU moment.

    Integrates ``prod_x (1 - q + q / (1 + theta r**alpha |x|**-alpha))**b``
    through the PGFL of the interferers beyond ``r / R`` (inner integral,
    in metres) and then against the CCU serving-distance density (outer
    integral). No series or hypergeometric function is involved.

    Returns ``inf`` for negative orders once the outer integral diverges.
    """
    b = float(b)
    q = activity.effective(params.ratio_threshold)
    lam, alpha, R, theta = params.bs_density, params.pathloss_exponent, params.ratio_threshold, params.sir_threshold
    if q == 0.0:
        return 1.0

    def one_minus_gb(x, r):
        s = theta * (r / x) ** alpha
        # 1 - (1 - q s / (1 + s))**b
        return -math.expm1(b * math.log1p(-q * s / (1.0 + s)))

    def exponent(r):
        lo = r / R
        near, _ = integrate.quad(lambda x: one_minus_gb(x, r) * x, lo, 10 * lo, epsrel=rtol, epsabs=0, limit=200)
        # beyond 10 r / R map x -> y = (10 lo / x)**(alpha - 2) onto (0, 1]
        p = 1.0 / (alpha - 2.0)
        x_of = lambda y: 10 * lo * y ** (-p)
        far, _ = integrate.quad(
            lambda y: one_minus_gb(x_of(y), r) * x_of(y) ** 2 * p / y, 0.0, 1.0, epsrel=rtol, epsabs=0, limit=200
        )
        return 2 * math.pi * lam * (near + far)

    # exponent(r) is proportional to r**2; detect divergence for b < 0
    r_ref = R / math.sqrt(math.pi * lam)
    if exponent(r_ref) <= -math.pi * lam * r_ref**2 / R**2:
        return math.inf

    def integrand(r):
        log_void = -math.pi * lam * r * r / R**2
        return 2 * math.pi * lam * r / R**2 * math.exp(log_void - exponent(r))

    scale = R / math.sqrt(math.pi * lam)
    total = 0.0
    edges = [0.0, scale, 2 * scale, 4 * scale, 8 * scale, np.inf]
    for lo, hi in zip(edges[:-1], edges[1:]):
        part, err = integrate.quad(integrand, lo, hi, epsrel=rtol, epsabs=0, limit=200)
        total += part
    return total


def _telescoped_dominant_active(v1, v2, R2, ctrl):
    """Evaluate the (t, l, m) double-difference sum over t.

    Each t contributes ``(a_t - a_{t+1}) + (c_{t+2} - c_{t+1})`` with
    ``a_t = 1/(t h + R^2 V1 + R^2)`` and ``c_t = 1/(t h + V2 + R^2)``,
    ``h = 1 - R^2``. The explicit terms decay only like ``1/t**2``, so after
    ``ctrl`` stops the loop the remaining tail ``a_T - c_{T+1}`` is added in
    closed form.
    """
    h = 1.0 - R2
    total = 0.0j
    t = 0
    for t in range(ctrl.max_terms):
        term = 0.0j
        for l in (0, 1):
            for m in (0, 1):
                denom = (t + m) * h + abs(m - 1) * R2 * v1 + (1 - abs(m - 1)) * v2 + R2**l
                term += (-1) ** (l + m + 1) / denom
        total += term
        if ctrl.converged(term, total):
            break
    T = t + 1
    tail = 1.0 / (T * h + R2 * v1 + R2) - 1.0 / ((T + 1) * h + v2 + R2)
    return total + tail, T


def moment_ceu_dominant_active(b, params: NetworkParams, activity: ActivityModel, ctrl: SeriesControl = DEFAULT_CONTROL) -> MomentResult:
    """CEU moment from the dominant-interferer-active derivation chain.

    The chain telescopes to ``(1/(1+V1) - R^2/(1+V2)) / (1 - R^2)``, which
    is the unconditional CEU moment: it satisfies
    ``R^2 M_ccu + (1 - R^2) M_ceu = 1 / (1 + V1)`` exactly.

    Raises
    ------
    InternalConsistencyError
        If a real order yields a value below ``-ctrl.rel_tol``.
    """
    R2 = params.ratio_threshold**2
    q = activity.effective(params.ratio_threshold)
    qm = activity.effective_moments(params.ratio_threshold)
    v1, n1, e1 = _v_auto(params, b, q, "unit", ctrl, qm)
    v2, n2, e2 = _v_auto(params, b, q, "R^alpha", ctrl, qm)
    if complex(b).imag == 0 and (np.real(v1) <= -1 or np.real(v2) <= -1):
        return _pack(math.inf, b, max(n1, n2), math.inf)
    s, T = _telescoped_dominant_active(v1, v2, R2, ctrl)
    value = R2 / (1.0 - R2) * s
    if complex(b).imag == 0 and value.real < -ctrl.rel_tol:
        raise InternalConsistencyError(
            f"dominant-active CEU moment is negative ({value.real:.3e}) at b={b}, q={q}"
        )
    bound = (e1 / abs(1 + v1) ** 2 + R2 * e2 / abs(1 + v2) ** 2) / (1 - R2)
    return _pack(value, b, max(n1, n2, T), bound)


def moment_ceu_dominant_inactive(b, params: NetworkParams, activity: ActivityModel, ctrl: SeriesControl = DEFAULT_CONTROL) -> MomentResult:
    """``(1/(1 - R^2)) (1/(1 + V1) - R^2/(1 + R^2 V1))``."""
    R2 = params.ratio_threshold**2
    q = activity.effective(params.ratio_threshold)
    v1, n1, e1 = _v_auto(params, b, q, "unit", ctrl, activity.effective_moments(params.ratio_threshold))
    if complex(b).imag == 0 and np.real(v1) <= -1:
        return _pack(math.inf, b, n1, math.inf)
    value = (1.0 / (1.0 + v1) - R2 / (1.0 + R2 * v1)) / (1.0 - R2)
    return _pack(value, b, n1, e1 * (1.0 / abs(1 + v1) ** 2 + R2**2 / abs(1 + R2 * v1) ** 2) / (1 - R2))


def moment_ceu(b, params: NetworkParams, activity: ActivityModel, ctrl: SeriesControl = DEFAULT_CONTROL) -> MomentResult:
    """``b``-th moment for a cell-edge user.

    Returns the value of the dominant-active chain, which already averages
    over the dominant interferer's state. See :func:`moment_ceu_mixture`
    for the activity-weighted blend of the two conditional forms.
    """
    return moment_ceu_dominant_active(b, params, activity, ctrl)


def moment_ceu_mixture(b, params: NetworkParams, activity: ActivityModel, ctrl: SeriesControl = DEFAULT_CONTROL) -> MomentResult:
    """Blend ``q M_e1 + (1 - q) M_e2`` weighted by the effective activity.

    Kept for comparison; it differs from :func:`moment_ceu` because the
    first term is not conditional on the dominant interferer's state.
    """
    q = activity.effective(params.ratio_threshold)
    a = moment_ceu_dominant_active(b, params, activity, ctrl)
    i = moment_ceu_dominant_inactive(b, params, activity, ctrl)
    return _pack(
        q * complex(a.value) + (1 - q) * complex(i.value),
        b,
        max(a.terms_used, i.terms_used),
        q * a.truncation_error_bound + (1 - q) * i.truncation_error_bound,
    )


def moment(b, params: NetworkParams, activity: ActivityModel, cls, ctrl: SeriesControl = DEFAULT_CONTROL) -> MomentResult:
    """Dispatch to :func:`moment_ccu` or :func:`moment_ceu` by class."""
    if UserClass.parse(cls) is UserClass.CCU:
        return moment_ccu(b, params, activity, ctrl)
    return moment_ceu(b, params, activity, ctrl)


def moments_imaginary(t, params: NetworkParams, activity: ActivityModel, cls) -> np.ndarray:
    """``M_{jt}`` for an array of ``t``, the characteristic-type function.

    Uses the integral form of the exponents throughout, which is accurate
    for every ``t`` and vectorizes over the whole grid.
    """
    if activity.q_moments is not None:
        raise ValueError("imaginary orders are not available for random activity moments")
    t = np.asarray(t, dtype=float)
    b = 1j * t.ravel()
    q = activity.effective(params.ratio_threshold)
    v2 = v_integral(params, b, q, "R^alpha")
    if UserClass.parse(cls) is UserClass.CCU:
        out = 1.0 / (1.0 + v2)
    else:
        R2 = params.ratio_threshold**2
        v1 = v_integral(params, b, q, "unit")
        out = (1.0 / (1.0 + v1) - R2 / (1.0 + v2)) / (1.0 - R2)
    return out.reshape(t.shape)


def delay_divergence_term(params: NetworkParams, q: float, cls) -> float:
    """``q theta' delta/(1-delta) 2F1(1, 1-delta; 2-delta; -(1-q) theta')``.

    ``theta' = theta R**alpha`` for CCUs and ``theta`` for CEUs. This is
    ``-V(-1)``; the mean local delay is finite iff it is below one.
    """
    z = _inner_argument(params, "R^alpha" if UserClass.parse(cls) is UserClass.CCU else "unit")
    d = params.delta
    if q == 0.0:
        return 0.0
    return q * z * d / (1.0 - d) * gauss_2f1(1.0, d, (1.0 - q) * z, _PRECISE)


def mean_local_delay(params: NetworkParams, activity: ActivityModel, cls, *, sign: str = "corrected") -> float:
    """Mean number of attempts until the first success, ``M_{-1}``.

    With ``T_c`` and ``T_e`` the divergence terms of
    :func:`delay_divergence_term`, the CCU delay is ``1 / (1 - T_c)`` and
    the CEU delay is ``(1/(1 - T_e) - R^2/(1 - T_c)) / (1 - R^2)``. Both
    are ``inf`` once the relevant term reaches one.

    ``sign="printed"`` flips the sign inside the denominators, which gives
    values below one; it exists only to exercise the discrepancy report.
    """
    if sign not in ("corrected", "printed"):
        raise ValueError(f"sign must be 'corrected' or 'printed', got {sign!r}")
    s = 1.0 if sign == "corrected" else -1.0
    q = activity.effective(params.ratio_threshold)
    tc = delay_divergence_term(params, q, UserClass.CCU)
    if UserClass.parse(cls) is UserClass.CCU:
        return math.inf if 1.0 - s * tc <= 0.0 else 1.0 / (1.0 - s * tc)
    te = delay_divergence_term(params, q, UserClass.CEU)
    if 1.0 - s * te <= 0.0:
        return math.inf
    R2 = params.ratio_threshold**2
    return (1.0 / (1.0 - s * te) - R2 / (1.0 - s * tc)) / (1.0 - R2)


def critical_activity(params: NetworkParams, cls, *, xtol: float = 1e-10) -> float:
    """Smallest activity at which the mean local delay becomes infinite.

    Returns :data:`FINITE_EVERYWHERE` (``inf``) when the divergence term
    stays below one for every ``q`` in ``(0, 1]``.
    """
    f = lambda q: delay_divergence_term(params, q, cls) - 1.0
    if f(1.0) < 0.0:
        return FINITE_EVERYWHERE
    return optimize.brentq(f, 0.0, 1.0, xtol=xtol)


def critical_theta(params: NetworkParams, q: float, cls, *, theta_max: float = 1e6, xtol: float = 1e-12) -> float:
    """Threshold (linear) at which the mean local delay becomes infinite.

    The divergence term grows without bound in ``theta`` for any ``q > 0``,
    but roots beyond ``theta_max`` (60 dB by default) are reported as
    :data:`FINITE_EVERYWHERE`.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    f = lambda th: delay_divergence_term(params.replace(sir_threshold=th), q, cls) - 1.0
    if q == 0.0 or f(theta_max) < 0.0:
        return FINITE_EVERYWHERE
    # bisect in log(theta); the term is increasing in theta
    log_root = optimize.brentq(lambda lt: f(math.exp(lt)), math.log(1e-12), math.log(theta_max), xtol=xtol)
    return math.exp(log_root)
