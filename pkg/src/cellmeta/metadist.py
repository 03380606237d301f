"""Meta distribution of the SIR: inversion, beta fit and traffic coupling."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss

from .geometry import NetworkParams, UserClass, cell_load_pmf
from .moments import ActivityModel, moment, moments_imaginary
from .specialfn import ConvergenceError, reg_inc_beta

__all__ = [
    "MetaCurve",
    "BetaFit",
    "TrafficParams",
    "FixedPointResult",
    "default_grid",
    "gil_pelaez_ccdf",
    "beta_approximation",
    "meta_distribution",
    "mean_active_probability",
    "mean_active_moment_functional",
    "fixed_point_solve",
    "stability_verdict",
]

_GL_X, _GL_W = leggauss(16)

# The load PMF is summed until the neglected tail mass drops below this.
_LOAD_TAIL = 1e-12


def default_grid(step: float = 0.01) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.linspace(0.0, 1.0, n + 1)


@dataclass
class MetaCurve:
    """Tabulated CCDF ``x -> P(P > x)`` with ``x`` ascending over ``[0, 1]``."""

    grid: np.ndarray
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.shape != self.values.shape or self.grid.ndim != 1:
            raise ValueError("grid and values must be 1-D arrays of equal length")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly ascending")
        if self.grid[0] < 0 or self.grid[-1] > 1:
            raise ValueError("grid must lie within [0, 1]")
        if np.any((self.values < 0) | (self.values > 1)) or np.any(np.diff(self.values) > 1e-12):
            raise ValueError("values must be a non-increasing CCDF within [0, 1]")

    def __call__(self, x):
        return np.interp(x, self.grid, self.values)

    def mean(self) -> float:
        """``int_0^1 F(x) dx`` by the trapezoid rule, i.e. ``E[P]``."""
        return float(np.trapezoid(self.values, self.grid))

    def sup_distance(self, other: "MetaCurve", lo: float = 0.0, hi: float = 1.0) -> float:
        """Largest gap between two curves on this curve's grid within ``[lo, hi]``."""
        mask = (self.grid >= lo - 1e-12) & (self.grid <= hi + 1e-12)
        return float(np.max(np.abs(self.values[mask] - other(self.grid[mask]))))

    def dominates(self, other: "MetaCurve", tol: float = 0.0) -> bool:
        """True when this curve is pointwise ``>= other - tol``."""
        return bool(np.all(self.values >= other(self.grid) - tol))

    def to_csv(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "ccdf"])
            for x, v in zip(self.grid, self.values):
                w.writerow([repr(float(x)), repr(float(v))])
        os.replace(tmp, path)

    @classmethod
    def from_csv(cls, path, label: str = "") -> "MetaCurve":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], label)


def _finalize(grid, interior, inner_mask, label):
    """Clamp, pin the end points and enforce monotonicity."""
    values = np.empty_like(grid)
    values[inner_mask] = np.clip(interior, 0.0, 1.0)
    values[grid <= 0.0] = 1.0
    values[grid >= 1.0] = 0.0
    # quadrature noise can produce sub-tolerance wiggles
    values = np.minimum.accumulate(values)
    return MetaCurve(grid, values, label)


def gil_pelaez_ccdf(
    moment_at_imaginary_order: Callable[[np.ndarray], np.ndarray],
    x,
    *,
    tol: float = 1e-3,
    t_max: float = 5e4,
    return_info: bool = False,
):
    """Invert the moments ``M_{jt}`` into ``P(P > x)``.

    Evaluates ``1/2 + (1/pi) int_0^T Im(exp(-j t log x) M_{jt}) / t dt``
    with composite Gauss-Legendre panels. ``T`` doubles until two
    successive doublings change every value by less than ``tol``.

    Parameters
    ----------
    moment_at_imaginary_order : callable
        Vectorized ``t -> M_{jt}`` for positive real ``t``.
    x : float or array_like
        Reliabilities in ``(0, 1)``.
    tol : float
        Absolute tolerance of the doubling test.
    t_max : float
        Largest truncation point tried.
    return_info : bool
        Also return ``{"t_max": T, "tail_bound": last change}``.

    Raises
    ------
    ConvergenceError
        If ``t_max`` is reached first; ``exc.tail_bound`` holds the last
        change observed.
    """
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any((x_arr <= 0) | (x_arr >= 1)):
        raise ValueError("x must lie strictly inside (0, 1)")
    log_x = np.log(x_arr)
    # phase speed of M near the origin is E[log P]; panels keep the
    # total phase per panel near pi
    eps = 1e-3
    m_eps = complex(np.asarray(moment_at_imaginary_order(np.array([eps])))[0])
    drift = abs(np.angle(m_eps)) / eps
    h = min(2.0, math.pi / (np.max(np.abs(log_x)) + drift + 1.0))

    def block(t0, t1):
        npan = max(1, int(round((t1 - t0) / h)))
        edges = np.linspace(t0, t1, npan + 1)
        hw = np.diff(edges)[:, None] / 2.0
        t = ((edges[:-1, None] + edges[1:, None]) / 2.0 + hw * _GL_X).ravel()
        w = (hw * _GL_W).ravel()
        m = np.asarray(moment_at_imaginary_order(t), dtype=complex)
        phase = np.exp(-1j * np.outer(log_x, t))
        return (np.imag(phase * m) / t) @ w

    T = 32 * h
    integral = block(0.0, T)
    calm = 0
    change = math.inf
    while True:
        step = block(T, 2 * T)
        integral = integral + step
        T *= 2
        change = float(np.max(np.abs(step))) / math.pi
        calm = calm + 1 if change < tol else 0
        if calm >= 2:
            break
        if T > t_max:
            err = ConvergenceError(
                f"Gil-Pelaez integral not settled at T={T:.3g}; last change {change:.3e} > tol {tol:.1e}"
            )
            err.tail_bound = change
            raise err
    values = np.clip(0.5 + integral / math.pi, 0.0, 1.0)
    out = values if np.ndim(x) else float(values[0])
    if return_info:
        return out, {"t_max": T, "tail_bound": change}
    return out


@dataclass(frozen=True)
class BetaFit:
    """Beta law matched to the first two moments.

    ``step_at`` is set instead of the shapes when the variance vanishes or
    the mean sits on a boundary; the law is then a point mass there.
    """

    shape_a: float = math.nan
    shape_b: float = math.nan
    step_at: float | None = None

    @property
    def mean(self) -> float:
        if self.step_at is not None:
            return self.step_at
        return self.shape_a / (self.shape_a + self.shape_b)

    @property
    def variance(self) -> float:
        if self.step_at is not None:
            return 0.0
        a, b = self.shape_a, self.shape_b
        return a * b / ((a + b) ** 2 * (a + b + 1.0))

    def ccdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.step_at is not None:
            out = (x < self.step_at).astype(float)
        else:
            out = 1.0 - reg_inc_beta(np.clip(x, 0.0, 1.0), self.shape_a, self.shape_b)
        return float(out) if np.ndim(out) == 0 else out


def beta_approximation(M1: float, M2: float, *, rtol: float = 1e-12) -> BetaFit:
    """Moment-matched beta law for a ``[0, 1]`` variable.

    ``shape_b = (M1 - M2)(1 - M1)/(M2 - M1**2)`` and
    ``shape_a = M1 shape_b / (1 - M1)``. A non-positive variance (within
    ``rtol``) or ``M1`` in ``{0, 1}`` yields a point mass at ``M1``.
    """
    M1 = float(np.real(M1))
    M2 = float(np.real(M2))
    if not 0.0 <= M1 <= 1.0:
        raise ValueError(f"M1 must lie in [0, 1], got {M1}")
    if M2 > M1 * (1.0 + rtol) or M2 < 0.0:
        raise ValueError(f"M2={M2} is not a valid second moment for M1={M1}")
    var = M2 - M1 * M1
    if M1 in (0.0, 1.0) or var <= rtol * max(M1 * M1, 1e-300):
        return BetaFit(step_at=M1)
    b = (M1 - M2) * (1.0 - M1) / var
    a = M1 * b / (1.0 - M1)
    if b <= 0.0:
        return BetaFit(step_at=M1)
    return BetaFit(shape_a=a, shape_b=b)


def meta_distribution(
    params: NetworkParams,
    activity: ActivityModel,
    cls,
    method: str = "gil_pelaez",
    grid=None,
    *,
    tol: float = 1e-3,
) -> MetaCurve:
    """Meta distribution of the class ``cls`` on ``grid`` (default step 0.01)."""
    cls = UserClass.parse(cls)
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    inner = (grid > 0.0) & (grid < 1.0)
    label = f"{cls.value} {method}"
    if activity.effective(params.ratio_threshold) == 0.0:
        return _finalize(grid, np.ones(int(inner.sum())), inner, label)
    if method == "gil_pelaez":
        if activity.q_moments is not None:
            raise ValueError("random-activity moments support only the beta method")
        fn = lambda t: moments_imaginary(t, params, activity, cls)
        interior = gil_pelaez_ccdf(fn, grid[inner], tol=tol)
    elif method == "beta":
        m1 = float(moment(1, params, activity, cls))
        m2 = float(moment(2, params, activity, cls))
        interior = beta_approximation(m1, m2).ccdf(grid[inner])
    else:
        raise ValueError(f"method must be 'gil_pelaez' or 'beta', got {method!r}")
    return _finalize(grid, np.atleast_1d(interior), inner, label)


def _min_ratio_moment(grid, values, a, n):
    """``E[min(1, a / P)**n]`` for ``P`` with piecewise-linear CCDF.

    Integration by parts with ``F(1) = 0`` gives
    ``1 - n a**n int_a^1 F(s) s**(-n-1) ds``; on each linear piece
    ``F = c0 + c1 s`` the integral is elementary.
    """
    if a <= 0.0:
        return 0.0
    if a >= 1.0:
        return 1.0
    lo = np.maximum(grid[:-1], a)
    hi = grid[1:]
    keep = hi > a
    lo, hi = lo[keep], hi[keep]
    g0, g1 = grid[:-1][keep], grid[1:][keep]
    v0, v1 = values[:-1][keep], values[1:][keep]
    c1 = (v1 - v0) / (g1 - g0)
    c0 = v0 - c1 * g0
    rl, rh = a / lo, a / hi
    # n a^n int (c0 s^(-n-1) + c1 s^(-n)) ds, written with ratios <= 1
    part0 = c0 * (rl**n - rh**n)
    if n == 1:
        part1 = c1 * a * np.log(hi / lo)
    else:
        part1 = c1 * n * a / (n - 1) * (rl ** (n - 1) - rh ** (n - 1))
    return float(np.clip(1.0 - np.sum(part0 + part1), 0.0, 1.0))


def _load_weights(load_ratio):
    """``g_N(nu) / (1 - g_N(0))`` for ``nu >= 1`` up to negligible tail."""
    g0 = cell_load_pmf(0, load_ratio)
    nmax = max(16, int(8 * load_ratio) + 16)
    while True:
        nu = np.arange(1, nmax + 1)
        g = cell_load_pmf(nu, load_ratio)
        if 1.0 - g0 - g.sum() < _LOAD_TAIL or nmax > 100_000:
            return nu, g / (1.0 - g0)
        nmax *= 2


def mean_active_moment_functional(curve: MetaCurve, xi: float, load_ratio: float, n: int = 1) -> float:
    """Cell-averaged ``E[q**n]`` with ``q = min(1, nu xi / P)``.

    ``nu`` follows the zero-truncated load PMF and ``P`` the meta
    distribution ``curve``.
    """
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"arrival rate must lie in [0, 1], got {xi}")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    if xi == 0.0:
        return 0.0
    nu, w = _load_weights(load_ratio)
    per_nu = np.array([_min_ratio_moment(curve.grid, curve.values, k * xi, int(n)) for k in nu])
    return float(np.clip(np.dot(w, per_nu) / w.sum(), 0.0, 1.0))


def mean_active_probability(curve: MetaCurve, xi: float, load_ratio: float) -> float:
    """Little's-law activity ``E[min(1, nu xi / P)]`` averaged over cells."""
    return mean_active_moment_functional(curve, xi, load_ratio, 1)


@dataclass(frozen=True)
class TrafficParams:
    """Per-user Bernoulli arrival rate per slot."""

    arrival_rate: float

    def __post_init__(self):
        if not 0.0 <= self.arrival_rate <= 1.0:
            raise ValueError(f"arrival_rate must lie in [0, 1], got {self.arrival_rate}")


@dataclass
class FixedPointResult:
    q_star: float
    curve: MetaCurve
    iterations: int
    residual: float
    converged: bool
    saturated: bool
    history: list = field(default_factory=list)
    q_moments: tuple | None = None

    def summary(self) -> str:
        """Key-value block; pair with ``curve.to_csv`` for the full result."""
        lines = [
            f"q_star = {self.q_star!r}",
            f"iterations = {self.iterations}",
            f"residual = {self.residual!r}",
            f"converged = {str(self.converged).lower()}",
            f"saturated = {str(self.saturated).lower()}",
            f"verdict = {stability_verdict(self)}",
        ]
        if self.q_moments is not None:
            lines.append("q_moments = " + ", ".join(repr(m) for m in self.q_moments))
        return "\n".join(lines) + "\n"


SATURATION_LEVEL = 1.0 - 1e-5


def fixed_point_solve(
    params: NetworkParams,
    xi: float,
    cls,
    method: str = "gil_pelaez",
    mode: str = "simultaneous",
    *,
    activity: str = "mean",
    omega: float = 0.5,
    tol: float = 1e-5,
    max_iter: int = 200,
    grid=None,
    thinning_mode: str = "none",
) -> FixedPointResult:
    """Self-consistent activity of a homogeneous (all-CCU or all-CEU) network.

    ``mode="simultaneous"`` runs the damped map
    ``q <- (1 - omega) q + omega E[q](curve(q))`` from ``q = xi``;
    ``mode="recursive_temporal"`` runs the same map undamped, one step per
    slot, and keeps the whole trajectory in ``history``.

    ``activity="moments"`` carries the first two moments of the random
    activity instead of its mean, which feeds ``E[q**n]`` into the
    interference exponents. Only ``method="beta"`` supports it.

    Never raises on non-convergence; inspect ``converged``/``residual``.
    """
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"arrival rate must lie in [0, 1], got {xi}")
    if mode not in ("simultaneous", "recursive_temporal"):
        raise ValueError(f"unknown mode {mode!r}")
    if activity not in ("mean", "moments"):
        raise ValueError(f"activity must be 'mean' or 'moments', got {activity!r}")
    if activity == "moments" and method != "beta":
        raise ValueError("activity='moments' is available only with method='beta'")
    if mode == "recursive_temporal":
        omega = 1.0
    load = params.load_ratio

    def curve_for(state):
        if activity == "moments":
            act = ActivityModel(state[0], thinning_mode, q_moments=state)
        else:
            act = ActivityModel(state[0], thinning_mode)
        return meta_distribution(params, act, cls, method, grid)

    def response(curve):
        m1 = mean_active_probability(curve, xi, load)
        if activity == "moments":
            m2 = mean_active_moment_functional(curve, xi, load, 2)
            return (max(m1, xi), min(max(m2, xi * xi), m1))
        return (min(max(m1, xi), 1.0),)

    state = (xi, xi * xi) if activity == "moments" else (xi,)
    history = [state[0]]
    if xi == 0.0:
        curve = curve_for(state)
        return FixedPointResult(0.0, curve, 0, 0.0, True, False, history)
    residual = math.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        target = response(curve_for(state))
        new = tuple((1 - omega) * s + omega * t for s, t in zip(state, target))
        residual = abs(new[0] - state[0])
        state = new
        history.append(state[0])
        if residual < tol:
            converged = True
            break
    q_star = float(state[0])
    curve = curve_for(state)
    return FixedPointResult(
        q_star=q_star,
        curve=curve,
        iterations=it,
        residual=residual,
        converged=converged,
        saturated=q_star >= SATURATION_LEVEL,
        history=history,
        q_moments=state if activity == "moments" else None,
    )


def stability_verdict(result: FixedPointResult) -> str:
    """``"unstable"`` if saturated, ``"stable"`` if converged, else ``"undetermined"``.

    This is an empirical criterion: a fixed point pinned at full activity
    means queues cannot drain on average.
    """
    if result.saturated:
        return "unstable"
    if result.converged:
        return "stable"
    return "undetermined"
