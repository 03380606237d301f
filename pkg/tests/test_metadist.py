import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from cellmeta.geometry import NetworkParams, cell_load_pmf
from cellmeta.metadist import (
    BetaFit,
    MetaCurve,
    _min_ratio_moment,
    beta_approximation,
    default_grid,
    fixed_point_solve,
    gil_pelaez_ccdf,
    mean_active_moment_functional,
    mean_active_probability,
    meta_distribution,
    stability_verdict,
)
from cellmeta.moments import ActivityModel, moment
from cellmeta.specialfn import ConvergenceError

DEFAULTS = NetworkParams()
GRID = default_grid()


def _beta_moments(a, b):
    """``E[P**(jt)]`` of a Beta(a, b) law via complex log-gamma."""

    def fn(t):
        s = 1j * np.asarray(t, dtype=float)
        return np.exp(special.loggamma(a + s) + special.loggamma(a + b) - special.loggamma(a) - special.loggamma(a + b + s))

    return fn


class TestGilPelaez:
    def test_point_mass(self):
        p = 0.5
        fn = lambda t: np.exp(1j * t * math.log(p))
        assert gil_pelaez_ccdf(fn, 0.3) == pytest.approx(1.0, abs=5e-3)
        assert gil_pelaez_ccdf(fn, 0.7) == pytest.approx(0.0, abs=5e-3)

    @pytest.mark.parametrize("a,b", [(2.0, 3.0), (5.0, 1.2), (0.7, 0.9)])
    def test_recovers_beta_law(self, a, b):
        x = np.linspace(0.05, 0.95, 19)
        got = gil_pelaez_ccdf(_beta_moments(a, b), x)
        np.testing.assert_allclose(got, stats.beta.sf(x, a, b), atol=2e-3)

    def test_info_and_failure(self):
        fn = _beta_moments(2.0, 3.0)
        _, info = gil_pelaez_ccdf(fn, [0.4], return_info=True)
        assert info["tail_bound"] < 1e-3
        with pytest.raises(ConvergenceError) as exc:
            gil_pelaez_ccdf(lambda t: np.exp(1j * t * math.log(0.5)), 0.49, tol=1e-9, t_max=200)
        assert exc.value.tail_bound > 1e-9

    def test_domain(self):
        with pytest.raises(ValueError):
            gil_pelaez_ccdf(_beta_moments(2, 2), [0.0, 0.5])


class TestBetaFit:
    def test_hand_solved(self):
        fit = beta_approximation(2 / 3, 1 / 2)
        assert fit.shape_a == pytest.approx(2.0)
        assert fit.shape_b == pytest.approx(1.0)
        assert fit.variance == pytest.approx(1 / 18)

    def test_zero_variance_is_step(self):
        fit = beta_approximation(0.5, 0.25)
        assert fit.step_at == 0.5
        np.testing.assert_array_equal(fit.ccdf([0.3, 0.7]), [1.0, 0.0])

    def test_boundary_mean(self):
        assert beta_approximation(1.0, 1.0).step_at == 1.0

    def test_invalid_moments(self):
        with pytest.raises(ValueError):
            beta_approximation(0.5, 0.6)
        with pytest.raises(ValueError):
            beta_approximation(1.5, 0.6)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(0.2, 20.0), b=st.floats(0.2, 20.0))
    def test_round_trip(self, a, b):
        m1 = a / (a + b)
        m2 = m1 * (a + 1) / (a + b + 1)
        fit = beta_approximation(m1, m2)
        assert fit.shape_a == pytest.approx(a, rel=1e-8)
        assert fit.shape_b == pytest.approx(b, rel=1e-8)
        assert isinstance(fit, BetaFit)


class TestMetaCurve:
    def test_validation(self):
        with pytest.raises(ValueError):
            MetaCurve(np.array([0.0, 0.5, 1.0]), np.array([1.0, 0.2, 0.4]))
        with pytest.raises(ValueError):
            MetaCurve(np.array([0.0, 1.0, 0.5]), np.array([1.0, 0.5, 0.0]))

    def test_csv_round_trip(self, tmp_path):
        curve = meta_distribution(DEFAULTS, ActivityModel(0.5), "CEU", "beta")
        path = tmp_path / "c.csv"
        curve.to_csv(path)
        back = MetaCurve.from_csv(path)
        np.testing.assert_array_equal(back.grid, curve.grid)
        np.testing.assert_array_equal(back.values, curve.values)

    def test_inactive_network_is_flat(self):
        for method in ("gil_pelaez", "beta"):
            curve = meta_distribution(DEFAULTS, ActivityModel(0.0), "CCU", method)
            assert np.all(curve.values[GRID < 1.0] == 1.0)


class TestMetaDistribution:
    @pytest.mark.parametrize("cls", ["CCU", "CEU"])
    def test_area_is_mean(self, cls):
        act = ActivityModel(0.5)
        curve = meta_distribution(DEFAULTS, act, cls)
        assert curve.mean() == pytest.approx(float(moment(1, DEFAULTS, act, cls)), abs=0.01)

    @pytest.mark.parametrize("cls", ["CCU", "CEU"])
    def test_beta_close_to_inversion(self, cls):
        act = ActivityModel(0.5)
        gp = meta_distribution(DEFAULTS, act, cls, "gil_pelaez")
        bt = meta_distribution(DEFAULTS, act, cls, "beta")
        assert gp.sup_distance(bt, 0.05, 0.95) <= 0.05

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            meta_distribution(DEFAULTS, ActivityModel(0.5), "CCU", "saddle")

    def test_random_activity_needs_beta(self):
        act = ActivityModel(0.3, q_moments=(0.3, 0.12))
        with pytest.raises(ValueError):
            meta_distribution(DEFAULTS, act, "CCU", "gil_pelaez")


def _uniform_curve():
    return MetaCurve(GRID, 1.0 - GRID)


class TestActivityFunctional:
    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(1e-4, 0.9999))
    def test_uniform_reliability_closed_forms(self, a):
        # P uniform on (0, 1): E[min(1, a/P)] = a (1 - ln a), E[min(1, a/P)^2] = 2a - a^2
        curve = _uniform_curve()
        assert _min_ratio_moment(curve.grid, curve.values, a, 1) == pytest.approx(a * (1 - math.log(a)), abs=1e-12)
        assert _min_ratio_moment(curve.grid, curve.values, a, 2) == pytest.approx(2 * a - a * a, abs=1e-12)

    def test_edges(self):
        curve = _uniform_curve()
        assert mean_active_probability(curve, 0.0, 3.0) == 0.0
        assert mean_active_probability(curve, 1.0, 3.0) == pytest.approx(1.0)

    def test_near_perfect_links_match_load_average(self):
        # the tabulated step makes P uniform on [0.99, 1]
        curve = MetaCurve(GRID, np.where(GRID < 1.0, 1.0, 0.0))
        xi = 0.2
        nu = np.arange(1, 400)
        a = nu * xi
        lo = 0.99
        per_nu = np.where(
            a >= 1.0,
            1.0,
            np.where(a <= lo, a * np.log(1 / lo), (a - lo) + a * np.log(1 / np.minimum(a, 1.0))) / (1 - lo),
        )
        g = cell_load_pmf(nu, 3.0)
        ref = np.dot(g, per_nu) / (1 - cell_load_pmf(0, 3.0))
        assert mean_active_probability(curve, xi, 3.0) == pytest.approx(ref, abs=1e-9)

    def test_second_moment_bounds(self):
        curve = meta_distribution(DEFAULTS, ActivityModel(0.5), "CEU", "beta")
        m1 = mean_active_moment_functional(curve, 0.1, 3.0, 1)
        m2 = mean_active_moment_functional(curve, 0.1, 3.0, 2)
        assert m1 * m1 <= m2 <= m1

    def test_domain(self):
        with pytest.raises(ValueError):
            mean_active_probability(_uniform_curve(), 1.5, 3.0)
        with pytest.raises(ValueError):
            mean_active_moment_functional(_uniform_curve(), 0.1, 3.0, 0)


class TestFixedPoint:
    def test_no_traffic(self):
        res = fixed_point_solve(DEFAULTS, 0.0, "CEU", "beta")
        assert res.q_star == 0.0
        assert np.all(res.curve.values[GRID < 1.0] == 1.0)
        assert stability_verdict(res) == "stable"

    def test_full_traffic_saturates(self):
        res = fixed_point_solve(DEFAULTS, 1.0, "CCU", "beta")
        assert res.q_star == pytest.approx(1.0)
        assert res.saturated
        assert stability_verdict(res) == "unstable"

    def test_frozen_values_beta(self):
        # values recorded from the damped solver at tol 1e-5
        ref = {("CCU", 0.1): 0.3674, ("CEU", 0.1): 0.7972, ("CEU", 0.05): 0.4214, ("CCU", 0.25): 0.7456}
        for (cls, xi), q in ref.items():
            res = fixed_point_solve(DEFAULTS, xi, cls, "beta")
            assert res.converged
            assert res.q_star == pytest.approx(q, abs=2e-4)

    def test_inversion_method_agrees(self):
        res = fixed_point_solve(DEFAULTS, 0.1, "CEU", "gil_pelaez")
        assert res.converged
        assert res.q_star == pytest.approx(0.7929, abs=2e-3)

    def test_random_activity_mode(self):
        mean = fixed_point_solve(DEFAULTS, 0.1, "CEU", "beta")
        mom = fixed_point_solve(DEFAULTS, 0.1, "CEU", "beta", activity="moments")
        assert mom.converged
        m1, m2 = mom.q_moments
        assert m1 * m1 <= m2 <= m1
        assert mom.q_star == pytest.approx(mean.q_star, abs=0.05)
        with pytest.raises(ValueError):
            fixed_point_solve(DEFAULTS, 0.1, "CEU", "gil_pelaez", activity="moments")

    def test_recursive_temporal_reaches_same_point(self):
        res = fixed_point_solve(DEFAULTS, 0.1, "CEU", "beta", "recursive_temporal")
        assert res.converged
        assert res.q_star == pytest.approx(0.7972, abs=1e-3)
        assert len(res.history) == res.iterations + 1

    def test_monotone_in_arrival_rate(self):
        xis = [0.01, 0.05, 0.1, 0.15, 0.2, 0.25]
        for cls in ("CCU", "CEU"):
            results = [fixed_point_solve(DEFAULTS, xi, cls, "beta") for xi in xis]
            qs = [r.q_star for r in results]
            assert all(a <= b for a, b in zip(qs, qs[1:]))
            assert all(a.curve.dominates(b.curve, tol=1e-9) for a, b in zip(results, results[1:]))

    def test_summary_block(self):
        res = fixed_point_solve(DEFAULTS, 0.05, "CCU", "beta")
        text = res.summary()
        keys = [line.split(" = ")[0] for line in text.strip().splitlines()]
        assert keys[:6] == ["q_star", "iterations", "residual", "converged", "saturated", "verdict"]

    def test_domain(self):
        with pytest.raises(ValueError):
            fixed_point_solve(DEFAULTS, -0.1, "CCU")
        with pytest.raises(ValueError):
            fixed_point_solve(DEFAULTS, 0.1, "CCU", mode="sequential")
