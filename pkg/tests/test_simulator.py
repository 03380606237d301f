import csv
import math

import numpy as np
import pytest
from scipy import integrate

from cellmeta.geometry import NetworkParams, sample_network
from cellmeta.moments import ActivityModel, critical_activity, moment_ccu
from cellmeta.simulator import (
    QueueOverflowError,
    SimStats,
    TooFewLinksError,
    empirical_mean_local_delay,
    empirical_meta,
    empirical_moment,
    far_field_exponent,
    hill_tail_index,
    run_fixed_activity,
    run_fixed_activity_grid,
    run_queue_coupled,
    write_stats_csv,
)

DEFAULTS = NetworkParams()
P5 = DEFAULTS.with_threshold_db(5.0)


@pytest.fixture(scope="module")
def snap():
    return sample_network(DEFAULTS, 2000.0, 2024)


def _synthetic(successes, attempts, is_ccu=None):
    s = np.asarray(successes, dtype=np.int64)
    n = s.size
    zeros = np.zeros(n, dtype=np.int64)
    return SimStats(
        mode="fixed",
        geometry=zeros.copy(),
        user=np.arange(n),
        is_ccu=np.ones(n, bool) if is_ccu is None else np.asarray(is_ccu, bool),
        link_distance=np.ones(n),
        dominant_distance=np.full(n, 2.0),
        attempts=np.asarray(attempts, dtype=np.int64),
        successes=s,
        activity_fraction=np.ones(n),
        attempts_ring_active=zeros.copy(),
        successes_ring_active=zeros.copy(),
        attempts_dominant_idle=zeros.copy(),
        successes_dominant_idle=zeros.copy(),
        bs_activity=np.zeros(0),
        service_times=np.zeros(0, dtype=np.int64),
        service_link=np.zeros(0, dtype=np.int64),
        arrivals=zeros.copy(),
        departures=zeros.copy(),
        final_queue=zeros.copy(),
    )


class TestFarField:
    def test_matches_cartesian_oracle(self):
        r = 60.0
        side = 2000.0
        c = DEFAULTS.sir_threshold * r**DEFAULTS.pathloss_exponent
        d = DEFAULTS.delta
        # whole plane: pi c^delta * pi delta / sin(pi delta)
        plane = math.pi * c**d * math.pi * d / math.sin(math.pi * d)
        f = lambda y, x: c / (c + (x * x + y * y) ** (DEFAULTS.pathloss_exponent / 2))
        inside, _ = integrate.dblquad(f, 0, side / 2, 0, side / 2, epsabs=1e-10, epsrel=1e-10)
        ref = DEFAULTS.bs_density * (plane - 4 * inside)
        assert far_field_exponent([r], DEFAULTS, side)[0] == pytest.approx(ref, rel=1e-6)

    def test_increasing_in_distance(self):
        j = far_field_exponent(np.array([10.0, 50.0, 200.0]), DEFAULTS, 2000.0)
        assert np.all(j > 0) and np.all(np.diff(j) > 0)


class TestFixedActivity:
    def test_no_interference(self, snap):
        st = run_fixed_activity(snap, DEFAULTS, 0.0, 50, 1, far_field=False)
        assert np.all(st.p_hat == 1.0)

    def test_tiny_threshold(self, snap):
        st = run_fixed_activity(snap, DEFAULTS.replace(sir_threshold=1e-12), 1.0, 50, 1)
        assert np.all(st.p_hat == 1.0)

    def test_bit_identical_reruns(self, snap):
        a = run_fixed_activity(snap, P5, 0.5, 100, 9)
        b = run_fixed_activity(snap, P5, 0.5, 100, 9)
        c = run_fixed_activity(snap, P5, 0.5, 100, 10)
        assert a.equals(b)
        assert not a.equals(c)

    def test_grid_matches_single_point(self, snap):
        grid = run_fixed_activity_grid(snap, DEFAULTS, [0.3, 0.7], [1.0, P5.sir_threshold], 60, 4)
        assert set(grid) == {(t, q) for t in (1.0, P5.sir_threshold) for q in (0.3, 0.7)}
        # a higher threshold or more activity never helps on shared draws
        lo = grid[(1.0, 0.3)].successes
        assert np.all(grid[(P5.sir_threshold, 0.3)].successes <= lo)
        assert np.all(grid[(1.0, 0.7)].successes <= lo)

    def test_ccu_mean_matches_moment(self):
        parts = []
        seeds = np.random.SeedSequence(77).spawn(4)
        for i, k in enumerate(seeds):
            g, d = k.spawn(2)
            parts.append(run_fixed_activity(sample_network(DEFAULTS, 2000.0, g), DEFAULTS, 1.0, 400, d, geometry_index=i))
        st = SimStats.merge(parts)
        m, se = empirical_moment(st, 1, "CCU")
        ref = float(moment_ccu(1, DEFAULTS, ActivityModel(1.0)))
        assert abs(m - ref) <= 3 * se

    def test_standard_error_scales_with_draws(self, snap):
        def spread(draws):
            a = run_fixed_activity(snap, P5, 0.5, draws, 100).p_hat
            b = run_fixed_activity(snap, P5, 0.5, draws, 200).p_hat
            return np.var(a - b) / 2

        ratio = spread(100) / spread(400)
        assert 3.0 <= ratio <= 5.0

    def test_merge_offsets(self, snap):
        a = run_fixed_activity(snap, DEFAULTS, 0.5, 20, 1, geometry_index=0)
        b = run_fixed_activity(snap, DEFAULTS, 0.5, 20, 2, geometry_index=1)
        m = SimStats.merge([a, b])
        assert m.n_links == a.n_links + b.n_links
        assert set(np.unique(m.geometry)) == {0, 1}

    def test_csv_export(self, snap, tmp_path):
        st = run_fixed_activity(snap, DEFAULTS, 0.5, 20, 1)
        path = tmp_path / "links.csv"
        write_stats_csv(st, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["link_id", "geometry", "class", "R_m", "R_d", "attempts", "successes", "activity_fraction"]
        assert len(rows) == st.n_links + 1


class TestEstimators:
    def test_perfect_links(self):
        st = _synthetic([10, 10], [10, 10])
        curve = empirical_meta(st, None, floor=1)
        assert np.all(curve.values[curve.grid < 1.0] == 1.0)
        d = empirical_mean_local_delay(st, None, floor=1)
        assert d.mean_inverse == 1.0

    def test_single_link_step(self):
        curve = empirical_meta(_synthetic([5], [10]), None, floor=1)
        assert curve(0.49) == 1.0 and curve(0.51) == 0.0

    def test_mean_inverse(self):
        d = empirical_mean_local_delay(_synthetic([2, 1], [4, 4]), None, floor=1)
        assert d.mean_inverse == pytest.approx(3.0)

    def test_zero_success_is_infinite(self):
        d = empirical_mean_local_delay(_synthetic([0, 3], [4, 4]), None, floor=1)
        assert d.infinite and d.zero_success_links == 1

    def test_floor(self):
        with pytest.raises(TooFewLinksError):
            empirical_meta(_synthetic([1], [5]), None, floor=10)

    def test_unbiased_second_moment(self):
        # s(s-1)/(D(D-1)) with s=2, D=4 gives 1/6
        m, _ = empirical_moment(_synthetic([2], [4]), 2, None)
        assert m == pytest.approx(1 / 6)

    def test_hill_index(self):
        rng = np.random.default_rng(0)
        x = rng.pareto(2.0, 200_000) + 1.0
        assert hill_tail_index(x, 0.02) == pytest.approx(2.0, rel=0.1)
        assert hill_tail_index(np.append(x[:100], [np.inf] * 10), 0.05) == 0.0


class TestDelayDivergence:
    def test_estimate_tracks_critical_activity(self, snap):
        qc = critical_activity(P5, "CEU")
        grid = run_fixed_activity_grid(snap, P5, [0.1, 0.5], [P5.sir_threshold], 1000, 5)
        below = grid[(P5.sir_threshold, 0.1)]
        above = grid[(P5.sir_threshold, 0.5)]
        assert qc == pytest.approx(0.22, abs=0.01)
        assert not empirical_mean_local_delay(below, "CEU").infinite
        est = empirical_mean_local_delay(above, "CEU")
        assert est.infinite
        # with finitely many draws the tail index of 1/P sits at or below one
        with np.errstate(divide="ignore"):
            inverse = 1.0 / above.p_hat[above.select("CEU", 200)]
        assert hill_tail_index(inverse, 0.05) <= 1.0


class TestQueueCoupled:
    def test_no_arrivals(self, snap):
        st = run_queue_coupled(snap, DEFAULTS, 0.0, 300, 100, 1)
        assert st.attempts.sum() == 0 and st.activity_fraction.max() == 0.0

    def test_conservation_and_determinism(self, snap):
        a = run_queue_coupled(snap, DEFAULTS, 0.1, 1500, 500, 3)
        b = run_queue_coupled(snap, DEFAULTS, 0.1, 1500, 500, 3)
        assert a.equals(b)
        np.testing.assert_array_equal(a.arrivals, a.departures + a.final_queue)
        assert a.work_conservation_violations == 0

    def test_single_user_cells_with_certain_success(self, snap):
        xi = 0.1
        st = run_queue_coupled(snap, DEFAULTS.replace(sir_threshold=1e-12), xi, 6000, 1000, 8)
        counts = np.bincount(snap.association, minlength=snap.n_bs)
        lone = counts[snap.association] == 1
        assert lone.sum() >= 20
        # every packet leaves in its arrival slot, so the BS is busy a fraction xi
        assert st.activity_fraction[lone].mean() == pytest.approx(xi, abs=0.01)
        assert np.all(st.successes == st.attempts)

    def test_overflow(self, snap):
        with pytest.raises(QueueOverflowError):
            run_queue_coupled(snap, P5, 1.0, 400, 10, 1, max_queue=50)

    def test_bad_horizon(self, snap):
        with pytest.raises(ValueError):
            run_queue_coupled(snap, DEFAULTS, 0.1, 100, 100)
