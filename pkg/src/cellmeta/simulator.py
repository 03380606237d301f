"""Monte Carlo engine on a torus window.

Two modes share the geometry from :mod:`cellmeta.geometry`:

* fixed activity: every interfering BS is on with probability ``q`` in each
  draw, fading is redrawn per draw, geometry is frozen;
* queue coupled: per-user Bernoulli arrivals, one random non-empty queue
  served per BS and slot, retransmission on failure.

Interference from BSs beyond the window is folded in analytically. The
serving-link fading is exponential, so given the near interference the
success event splits into ``h0 > theta r^a I_near`` and an independent
Bernoulli event with probability ``E[exp(-theta r^a I_far)]``, the latter
computed from the PPP probability generating functional outside the
square. This keeps the per-draw success law exact without simulating an
unbounded plane.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import special

from .geometry import GeometrySnapshot, NetworkParams, UserClass
from .metadist import MetaCurve, default_grid

__all__ = [
    "SimStats",
    "QueueSystemState",
    "QueueOverflowError",
    "TooFewLinksError",
    "DelayEstimate",
    "far_field_exponent",
    "run_fixed_activity",
    "run_fixed_activity_grid",
    "run_queue_coupled",
    "empirical_meta",
    "empirical_moment",
    "empirical_mean_local_delay",
    "hill_tail_index",
    "write_stats_csv",
]

DEFAULT_FLOOR = 200

# elements per fading chunk (draws x users x BSs), float32
_CHUNK_ELEMENTS = 8_000_000


class QueueOverflowError(RuntimeError):
    """A queue outgrew the configured budget; the system is unstable."""

    def __init__(self, slot, user, length, budget):
        super().__init__(
            f"queue of user {user} reached {length} packets at slot {slot} "
            f"(budget {budget}); arrivals outpace service, the network is unstable"
        )
        self.slot = slot
        self.user = user
        self.length = length


class TooFewLinksError(ValueError):
    def __init__(self, count, floor):
        super().__init__(f"only {count} links have at least {floor} attempts")
        self.count = count


def far_field_exponent(link_distance, params: NetworkParams, side: float, n_angles: int = 32) -> np.ndarray:
    """``lambda * int_{outside square} s/(1+s) dx`` per link.

    ``s = theta r**alpha |x|**-alpha`` and the square of side ``side`` is
    centred on the user. Multiplying by the activity ``q`` gives the log of
    the far-field success factor. By symmetry the angular integral runs
    over one octant, where the square's edge sits at ``(side/2)/cos(phi)``.
    """
    r = np.asarray(link_distance, dtype=float)
    a, d = params.pathloss_exponent, params.delta
    x, w = leggauss(n_angles)
    phi = (x + 1.0) * math.pi / 8.0
    wphi = w * math.pi / 8.0
    rho = (side / 2.0) / np.cos(phi)
    c = params.sir_threshold * r[:, None] ** a * rho[None, :] ** (-a)
    # int_rho^inf s/(1+s) x dx = rho^2/2 * d c/(1-d) 2F1(1, 1-d; 2-d; -c)
    radial = rho**2 / 2.0 * d * c / (1.0 - d) * special.hyp2f1(1.0, 1.0 - d, 2.0 - d, -c)
    return params.bs_density * 8.0 * (radial @ wphi)


@dataclass
class SimStats:
    """Per-link counters gathered by either simulation mode.

    Arrays are indexed by link. ``activity_fraction`` is the fraction of
    draws or slots in which the link's serving BS transmitted. The
    ``*_ring_active`` counters only count draws with at least one active
    interferer in ``[r, r/R)``; ``*_dominant_idle`` only those where the
    second-nearest BS was silent.
    """

    mode: str
    geometry: np.ndarray
    user: np.ndarray
    is_ccu: np.ndarray
    link_distance: np.ndarray
    dominant_distance: np.ndarray
    attempts: np.ndarray
    successes: np.ndarray
    activity_fraction: np.ndarray
    attempts_ring_active: np.ndarray
    successes_ring_active: np.ndarray
    attempts_dominant_idle: np.ndarray
    successes_dominant_idle: np.ndarray
    bs_activity: np.ndarray
    service_times: np.ndarray
    service_link: np.ndarray
    arrivals: np.ndarray
    departures: np.ndarray
    final_queue: np.ndarray
    work_conservation_violations: int = 0
    settings: dict = field(default_factory=dict)

    @property
    def n_links(self) -> int:
        return len(self.attempts)

    @property
    def p_hat(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.attempts > 0, self.successes / np.maximum(self.attempts, 1), np.nan)

    def select(self, cls=None, floor: int = 0) -> np.ndarray:
        mask = self.attempts >= max(floor, 1)
        if cls is not None:
            is_ccu = UserClass.parse(cls) is UserClass.CCU
            mask &= self.is_ccu == is_ccu
        return mask

    def equals(self, other: "SimStats") -> bool:
        """Bit-for-bit equality of every counter."""
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.dtype != b.dtype or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    @classmethod
    def merge(cls, parts) -> "SimStats":
        """Concatenate per-geometry stats in the given order."""
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to merge")
        kw = {}
        for f in fields(cls):
            vals = [getattr(p, f.name) for p in parts]
            if f.name == "mode":
                kw[f.name] = vals[0]
            elif f.name == "work_conservation_violations":
                kw[f.name] = int(sum(vals))
            elif f.name == "settings":
                kw[f.name] = dict(vals[0])
            elif f.name == "service_link":
                offsets = np.cumsum([0] + [p.n_links for p in parts[:-1]])
                kw[f.name] = np.concatenate([v + o for v, o in zip(vals, offsets)])
            else:
                kw[f.name] = np.concatenate(vals)
        return cls(**kw)


@dataclass
class QueueSystemState:
    """Queues and activity at the start of slot ``slot``.

    ``queues`` holds one array of per-user queue lengths per BS.
    """

    slot: int
    queues: list
    active: np.ndarray


def _geometry_arrays(snapshot: GeometrySnapshot, params: NetworkParams):
    d = snapshot.distances()
    gain = (d ** (-params.pathloss_exponent)).astype(np.float32)
    rows = np.arange(snapshot.n_users)
    gain[rows, snapshot.association] = 0.0
    r = snapshot.link_distance
    ring = (d >= r[:, None]) & (d < r[:, None] / snapshot.params.ratio_threshold)
    ring[rows, snapshot.association] = False
    return gain, ring


def _empty_stats(snapshot, mode, geometry_index, n_bs):
    n = snapshot.n_users
    z = lambda: np.zeros(n, dtype=np.int64)
    return dict(
        mode=mode,
        geometry=np.full(n, geometry_index, dtype=np.int64),
        user=np.arange(n, dtype=np.int64),
        is_ccu=np.array(snapshot.is_ccu, dtype=bool),
        link_distance=np.array(snapshot.link_distance),
        dominant_distance=np.array(snapshot.dominant_distance),
        attempts=z(),
        successes=z(),
        attempts_ring_active=z(),
        successes_ring_active=z(),
        attempts_dominant_idle=z(),
        successes_dominant_idle=z(),
        arrivals=z(),
        departures=z(),
        final_queue=z(),
    )


def run_fixed_activity(
    snapshot: GeometrySnapshot,
    params: NetworkParams,
    q: float,
    draws: int,
    rng_seed=0,
    *,
    far_field: bool = True,
    geometry_index: int = 0,
) -> SimStats:
    """Estimate each user's conditional success probability.

    Each draw resamples Bernoulli(``q``) activity for every BS (shared by
    all users of the draw) and unit-mean exponential fading on every link.
    The serving BS always transmits. ``params`` supplies ``theta`` and
    ``alpha``; the class labels come from ``snapshot``.
    """
    out = run_fixed_activity_grid(
        snapshot, params, [q], [params.sir_threshold], draws, rng_seed,
        far_field=far_field, geometry_index=geometry_index,
    )
    return out[(params.sir_threshold, q)]


def run_fixed_activity_grid(
    snapshot: GeometrySnapshot,
    params: NetworkParams,
    qs,
    thetas,
    draws: int,
    rng_seed=0,
    *,
    far_field: bool = True,
    geometry_index: int = 0,
) -> dict:
    """:func:`run_fixed_activity` for several ``(theta, q)`` at once.

    All grid points reuse the same fading draws, and activities are coupled
    through common uniforms (BS on iff ``U < q``). Each point on its own
    has exactly the single-run law; points are correlated with each other.
    Returns ``{(theta, q): SimStats}``.
    """
    if int(draws) != draws or draws < 1:
        raise ValueError(f"draws must be a positive integer, got {draws}")
    qs = [float(q) for q in qs]
    thetas = [float(t) for t in thetas]
    if any(not 0.0 <= q <= 1.0 for q in qs):
        raise ValueError(f"activities must lie in [0, 1], got {qs}")
    if any(not t > 0 for t in thetas):
        raise ValueError(f"thresholds must be positive, got {thetas}")
    rng = np.random.default_rng(rng_seed)
    U, B = snapshot.n_users, snapshot.n_bs
    gain, ring = _geometry_arrays(snapshot, params)
    ring_f = ring.T.astype(np.float32)
    r_alpha = snapshot.link_distance**params.pathloss_exponent
    thr = {t: (t * r_alpha).astype(np.float32) for t in thetas}
    far_exp = {
        t: far_field_exponent(snapshot.link_distance, params.replace(sir_threshold=t), snapshot.side)
        if far_field else np.zeros(U)
        for t in thetas
    }
    far = {(t, q): np.exp(-q * far_exp[t]).astype(np.float32) for t in thetas for q in qs}
    acc = {key: _empty_stats(snapshot, "fixed", geometry_index, B) for key in far}
    bs_on = {q: np.zeros(B, dtype=np.int64) for q in qs}
    chunk = max(1, _CHUNK_ELEMENTS // max(1, U * B))
    done = 0
    while done < draws:
        c = min(chunk, draws - done)
        u_on = rng.random((c, B), dtype=np.float32)
        fade = rng.standard_exponential((c, U, B), dtype=np.float32)
        fade *= gain
        h0 = rng.standard_exponential((c, U), dtype=np.float32)
        u_far = rng.random((c, U), dtype=np.float32)
        for q in qs:
            on = u_on < q
            on_f = on.astype(np.float32)
            interference = np.matmul(fade, on_f[:, :, None])[..., 0]
            ring_on = (on_f @ ring_f) > 0
            dom_idle = ~on[:, snapshot.dominant_bs]
            bs_on[q] += on.sum(axis=0)
            for t in thetas:
                a = acc[(t, q)]
                ok = (h0 > thr[t] * interference) & (u_far < far[(t, q)])
                a["attempts"] += c
                a["successes"] += ok.sum(axis=0)
                a["attempts_ring_active"] += ring_on.sum(axis=0)
                a["successes_ring_active"] += (ok & ring_on).sum(axis=0)
                a["attempts_dominant_idle"] += dom_idle.sum(axis=0)
                a["successes_dominant_idle"] += (ok & dom_idle).sum(axis=0)
        done += c
    return {
        (t, q): SimStats(
            activity_fraction=np.ones(U),
            bs_activity=bs_on[q] / draws,
            service_times=np.zeros(0, dtype=np.int64),
            service_link=np.zeros(0, dtype=np.int64),
            settings={"q": q, "draws": draws, "theta": t, "far_field": far_field},
            **acc[(t, q)],
        )
        for (t, q) in acc
    }


def run_queue_coupled(
    snapshot: GeometrySnapshot,
    params: NetworkParams,
    xi: float,
    slots: int,
    warmup: int = 2000,
    rng_seed=0,
    *,
    far_field: bool = True,
    max_queue: int = 10_000,
    geometry_index: int = 0,
    return_state: bool = False,
):
    """Slotted system with per-user queues and random scheduling.

    Per slot: Bernoulli(``xi``) arrivals, then every BS with a non-empty
    queue serves one of them uniformly at random, then each scheduled link
    succeeds if its SIR against the concurrently active BSs exceeds
    ``theta``. Success removes the head packet; failure keeps it. Attempt,
    success, activity and service-time counters cover slots
    ``warmup .. slots - 1``; arrivals and departures cover the whole run so
    that ``arrivals == departures + final_queue`` holds per queue.

    Raises
    ------
    QueueOverflowError
        When any queue exceeds ``max_queue``.
    """
    if not slots > warmup >= 0:
        raise ValueError(f"need slots > warmup >= 0, got slots={slots}, warmup={warmup}")
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")
    rng = np.random.default_rng(rng_seed)
    U, B = snapshot.n_users, snapshot.n_bs
    base = _empty_stats(snapshot, "queue", geometry_index, B)
    gain, ring = _geometry_arrays(snapshot, params)
    assoc = snapshot.association
    thr = params.sir_threshold * snapshot.link_distance**params.pathloss_exponent
    far_exp = far_field_exponent(snapshot.link_distance, params, snapshot.side) if far_field else np.zeros(U)

    perm = np.argsort(assoc, kind="stable")
    sorted_bs = assoc[perm]
    starts = np.flatnonzero(np.r_[True, sorted_bs[1:] != sorted_bs[:-1]]) if U else np.zeros(0, int)
    seg_bs = sorted_bs[starts]
    seg_of = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, U]))

    queue = np.zeros(U, dtype=np.int64)
    hol_attempts = np.zeros(U, dtype=np.int64)
    link_active_slots = np.zeros(U, dtype=np.int64)
    bs_active_slots = np.zeros(B, dtype=np.int64)
    service = []
    service_link = []
    violations = 0
    for slot in range(slots):
        counting = slot >= warmup
        arrive = rng.random(U) < xi
        queue += arrive
        keys = rng.random(U)
        keys[queue == 0] = -1.0
        ks = keys[perm]
        seg_max = np.maximum.reduceat(ks, starts) if U else ks
        chosen_sorted = (ks == seg_max[seg_of]) & (ks >= 0.0)
        sched = perm[chosen_sorted]
        active_bs = np.zeros(B, dtype=bool)
        active_bs[seg_bs[seg_max >= 0.0]] = True
        busy = np.zeros(B, dtype=bool)
        busy[assoc[queue > 0]] = True
        violations += int(np.count_nonzero(busy != active_bs))
        act_idx = np.flatnonzero(active_bs)
        if sched.size:
            g = gain[np.ix_(sched, act_idx)]
            fade = rng.standard_exponential(g.shape)
            interference = (fade * g).sum(axis=1)
            h0 = rng.standard_exponential(sched.size)
            q_slot = act_idx.size / B
            far_ok = rng.random(sched.size) < np.exp(-q_slot * far_exp[sched])
            ok = (h0 > thr[sched] * interference) & far_ok
            hol_attempts[sched] += 1
            won = sched[ok]
            queue[won] -= 1
            base["departures"][won] += 1
            if counting:
                base["attempts"][sched] += 1
                base["successes"][won] += 1
                service.append(hol_attempts[won].copy())
                service_link.append(won)
            hol_attempts[won] = 0
        base["arrivals"] += arrive
        if counting:
            bs_active_slots += active_bs
            link_active_slots += active_bs[assoc]
        over = np.flatnonzero(queue > max_queue)
        if over.size:
            raise QueueOverflowError(slot, int(over[0]), int(queue[over[0]]), max_queue)
    n_count = slots - warmup
    base["final_queue"] = queue.copy()
    stats = SimStats(
        activity_fraction=link_active_slots / n_count,
        bs_activity=bs_active_slots / n_count,
        service_times=np.concatenate(service) if service else np.zeros(0, dtype=np.int64),
        service_link=np.concatenate(service_link).astype(np.int64) if service_link else np.zeros(0, dtype=np.int64),
        work_conservation_violations=violations,
        settings={"xi": xi, "slots": slots, "warmup": warmup, "theta": params.sir_threshold, "far_field": far_field},
        **base,
    )
    if return_state:
        queues = [queue[perm[s:e]].copy() for s, e in zip(starts, np.r_[starts[1:], U])]
        return stats, QueueSystemState(slot=slots, queues=queues, active=active_bs)
    return stats


def empirical_meta(stats: SimStats, cls=None, grid=None, floor: int = DEFAULT_FLOOR) -> MetaCurve:
    """Fraction of qualifying links whose estimate exceeds each ``x``."""
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    mask = stats.select(cls, floor)
    n = int(mask.sum())
    if n == 0:
        raise TooFewLinksError(n, floor)
    p = np.sort(stats.p_hat[mask])
    above = 1.0 - np.searchsorted(p, grid, side="right") / n
    above[grid <= 0.0] = 1.0
    above[grid >= 1.0] = 0.0
    return MetaCurve(grid, above, f"empirical {cls or 'all'}")


def _falling(k, b):
    out = np.ones_like(k, dtype=float)
    for i in range(b):
        out *= k - i
    return out


def empirical_moment(stats: SimStats, b: int, cls=None, floor: int = 1):
    """Mean of ``P**b`` over links with its standard error.

    Integer ``b >= 1`` uses the unbiased falling-factorial estimator
    ``s(s-1)...(s-b+1) / (D(D-1)...(D-b+1))`` per link.
    """
    mask = stats.select(cls, max(floor, b))
    if not mask.any():
        raise TooFewLinksError(0, floor)
    s = stats.successes[mask].astype(float)
    d = stats.attempts[mask].astype(float)
    if int(b) == b and b >= 1:
        vals = _falling(s, int(b)) / _falling(d, int(b))
    else:
        with np.errstate(divide="ignore"):
            vals = (s / d) ** b
    n = vals.size
    se = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return float(np.mean(vals)), se


@dataclass(frozen=True)
class DelayEstimate:
    """Two delay estimates over the qualifying links.

    ``mean_inverse`` averages ``1/P`` per link (``inf`` when some link
    never succeeded); ``mean_service_time`` averages observed per-packet
    attempt counts (``nan`` without queue data).
    """

    mean_inverse: float
    mean_service_time: float
    n_links: int
    zero_success_links: int

    @property
    def infinite(self) -> bool:
        return math.isinf(self.mean_inverse)


def empirical_mean_local_delay(stats: SimStats, cls=None, floor: int = DEFAULT_FLOOR) -> DelayEstimate:
    mask = stats.select(cls, floor)
    n = int(mask.sum())
    if n == 0:
        raise TooFewLinksError(n, floor)
    p = stats.p_hat[mask]
    zeros = int(np.count_nonzero(p == 0))
    inv = math.inf if zeros else float(np.mean(1.0 / p))
    cls_links = stats.select(cls, 0)
    served_mask = cls_links[stats.service_link] if stats.service_times.size else np.zeros(0, bool)
    if served_mask.any():
        served = float(np.mean(stats.service_times[served_mask]))
    else:
        served = math.nan
    return DelayEstimate(inv, served, n, zeros)


def hill_tail_index(samples, tail_fraction: float = 0.05) -> float:
    """Hill estimate of the Pareto tail index of positive ``samples``.

    ``inf`` entries count as exceedances beyond every finite value and push
    the estimate to zero. An index below one means an infinite mean.
    """
    x = np.asarray(samples, dtype=float)
    x = x[x > 0]
    k = max(2, int(tail_fraction * x.size))
    if x.size <= k:
        raise ValueError("not enough samples for the requested tail fraction")
    if np.isinf(x).sum() >= k:
        return 0.0
    top = np.sort(x)[-(k + 1):]
    if np.isinf(top).any():
        return 0.0
    logs = np.log(top[1:]) - math.log(top[0])
    mean_log = float(np.mean(logs))
    return math.inf if mean_log == 0.0 else 1.0 / mean_log


def write_stats_csv(stats: SimStats, path) -> None:
    """Per-link export: link id, geometry, class, distances, counters, activity."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["link_id", "geometry", "class", "R_m", "R_d", "attempts", "successes", "activity_fraction"])
        for i in range(stats.n_links):
            w.writerow(
                [
                    i,
                    int(stats.geometry[i]),
                    "CCU" if stats.is_ccu[i] else "CEU",
                    repr(float(stats.link_distance[i])),
                    repr(float(stats.dominant_distance[i])),
                    int(stats.attempts[i]),
                    int(stats.successes[i]),
                    repr(float(stats.activity_fraction[i])),
                ]
            )
    os.replace(tmp, path)
