"""Spatial layer: PPP sampling, nearest-BS association and distance laws."""

from __future__ import annotations

import csv
import enum
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

__all__ = [
    "UserClass",
    "NetworkParams",
    "GeometrySnapshot",
    "EmptyNetworkError",
    "db_to_linear",
    "linear_to_db",
    "sample_network",
    "ccu_probability",
    "link_distance_pdf",
    "link_distance_ccdf",
    "cell_load_pmf",
    "write_snapshot_csv",
    "read_snapshot_csv",
]

# Shape parameter of the Voronoi cell-area gamma approximation behind the
# per-cell user-count PMF.
_CELL_SHAPE = 3.5


class UserClass(str, enum.Enum):
    CCU = "CCU"
    CEU = "CEU"

    @classmethod
    def parse(cls, value) -> "UserClass":
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0) if np.ndim(db) else 10.0 ** (db / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x)


@dataclass(frozen=True)
class NetworkParams:
    """Spatial and channel constants of the network.

    ``sir_threshold`` is linear; use :meth:`with_threshold_db` or
    :func:`db_to_linear` at the interface. ``tx_power_dbm`` is carried for
    bookkeeping only; it cancels in the interference-limited SIR.
    """

    bs_density: float = 1e-4
    user_density: float = 3e-4
    pathloss_exponent: float = 3.0
    ratio_threshold: float = 0.5
    sir_threshold: float = 1.0
    tx_power_dbm: float = 23.0

    def __post_init__(self):
        problems = []
        if not self.bs_density > 0:
            problems.append(f"bs_density must be > 0 (got {self.bs_density})")
        if not self.user_density > 0:
            problems.append(f"user_density must be > 0 (got {self.user_density})")
        if not self.pathloss_exponent > 2:
            problems.append(f"pathloss_exponent must be > 2 (got {self.pathloss_exponent})")
        if not 0 < self.ratio_threshold < 1:
            problems.append(f"ratio_threshold must lie in (0, 1) (got {self.ratio_threshold})")
        if not self.sir_threshold > 0:
            problems.append(f"sir_threshold must be > 0 (got {self.sir_threshold})")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def delta(self) -> float:
        return 2.0 / self.pathloss_exponent

    @property
    def load_ratio(self) -> float:
        """Mean number of users per cell, ``user_density / bs_density``."""
        return self.user_density / self.bs_density

    @property
    def sir_threshold_db(self) -> float:
        return float(linear_to_db(self.sir_threshold))

    def with_threshold_db(self, theta_db: float) -> "NetworkParams":
        return self.replace(sir_threshold=db_to_linear(theta_db))

    def replace(self, **changes) -> "NetworkParams":
        from dataclasses import replace

        return replace(self, **changes)


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GeometrySnapshot:
    """One realization of BSs and users on a torus of side ``side``.

    Per-user arrays are indexed by user; ``is_ccu[u]`` holds the
    ``link_distance / dominant_distance < ratio_threshold`` predicate.
    """

    params: NetworkParams
    side: float
    bs_points: np.ndarray
    user_points: np.ndarray
    association: np.ndarray
    link_distance: np.ndarray
    dominant_distance: np.ndarray
    dominant_bs: np.ndarray
    is_ccu: np.ndarray
    seed: int | None = None
    _distances: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_bs(self) -> int:
        return len(self.bs_points)

    @property
    def n_users(self) -> int:
        return len(self.user_points)

    @property
    def user_class(self) -> np.ndarray:
        return np.where(self.is_ccu, UserClass.CCU.value, UserClass.CEU.value)

    def class_mask(self, cls) -> np.ndarray:
        cls = UserClass.parse(cls)
        return self.is_ccu if cls is UserClass.CCU else ~self.is_ccu

    def distances(self) -> np.ndarray:
        """Torus distance matrix, users x BSs."""
        if self._distances is None:
            d = torus_distances(self.user_points, self.bs_points, self.side)
            d.setflags(write=False)
            object.__setattr__(self, "_distances", d)
        return self._distances


class EmptyNetworkError(RuntimeError):
    def __init__(self, seed, n_bs):
        super().__init__(
            f"sampled {n_bs} base station(s) with seed {seed}; at least two are "
            "needed to define a dominant interferer, resample with another seed"
        )
        self.seed = seed
        self.n_bs = n_bs


def torus_distances(a, b, side):
    """Pairwise wrap-around distances between rows of ``a`` and ``b``."""
    sq = None
    for k in range(2):
        d = np.abs(a[:, k, None] - b[None, :, k])
        np.minimum(d, side - d, out=d)
        d *= d
        sq = d if sq is None else sq + d
    return np.sqrt(sq, out=sq)


def _build_snapshot(params, side, bs, users, seed=None):
    d = torus_distances(users, bs, side) if len(users) else np.empty((0, len(bs)))
    if len(users):
        two = np.argpartition(d, 1, axis=1)[:, :2]
        rows = np.arange(len(users))
        d2 = d[rows[:, None], two]
        order = np.argsort(d2, axis=1)
        nearest = two[rows, order[:, 0]]
        second = two[rows, order[:, 1]]
        r_m = d[rows, nearest]
        r_d = d[rows, second]
    else:
        nearest = second = np.empty(0, dtype=int)
        r_m = r_d = np.empty(0)
    d.setflags(write=False)
    return GeometrySnapshot(
        params=params,
        side=float(side),
        bs_points=_frozen(bs, float),
        user_points=_frozen(users, float),
        association=_frozen(nearest, np.int64),
        link_distance=_frozen(r_m, float),
        dominant_distance=_frozen(r_d, float),
        dominant_bs=_frozen(second, np.int64),
        is_ccu=_frozen(r_m < params.ratio_threshold * r_d, bool),
        seed=seed,
        _distances=d,
    )


def sample_network(params: NetworkParams, window_side: float = 2000.0, rng_seed=0) -> GeometrySnapshot:
    """Sample BSs and users as independent PPPs on a torus window.

    BS and user counts are Poisson with means ``density * side**2`` and
    positions are uniform; users attach to the nearest BS in torus metric.

    Raises
    ------
    EmptyNetworkError
        When fewer than two BSs are drawn.
    """
    if not window_side > 0:
        raise ValueError(f"window_side must be positive, got {window_side}")
    area = window_side**2
    expected = params.bs_density * area
    if expected < 50:
        warnings.warn(
            f"window holds only {expected:.1f} BSs on average; dominant-interferer "
            "statistics will be biased",
            stacklevel=2,
        )
    rng = np.random.default_rng(rng_seed)
    n_bs = rng.poisson(expected)
    bs = rng.uniform(0.0, window_side, size=(n_bs, 2))
    n_users = rng.poisson(params.user_density * area)
    users = rng.uniform(0.0, window_side, size=(n_users, 2))
    if n_bs < 2:
        raise EmptyNetworkError(rng_seed, n_bs)
    seed = rng_seed if isinstance(rng_seed, (int, np.integer)) else None
    return _build_snapshot(params, window_side, bs, users, seed)


def ccu_probability(ratio: float) -> float:
    """Probability that the typical user is cell-center, ``R**2``."""
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio threshold must lie in [0, 1], got {ratio}")
    return ratio * ratio


def link_distance_pdf(r, params: NetworkParams, cls):
    """Density of the serving distance conditioned on the user class (1/m)."""
    cls = UserClass.parse(cls)
    r = np.asarray(r, dtype=float)
    lam = params.bs_density
    R2 = params.ratio_threshold**2
    a = math.pi * lam * r * r
    if cls is UserClass.CCU:
        out = 2 * math.pi * lam * r / R2 * np.exp(-a / R2)
    else:
        # exp(-a) - exp(-a/R^2) = exp(-a) * (1 - exp(-a (1/R^2 - 1)))
        out = 2 * math.pi * lam * r / (1 - R2) * np.exp(-a) * -np.expm1(-a * (1 / R2 - 1))
    out = np.where(r < 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def link_distance_ccdf(r, params: NetworkParams, cls):
    """``P(serving distance > r | class)``.

    The CEU branch integrates its density, which gives
    ``(exp(-a) - R^2 exp(-a/R^2)) / (1 - R^2)`` with ``a = pi lambda r^2``.
    """
    cls = UserClass.parse(cls)
    r = np.asarray(r, dtype=float)
    R2 = params.ratio_threshold**2
    a = math.pi * params.bs_density * np.maximum(r, 0.0) ** 2
    if cls is UserClass.CCU:
        out = np.exp(-a / R2)
    else:
        out = (np.exp(-a) - R2 * np.exp(-a / R2)) / (1 - R2)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def cell_load_pmf(nu, ratio):
    """PMF of the number of users in a typical cell (negative binomial).

    ``ratio`` is the mean load ``user_density / bs_density``.
    """
    if not ratio > 0:
        raise ValueError(f"load ratio must be positive, got {ratio}")
    nu = np.asarray(nu)
    if np.any(nu < 0) or np.any(nu != np.floor(nu)):
        raise ValueError("nu must be a non-negative integer")
    k = _CELL_SHAPE
    nu_f = nu.astype(float)
    logp = (
        k * math.log(k)
        + special.gammaln(nu_f + k)
        + nu_f * math.log(ratio)
        - special.gammaln(nu_f + 1)
        - special.gammaln(k)
        - (nu_f + k) * math.log(ratio + k)
    )
    out = np.exp(logp)
    return float(out) if out.ndim == 0 else out


def write_snapshot_csv(snapshot: GeometrySnapshot, path) -> None:
    """One row per point: ``kind, x, y, association, class``.

    BS rows carry their own index in ``association`` and an empty class.
    The window side and parameters go into leading ``#`` comment lines.
    """
    p = snapshot.params
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(f"# side={snapshot.side!r}\n")
        fh.write(
            "# params="
            + ",".join(f"{k}={getattr(p, k)!r}" for k in p.__dataclass_fields__)
            + "\n"
        )
        w = csv.writer(fh)
        w.writerow(["kind", "x", "y", "association", "class"])
        for i, (x, y) in enumerate(snapshot.bs_points):
            w.writerow(["bs", repr(float(x)), repr(float(y)), i, ""])
        cls = snapshot.user_class
        for u, (x, y) in enumerate(snapshot.user_points):
            w.writerow(["user", repr(float(x)), repr(float(y)), int(snapshot.association[u]), cls[u]])
    os.replace(tmp, path)


def read_snapshot_csv(path) -> GeometrySnapshot:
    """Inverse of :func:`write_snapshot_csv`; distances are recomputed.

    Raises ``ValueError`` if the stored association or class labels do not
    match the recomputed ones.
    """
    side = None
    kwargs = {}
    bs, users, assoc, labels = [], [], [], []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("# side="):
                side = float(line.split("=", 1)[1])
            elif line.startswith("# params="):
                for item in line.split("=", 1)[1].strip().split(","):
                    k, v = item.split("=")
                    kwargs[k] = float(v)
            elif not line.startswith("#"):
                lines.append(line)
        for row in csv.DictReader(lines):
            pt = (float(row["x"]), float(row["y"]))
            if row["kind"] == "bs":
                bs.append(pt)
            else:
                users.append(pt)
                assoc.append(int(row["association"]))
                labels.append(row["class"])
    if side is None:
        raise ValueError(f"{path}: missing '# side=' header")
    snap = _build_snapshot(
        NetworkParams(**kwargs), side, np.array(bs).reshape(-1, 2), np.array(users).reshape(-1, 2)
    )
    if not np.array_equal(snap.association, np.array(assoc, dtype=np.int64)):
        raise ValueError(f"{path}: stored association disagrees with nearest-BS rule")
    if list(snap.user_class) != labels:
        raise ValueError(f"{path}: stored class labels disagree with the ratio rule")
    return snap
