"""Batch front end: configuration, sweeps, oracle comparison and manifests.

Run ``python -m cellmeta <kind> --config run.toml``. The configuration is a
flat TOML file with dotted keys; every key is optional::

    seed = 1
    network.ratio_threshold = 0.5
    network.sir_threshold_db = 0.0
    grid.theta_db = [0.0, 5.0, 10.0]
    sim.geometries = 4

See ``CONFIG_KEYS`` for the full list and defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy

from . import __version__
from .geometry import NetworkParams, UserClass, db_to_linear, sample_network
from .metadist import (
    TrafficParams,
    default_grid,
    fixed_point_solve,
    meta_distribution,
    stability_verdict,
)
from .moments import (
    ActivityModel,
    critical_activity,
    mean_local_delay,
    moment,
    moment_ceu_mixture,
)
from .simulator import (
    SimStats,
    TooFewLinksError,
    empirical_mean_local_delay,
    empirical_meta,
    empirical_moment,
    run_fixed_activity_grid,
    run_queue_coupled,
    write_stats_csv,
)
from .specialfn import ConvergenceError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

__all__ = [
    "KINDS",
    "CONFIG_KEYS",
    "ConfigError",
    "ExperimentConfig",
    "RunRecord",
    "load_config",
    "run_experiment",
    "export_manifest",
    "main",
]

KINDS = ("moments", "metadist", "delay", "fixed_point", "simulate", "compare")
MANIFEST_NAME = "run_manifest.txt"
# sup-norm gap on [0.05, 0.95] above which an analytic meta curve is flagged
META_GAP_FLAG = 0.03

# key -> default; the type of the default is the expected type
CONFIG_KEYS: dict[str, Any] = {
    "kind": "",
    "seed": 1,
    "jobs": 1,
    "output.dir": "results",
    "network.bs_density": 1e-4,
    "network.user_density": 3e-4,
    "network.pathloss_exponent": 3.0,
    "network.ratio_threshold": 0.5,
    "network.sir_threshold_db": 0.0,
    "network.tx_power_dbm": 23.0,
    "network.thinning_mode": "none",
    "activity.q": 0.5,
    "grid.x_step": 0.01,
    "grid.q": [0.3, 0.5, 0.7],
    "grid.xi": [0.01, 0.05, 0.1, 0.15, 0.2, 0.25],
    "grid.theta_db": [0.0, 5.0, 10.0],
    "grid.ratio": [0.4, 0.5, 0.6],
    "grid.classes": ["CCU", "CEU"],
    "grid.methods": ["gil_pelaez", "beta"],
    "grid.delay_q_step": 0.01,
    "sim.window_side": 2000.0,
    "sim.geometries": 4,
    "sim.draws": 1000,
    "sim.mode": "fixed",
    "sim.q": 0.5,
    "sim.xi": 0.1,
    "sim.slots": 7000,
    "sim.warmup": 2000,
    "sim.floor": 200,
    "sim.max_queue": 10000,
    "fixed_point.method": "beta",
    "fixed_point.mode": "simultaneous",
    "fixed_point.activity": "mean",
    "fixed_point.omega": 0.5,
    "fixed_point.tol": 1e-5,
    "fixed_point.max_iter": 200,
    "compare.budget_s": 60.0,
    "compare.z_flag": 5.0,
    "compare.theta_db": [0.0, 5.0],
    "compare.q": [0.3, 0.7],
    "compare.geometries": 3,
    "compare.draws": 1000,
    "compare.delay_sign": "corrected",
}

_GRID_KEYS = ("grid.q", "grid.xi", "grid.theta_db", "grid.ratio", "compare.theta_db", "compare.q")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every violated rule."""

    def __init__(self, problems):
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(problems))
        self.problems = list(problems)


def _flatten(table, prefix=""):
    out = {}
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class ExperimentConfig:
    """Validated flat settings for one experiment kind.

    ``values`` maps every key of :data:`CONFIG_KEYS` to its value;
    thresholds stay in dB here and are converted when ``network`` is built.
    """

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(CONFIG_KEYS)
        unknown = sorted(set(self.values) - set(CONFIG_KEYS))
        merged.update(self.values)
        self.values = merged
        problems = [f"unknown key '{k}'" for k in unknown]
        problems += self._check()
        if problems:
            raise ConfigError(problems)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def kind(self) -> str:
        return self.values["kind"]

    @property
    def network(self) -> NetworkParams:
        v = self.values
        return NetworkParams(
            bs_density=v["network.bs_density"],
            user_density=v["network.user_density"],
            pathloss_exponent=v["network.pathloss_exponent"],
            ratio_threshold=v["network.ratio_threshold"],
            sir_threshold=db_to_linear(v["network.sir_threshold_db"]),
            tx_power_dbm=v["network.tx_power_dbm"],
        )

    @property
    def traffic(self) -> list:
        return [TrafficParams(x) for x in self.values["grid.xi"]]

    @property
    def x_grid(self) -> np.ndarray:
        return default_grid(self.values["grid.x_step"])

    def _check(self):
        v = self.values
        problems = []
        for key, default in CONFIG_KEYS.items():
            val = v[key]
            if isinstance(default, bool):
                ok = isinstance(val, bool)
            elif isinstance(default, int):
                ok = isinstance(val, int) and not isinstance(val, bool)
            elif isinstance(default, float):
                ok = isinstance(val, (int, float)) and not isinstance(val, bool)
            elif isinstance(default, list):
                ok = isinstance(val, list)
            else:
                ok = isinstance(val, str)
            if not ok:
                problems.append(f"'{key}' has type {type(val).__name__}, expected {type(default).__name__}")
        if problems:
            return problems
        if v["kind"] not in KINDS:
            problems.append(f"'kind' must be one of {', '.join(KINDS)} (got '{v['kind']}')")
        for key in _GRID_KEYS:
            grid = v[key]
            if not grid:
                problems.append(f"'{key}' must be non-empty")
            elif any(b <= a for a, b in zip(grid, grid[1:])):
                problems.append(f"'{key}' must be sorted ascending without repeats")
        for key in ("grid.q", "grid.xi", "compare.q"):
            if any(not 0 <= x <= 1 for x in v[key]):
                problems.append(f"'{key}' entries must lie in [0, 1]")
        if any(not 0 < x < 1 for x in v["grid.ratio"]):
            problems.append("'grid.ratio' entries must lie in (0, 1)")
        if not 0 <= v["activity.q"] <= 1:
            problems.append("'activity.q' must lie in [0, 1]")
        if not 0 < v["grid.x_step"] <= 0.5 or abs(round(1 / v["grid.x_step"]) * v["grid.x_step"] - 1) > 1e-9:
            problems.append("'grid.x_step' must divide 1 and lie in (0, 0.5]")
        for c in v["grid.classes"]:
            if str(c).upper() not in ("CCU", "CEU"):
                problems.append(f"'grid.classes' entry '{c}' is not CCU or CEU")
        for m in v["grid.methods"]:
            if m not in ("gil_pelaez", "beta"):
                problems.append(f"'grid.methods' entry '{m}' is not gil_pelaez or beta")
        if v["jobs"] < 1:
            problems.append("'jobs' must be at least 1")
        if v["sim.mode"] not in ("fixed", "queue"):
            problems.append("'sim.mode' must be 'fixed' or 'queue'")
        if not v["sim.slots"] > v["sim.warmup"] >= 0:
            problems.append("'sim.slots' must exceed 'sim.warmup' >= 0")
        for key in ("sim.geometries", "sim.draws", "compare.geometries", "compare.draws", "sim.floor"):
            if v[key] < 1:
                problems.append(f"'{key}' must be positive")
        if v["compare.delay_sign"] not in ("corrected", "printed"):
            problems.append("'compare.delay_sign' must be 'corrected' or 'printed'")
        if v["fixed_point.method"] not in ("gil_pelaez", "beta"):
            problems.append("'fixed_point.method' must be gil_pelaez or beta")
        if v["fixed_point.mode"] not in ("simultaneous", "recursive_temporal"):
            problems.append("'fixed_point.mode' must be simultaneous or recursive_temporal")
        if v["fixed_point.activity"] not in ("mean", "moments"):
            problems.append("'fixed_point.activity' must be mean or moments")
        try:
            self.network
        except ValueError as exc:
            problems.append(f"network: {exc}")
        try:
            ActivityModel(v["activity.q"], v["network.thinning_mode"])
        except ValueError as exc:
            problems.append(f"activity: {exc}")
        return problems

    def manifest_items(self):
        out = []
        for key in sorted(self.values):
            out.append((f"config.{key}", _fmt(self.values[key])))
        return out


def _fmt(value) -> str:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a flat TOML file and apply ``overrides`` (dotted keys)."""
    values = {}
    if path is not None:
        with open(path, "rb") as fh:
            values = _flatten(tomllib.load(fh))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(values)


@dataclass
class RunRecord:
    """Everything the manifest records about one run."""

    config: ExperimentConfig
    files: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def exit_status(self) -> int:
        return 1 if self.failures else 0

    @property
    def out_dir(self) -> str:
        return self.config["output.dir"]

    def path(self, name) -> str:
        return os.path.join(self.out_dir, name)

    def add_file(self, name):
        with open(self.path(name), "rb") as fh:
            self.files[name] = hashlib.sha256(fh.read()).hexdigest()


def _atomic_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_rows(run: RunRecord, name, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(x) if not isinstance(x, str) else x for x in row))
    _atomic_text(run.path(name), "\n".join(lines) + "\n")
    run.add_file(name)


def export_manifest(run: RunRecord, path=None) -> str:
    """Write the key-value manifest and return its path.

    The manifest holds library versions, the full configuration, seeds,
    output checksums, discrepancy flags and failures. It carries no
    timestamps, so identical runs give identical manifests.
    """
    if path is None:
        os.makedirs(run.out_dir, exist_ok=True)
        path = run.path(MANIFEST_NAME)
    lines = [
        f"artifact.version = {__version__}",
        f"python.version = {platform.python_version()}",
        f"numpy.version = {np.__version__}",
        f"scipy.version = {scipy.__version__}",
    ]
    lines += [f"{k} = {v}" for k, v in run.config.manifest_items()]
    lines += [f"seed.{k} = {v}" for k, v in sorted(run.seeds.items())]
    lines += [f"output.{k} = sha256:{v}" for k, v in sorted(run.files.items())]
    lines += [f"note.{i} = {n}" for i, n in enumerate(run.notes)]
    lines += [f"flag.{i} = {f}" for i, f in enumerate(run.flags)]
    lines += [f"failure.{i} = {f}" for i, f in enumerate(run.failures)]
    lines.append(f"status = {'failed' if run.failures else 'ok'}")
    _atomic_text(path, "\n".join(lines) + "\n")
    return path


def _map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _tag(x) -> str:
    return f"{x:g}"


def _curve_task(args):
    params, q, thinning, cls, method, step = args
    try:
        return meta_distribution(params, ActivityModel(q, thinning), cls, method, default_grid(step))
    except (ConvergenceError, ArithmeticError) as exc:
        return exc


def _run_moments(run: RunRecord):
    cfg = run.config
    base = cfg.network
    rows, crit = [], []
    for R in cfg["grid.ratio"]:
        for th in cfg["grid.theta_db"]:
            p = base.replace(ratio_threshold=R).with_threshold_db(th)
            for cls in cfg["grid.classes"]:
                cls = UserClass.parse(cls)
                crit.append((cls.value, R, th, critical_activity(p, cls)))
                for q in cfg["grid.q"]:
                    act = ActivityModel(q, cfg["network.thinning_mode"])
                    for b in (1, 2, -1):
                        try:
                            if b == -1:
                                rows.append((cls.value, R, th, q, b, mean_local_delay(p, act, cls), 0, 0.0))
                            else:
                                m = moment(b, p, act, cls)
                                rows.append((cls.value, R, th, q, b, float(m), m.terms_used, m.truncation_error_bound))
                        except (ConvergenceError, ArithmeticError) as exc:
                            run.failures.append(f"moment b={b} {cls.value} R={R} theta={th}dB q={q}: {exc}")
    _write_rows(run, "moments.csv", ["class", "ratio", "theta_db", "q", "b", "value", "terms_used", "truncation_error_bound"], rows)
    _write_rows(run, "critical_activity.csv", ["class", "ratio", "theta_db", "critical_q"], crit)


def _sweep_points(cfg):
    base = cfg.network
    q0 = cfg["activity.q"]
    for R in cfg["grid.ratio"]:
        yield "ratio", R, base.replace(ratio_threshold=R), q0
    for th in cfg["grid.theta_db"]:
        yield "theta_db", th, base.with_threshold_db(th), q0
    for q in cfg["grid.q"]:
        yield "q", q, base, q


def _check_order(run, curves, sweep, cls, method):
    """Flag any sweep whose curves fail to decrease pointwise."""
    ordered = sorted(curves)
    for (v0, c0), (v1, c1) in zip(ordered, ordered[1:]):
        if not c0.dominates(c1, tol=1e-3):
            run.flags.append(f"trend {sweep} {cls} {method}: curve at {_tag(v1)} exceeds curve at {_tag(v0)}")


def _run_metadist(run: RunRecord):
    cfg = run.config
    tasks, keys = [], []
    for sweep, val, params, q in _sweep_points(cfg):
        for cls in cfg["grid.classes"]:
            for method in cfg["grid.methods"]:
                tasks.append((params, q, cfg["network.thinning_mode"], UserClass.parse(cls), method, cfg["grid.x_step"]))
                keys.append((sweep, val, UserClass.parse(cls).value, method))
    results = _map(_curve_task, tasks, cfg["jobs"])
    groups = {}
    for (sweep, val, cls, method), res in zip(keys, results):
        if isinstance(res, Exception):
            run.failures.append(f"metadist {sweep}={_tag(val)} {cls} {method}: {res}")
            continue
        name = f"metadist_{sweep}-{_tag(val)}_{cls}_{method}.csv"
        res.to_csv(run.path(name))
        run.add_file(name)
        groups.setdefault((sweep, cls, method), []).append((val, res))
    for (sweep, cls, method), curves in groups.items():
        _check_order(run, curves, sweep, cls, method)


def _run_delay(run: RunRecord):
    cfg = run.config
    step = cfg["grid.delay_q_step"]
    qs = np.round(np.arange(0.0, 1.0 + step / 2, step), 10)
    crit = []
    for th in cfg["grid.theta_db"]:
        p = cfg.network.with_threshold_db(th)
        for cls in cfg["grid.classes"]:
            cls = UserClass.parse(cls)
            rows = [(q, mean_local_delay(p, ActivityModel(float(q), cfg["network.thinning_mode"]), cls)) for q in qs]
            _write_rows(run, f"delay_{cls.value}_theta-{_tag(th)}dB.csv", ["q", "mean_local_delay"], rows)
            qc = critical_activity(p, cls)
            crit.append((cls.value, th, qc))
            run.notes.append(f"critical_q {cls.value} theta={_tag(th)}dB = {_fmt(qc)}")
    _write_rows(run, "delay_critical.csv", ["class", "theta_db", "critical_q"], crit)


def _run_fixed_point(run: RunRecord):
    cfg = run.config
    for cls in cfg["grid.classes"]:
        cls = UserClass.parse(cls)
        rows = []
        for xi in cfg["grid.xi"]:
            res = fixed_point_solve(
                cfg.network,
                xi,
                cls,
                cfg["fixed_point.method"],
                cfg["fixed_point.mode"],
                activity=cfg["fixed_point.activity"],
                omega=cfg["fixed_point.omega"],
                tol=cfg["fixed_point.tol"],
                max_iter=cfg["fixed_point.max_iter"],
                grid=cfg.x_grid,
                thinning_mode=cfg["network.thinning_mode"],
            )
            verdict = stability_verdict(res)
            rows.append((xi, res.q_star, res.iterations, res.residual, res.converged, res.saturated, verdict))
            stem = f"fixed_point_{cls.value}_xi-{_tag(xi)}"
            res.curve.to_csv(run.path(stem + ".csv"))
            run.add_file(stem + ".csv")
            _atomic_text(run.path(stem + ".txt"), res.summary())
            run.add_file(stem + ".txt")
            if not res.converged:
                run.flags.append(f"fixed point {cls.value} xi={_tag(xi)} not converged (residual {res.residual:.3e})")
        _write_rows(
            run,
            f"fixed_point_{cls.value}.csv",
            ["xi", "q_star", "iterations", "residual", "converged", "saturated", "verdict"],
            [tuple(str(x).lower() if isinstance(x, bool) else x for x in r) for r in rows],
        )


def _geometry_task(args):
    kind, params, side, seed_seq, index, settings = args
    geo_seed, draw_seed = seed_seq.spawn(2)
    snap = sample_network(params, side, geo_seed)
    if kind == "queue":
        return run_queue_coupled(
            snap, params, settings["xi"], settings["slots"], settings["warmup"], draw_seed,
            max_queue=settings["max_queue"], geometry_index=index,
        )
    return run_fixed_activity_grid(snap, params, settings["qs"], settings["thetas"], settings["draws"], draw_seed, geometry_index=index)


def _seeds(run: RunRecord, n, label):
    root = np.random.SeedSequence(run.config["seed"])
    kids = root.spawn(n)
    run.seeds[f"{label}.root"] = run.config["seed"]
    run.seeds[f"{label}.tasks"] = n
    return kids


def _run_simulate(run: RunRecord):
    cfg = run.config
    p = cfg.network
    n = cfg["sim.geometries"]
    kids = _seeds(run, n, "simulate")
    mode = cfg["sim.mode"]
    settings = {
        "qs": [cfg["sim.q"]],
        "thetas": [p.sir_threshold],
        "draws": cfg["sim.draws"],
        "xi": cfg["sim.xi"],
        "slots": cfg["sim.slots"],
        "warmup": cfg["sim.warmup"],
        "max_queue": cfg["sim.max_queue"],
    }
    tasks = [(mode, p, cfg["sim.window_side"], k, i, settings) for i, k in enumerate(kids)]
    parts = _map(_geometry_task, tasks, cfg["jobs"])
    if mode == "fixed":
        parts = [d[(p.sir_threshold, cfg["sim.q"])] for d in parts]
    stats = SimStats.merge(parts)
    write_stats_csv(stats, run.path("sim_links.csv"))
    run.add_file("sim_links.csv")
    rows = []
    for cls in cfg["grid.classes"]:
        cls = UserClass.parse(cls)
        try:
            curve = empirical_meta(stats, cls, cfg.x_grid, cfg["sim.floor"])
        except TooFewLinksError as exc:
            run.failures.append(f"simulate {cls.value}: {exc}")
            continue
        curve.to_csv(run.path(f"sim_meta_{cls.value}.csv"))
        run.add_file(f"sim_meta_{cls.value}.csv")
        for b in (1, 2):
            m, se = empirical_moment(stats, b, cls, cfg["sim.floor"])
            rows.append((cls.value, b, m, se))
        d = empirical_mean_local_delay(stats, cls, cfg["sim.floor"])
        rows.append((cls.value, -1, d.mean_inverse, math.nan))
        if mode == "queue":
            mask = stats.select(cls, cfg["sim.floor"])
            rows.append((cls.value, "activity", float(np.mean(stats.activity_fraction[mask])), math.nan))
            rows.append((cls.value, "service_time", d.mean_service_time, math.nan))
    _write_rows(run, "sim_summary.csv", ["class", "quantity", "estimate", "standard_error"], rows)
    if mode == "queue":
        if not np.array_equal(stats.arrivals, stats.departures + stats.final_queue):
            run.failures.append("packet conservation violated")
        if stats.work_conservation_violations:
            run.failures.append(f"work conservation violated {stats.work_conservation_violations} times")


def _delay_se(stats, cls, floor):
    mask = stats.select(cls, floor)
    p = stats.p_hat[mask]
    if np.any(p == 0):
        return math.inf, math.nan
    inv = 1.0 / p
    return float(inv.mean()), float(inv.std(ddof=1) / math.sqrt(inv.size))


def _run_compare(run: RunRecord):
    cfg = run.config
    t0 = time.perf_counter()
    p = cfg.network
    thetas = [db_to_linear(t) for t in cfg["compare.theta_db"]]
    qs = list(cfg["compare.q"])
    n = cfg["compare.geometries"]
    kids = _seeds(run, n, "compare")
    settings = {"qs": qs, "thetas": thetas, "draws": cfg["compare.draws"]}
    tasks = [("fixed", p, cfg["sim.window_side"], k, i, settings) for i, k in enumerate(kids)]
    parts = _map(_geometry_task, tasks, cfg["jobs"])
    zlim = cfg["compare.z_flag"]
    rows, meta_rows = [], []
    for th_db, th in zip(cfg["compare.theta_db"], thetas):
        pp = p.replace(sir_threshold=th)
        for q in qs:
            stats = SimStats.merge(d[(th, q)] for d in parts)
            act = ActivityModel(q)
            for cls in cfg["grid.classes"]:
                cls = UserClass.parse(cls)
                for b in (1, 2):
                    sim, se = empirical_moment(stats, b, cls, 1)
                    formulas = [("exact", float(moment(b, pp, act, cls)))]
                    if cls is UserClass.CEU:
                        formulas.append(("mixture", float(moment_ceu_mixture(b, pp, act))))
                    for label, an in formulas:
                        z = (sim - an) / se if se > 0 else math.inf
                        rows.append((th_db, q, cls.value, f"M{b}", label, an, sim, se, z))
                        if abs(z) > zlim:
                            run.flags.append(
                                f"discrepancy theta={_tag(th_db)}dB q={_tag(q)} {cls.value} M{b} ({label}): "
                                f"formula {an:.5f} vs simulation {sim:.5f} (z={z:+.1f})"
                            )
                an = mean_local_delay(pp, act, cls, sign=cfg["compare.delay_sign"])
                sim, se = _delay_se(stats, cls, cfg["sim.floor"])
                z = (sim - an) / se if se and se > 0 and math.isfinite(an) and math.isfinite(sim) else math.nan
                rows.append((th_db, q, cls.value, "delay", cfg["compare.delay_sign"], an, sim, se, z))
                if math.isfinite(an) != math.isfinite(sim) or (math.isfinite(z) and abs(z) > zlim):
                    run.flags.append(
                        f"discrepancy theta={_tag(th_db)}dB q={_tag(q)} {cls.value} delay ({cfg['compare.delay_sign']}): "
                        f"formula {_fmt(an)} vs simulation {_fmt(sim)}"
                    )
                try:
                    emp = empirical_meta(stats, cls, cfg.x_grid, cfg["sim.floor"])
                    ana = meta_distribution(pp, act, cls, "gil_pelaez", cfg.x_grid)
                    gap = ana.sup_distance(emp, 0.05, 0.95)
                    meta_rows.append((th_db, q, cls.value, gap))
                    if gap > META_GAP_FLAG:
                        run.flags.append(
                            f"discrepancy theta={_tag(th_db)}dB q={_tag(q)} {cls.value} meta curve: sup distance {gap:.4f}"
                        )
                except (ConvergenceError, TooFewLinksError) as exc:
                    run.failures.append(f"compare meta theta={_tag(th_db)}dB q={_tag(q)} {cls.value}: {exc}")
    _write_rows(run, "compare.csv", ["theta_db", "q", "class", "quantity", "formula", "analytic", "simulated", "standard_error", "z"], rows)
    _write_rows(run, "compare_meta.csv", ["theta_db", "q", "class", "sup_distance"], meta_rows)
    elapsed = time.perf_counter() - t0
    # timing varies between machines, so it goes to a side file, not the manifest
    _atomic_text(run.path("timing.txt"), f"elapsed_s = {elapsed:.1f}\nbudget_s = {cfg['compare.budget_s']}\n")
    if elapsed > cfg["compare.budget_s"]:
        print(f"warning: compare took {elapsed:.0f} s, over the {cfg['compare.budget_s']:.0f} s budget", file=sys.stderr)


_RUNNERS = {
    "moments": _run_moments,
    "metadist": _run_metadist,
    "delay": _run_delay,
    "fixed_point": _run_fixed_point,
    "simulate": _run_simulate,
    "compare": _run_compare,
}


def run_experiment(config: ExperimentConfig) -> RunRecord:
    """Run ``config.kind``, write its CSVs and the manifest.

    Numerical failures are collected in ``RunRecord.failures`` (and make
    ``exit_status`` nonzero) rather than aborting the run.
    """
    run = RunRecord(config)
    os.makedirs(run.out_dir, exist_ok=True)
    try:
        _RUNNERS[config.kind](run)
    except (ConvergenceError, ArithmeticError, RuntimeError) as exc:
        run.failures.append(f"{type(exc).__name__}: {exc}")
    export_manifest(run)
    return run


def _parser():
    ap = argparse.ArgumentParser(prog="python -m cellmeta", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("moments", "metadist", "delay", "fixed-point", "simulate", "compare"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat TOML configuration file")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--jobs", type=int, help="worker processes")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    kind = args.command.replace("-", "_")
    try:
        overrides = {"seed": args.seed, "output.dir": args.out, "jobs": args.jobs}
        if args.config is not None:
            with open(args.config, "rb") as fh:
                given = _flatten(tomllib.load(fh)).get("kind", kind)
            if given != kind:
                raise ConfigError([f"config kind '{given}' does not match subcommand '{args.command}'"])
        cfg = load_config(args.config, kind=kind, **overrides)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    run = run_experiment(cfg)
    print(f"wrote {len(run.files)} file(s) and {MANIFEST_NAME} to {run.out_dir}")
    for f in run.flags:
        print(f"flag: {f}")
    for f in run.failures:
        print(f"failure: {f}", file=sys.stderr)
    return run.exit_status
