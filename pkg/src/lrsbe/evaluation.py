"""NMSE, empirical CDFs and the seeded Monte-Carlo harness.

Every (SNR, trial) cell draws its channel and noise from a seed derived from
``(base_seed, snr_index, trial)``; all configured solvers then run on the same
data, so records within a cell form a paired comparison.
"""
from __future__ import annotations

import csv
import json
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .beamspace import GeneratorParams, synthesize_channel
from .errors import DegenerateInputError, DimensionError, ParameterError
from .measurement import add_noise, forward, make_pilots
from .solvers import SOLVERS, make_options, run_estimator

CSV_COLUMNS = ("solver", "snr_db", "trial", "seed", "nmse_db", "iterations", "runtime_ms", "converged")


class Nmse(NamedTuple):
    linear: float
    db: float


def nmse(h_true, h_hat, k_users):
    """Per-user normalised squared error, averaged over users."""
    h_true = np.asarray(h_true)
    h_hat = np.asarray(h_hat)
    if h_true.shape != h_hat.shape or h_true.ndim != 1 or h_true.shape[0] % k_users:
        raise DimensionError(f"cannot split shapes {h_true.shape}/{h_hat.shape} into {k_users} users")
    t = h_true.reshape(k_users, -1)
    e = h_hat.reshape(k_users, -1)
    ref = np.sum(np.abs(t) ** 2, axis=1)
    if np.any(ref == 0):
        raise DegenerateInputError("a user has a zero-norm true channel")
    lin = float(np.mean(np.sum(np.abs(t - e) ** 2, axis=1) / ref))
    return Nmse(lin, 10.0 * math.log10(lin) if lin > 0 else -math.inf)


def to_db(linear):
    return 10.0 * math.log10(linear) if linear > 0 else -math.inf


def ecdf(values):
    """Right-continuous empirical CDF as ``[(value, P(X <= value)), ...]``."""
    vals = np.sort(np.asarray(list(values), dtype=float))
    if vals.size == 0:
        raise ValueError("ecdf of an empty sample")
    uniq, counts = np.unique(vals, return_counts=True)
    probs = np.cumsum(counts) / vals.size
    return [(float(v), float(p)) for v, p in zip(uniq, probs)]


def ecdf_quantile(points, q):
    """Smallest value whose ECDF probability reaches ``q``."""
    for value, prob in points:
        if prob >= q - 1e-12:
            return value
    return points[-1][0]


# --- configuration -----------------------------------------------------------


@dataclass
class SolverSpec:
    name: str
    options: dict = field(default_factory=dict)

    def build(self):
        return make_options(self.name, self.options)


@dataclass
class ExperimentConfig:
    dims: tuple = (8, 8, 8)
    n_pilots: int = 4
    snr_grid: list = field(default_factory=lambda: [-10.0, 0.0, 10.0])
    n_trials: int = 100
    base_seed: int = 0
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    solvers: list = field(default_factory=lambda: [SolverSpec(n) for n in SOLVERS])
    nmse_target: float | None = None

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ParameterError(f"dims must be three positive integers, got {self.dims}")
        if self.n_trials < 1:
            raise ParameterError("n_trials must be >= 1")
        if not self.snr_grid:
            raise ParameterError("snr_grid must not be empty")
        if not 1 <= self.n_pilots <= self.dims[2]:
            raise ParameterError(f"n_pilots must lie in [1, K], got {self.n_pilots}")
        if not self.solvers:
            raise ParameterError("at least one solver is required")
        for spec in self.solvers:
            spec.build()
        if self.nmse_target is not None and not 0 < self.nmse_target <= 1:
            raise ParameterError("nmse_target must lie in (0, 1]")
        self.generator.validate(self.dims)
        return self

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        gen = doc.pop("generator", {})
        gen_known = {f.name for f in fields(GeneratorParams)}
        if set(gen) - gen_known:
            raise ParameterError(
                f"unknown generator key(s): {', '.join(sorted(set(gen) - gen_known))}"
            )
        solvers = []
        for entry in doc.pop("solvers", list(SOLVERS)):
            if isinstance(entry, str):
                solvers.append(SolverSpec(entry))
            else:
                extra = set(entry) - {"name", "options"}
                if extra:
                    raise ParameterError(f"unknown solver entry key(s): {', '.join(sorted(extra))}")
                solvers.append(SolverSpec(entry["name"], dict(entry.get("options", {}))))
        if "dims" in doc:
            doc["dims"] = tuple(int(d) for d in doc["dims"])
        if "snr_grid" in doc:
            doc["snr_grid"] = [float(s) for s in doc["snr_grid"]]
        return cls(generator=GeneratorParams(**gen), solvers=solvers, **doc).validate()

    def to_dict(self):
        return {
            "dims": list(self.dims),
            "n_pilots": self.n_pilots,
            "snr_grid": list(self.snr_grid),
            "n_trials": self.n_trials,
            "base_seed": self.base_seed,
            "generator": asdict(self.generator),
            "solvers": [{"name": s.name, "options": dict(s.options)} for s in self.solvers],
            "nmse_target": self.nmse_target,
        }


@dataclass
class ResultRecord:
    solver: str
    snr_db: float
    trial: int
    seed: int
    nmse_db: float
    iterations: int
    runtime_ms: float
    converged: bool
    error: str = ""

    @property
    def failed(self):
        return bool(self.error)

    def csv_row(self):
        return [
            self.solver,
            repr(float(self.snr_db)),
            self.trial,
            self.seed,
            repr(float(self.nmse_db)),
            self.iterations,
            f"{self.runtime_ms:.3f}",
            "true" if self.converged else "false",
        ]


# --- trials ------------------------------------------------------------------


def derive_seed(*keys):
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def trial_seed(base_seed, snr_index, trial):
    return derive_seed(base_seed, snr_index, trial)


@dataclass
class TrialData:
    seed: int
    channel: object
    pilots: object
    meas: object


def prepare_trial(cfg, snr_index, trial):
    """Channel, pilots and noisy measurement for one (SNR, trial) cell."""
    seed = trial_seed(cfg.base_seed, snr_index, trial)
    channel = synthesize_channel(cfg.generator, cfg.dims, derive_seed(seed, 0))
    pilots = make_pilots(cfg.n_pilots, cfg.dims[2])
    y_clean = forward(pilots, channel.collective)
    meas = add_noise(y_clean, cfg.snr_grid[snr_index], derive_seed(seed, 1))
    return TrialData(seed, channel, pilots, meas)


def _run_cell(cfg, snr_index, trial):
    data = prepare_trial(cfg, snr_index, trial)
    k_users = cfg.dims[2]
    snr = cfg.snr_grid[snr_index]
    out = []
    for spec in cfg.solvers:
        try:
            res = run_estimator(spec.name, data.meas, data.pilots, cfg.dims, spec.build())
            err = nmse(data.channel.collective, res.h_hat, k_users)
            out.append(ResultRecord(spec.name, snr, trial, data.seed, err.db,
                                    res.iterations, res.runtime_ms, res.converged))
        except Exception as exc:  # recorded, the sweep continues
            out.append(ResultRecord(spec.name, snr, trial, data.seed, math.nan, 0, 0.0, False,
                                    error=f"{type(exc).__name__}: {exc}"))
    return out


def _pool_map(fn, tasks, jobs):
    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(min(jobs, len(tasks))) as pool:
        return pool.starmap(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs)))


def _single_thread_blas(deterministic):
    if not deterministic:
        from contextlib import nullcontext

        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def run_sweep(cfg, jobs=1, deterministic=True):
    """All solvers on all (SNR, trial) cells; records sorted by (solver, snr, trial)."""
    cfg.validate()
    tasks = [(cfg, s, t) for s in range(len(cfg.snr_grid)) for t in range(cfg.n_trials)]
    with _single_thread_blas(deterministic):
        cells = _pool_map(_run_cell, tasks, jobs)
    order = {spec.name: i for i, spec in enumerate(cfg.solvers)}
    snr_index = {snr: i for i, snr in enumerate(cfg.snr_grid)}
    records = [rec for cell in cells for rec in cell]
    records.sort(key=lambda r: (order[r.solver], snr_index[r.snr_db], r.trial))
    return records


def _crossing_cell(cfg, snr_index, trial, target):
    data = prepare_trial(cfg, snr_index, trial)
    k_users = cfg.dims[2]
    h_true = data.channel.collective
    out = []
    for spec in cfg.solvers:
        opts = spec.build()
        q_max = getattr(opts, "q_max", None) or data.meas.y.shape[0]
        state = {"hit": None, "t_hit": None, "overhead": 0.0}
        start = time.perf_counter()

        def watch(i, h_hat, state=state, start=start):
            t0 = time.perf_counter()
            if state["hit"] is None and nmse(h_true, h_hat, k_users).linear <= target:
                state["hit"] = i
                state["t_hit"] = t0 - start - state["overhead"]
            state["overhead"] += time.perf_counter() - t0

        res = run_estimator(spec.name, data.meas, data.pilots, cfg.dims, opts, callback=watch)
        if state["hit"] is None:
            out.append((spec.name, cfg.snr_grid[snr_index], q_max, res.runtime_ms, False))
        else:
            out.append((spec.name, cfg.snr_grid[snr_index], state["hit"], state["t_hit"] * 1e3, True))
    return out


def iterations_to_target(cfg, nmse_target, jobs=1, deterministic=True):
    """Mean first-crossing iteration (``q_max`` when never reached) and runtime.

    Returns ``{(solver, snr_db): {"mean_iterations", "mean_runtime_ms",
    "hit_rate", "iterations"}}``.
    """
    cfg.validate()
    if not 0 < nmse_target <= 1:
        raise ParameterError("nmse_target must lie in (0, 1]")
    tasks = [(cfg, s, t, nmse_target) for s in range(len(cfg.snr_grid)) for t in range(cfg.n_trials)]
    with _single_thread_blas(deterministic):
        cells = _pool_map(_crossing_cell, tasks, jobs)
    grouped = {}
    for cell in cells:
        for name, snr, it, ms, hit in cell:
            grouped.setdefault((name, snr), []).append((it, ms, hit))
    return {
        key: {
            "mean_iterations": float(np.mean([v[0] for v in vals])),
            "mean_runtime_ms": float(np.mean([v[1] for v in vals])),
            "hit_rate": float(np.mean([v[2] for v in vals])),
            "iterations": [v[0] for v in vals],
        }
        for key, vals in grouped.items()
    }


# --- aggregation and I/O -----------------------------------------------------


def average_nmse_db(records, solver, snr_db=None):
    """``10 log10`` of the trial-averaged linear NMSE (failed trials excluded)."""
    vals = [10.0 ** (r.nmse_db / 10.0) for r in records
            if r.solver == solver and not r.failed and (snr_db is None or r.snr_db == snr_db)]
    if not vals:
        return math.nan
    return to_db(float(np.mean(vals)))


def summarize(records):
    groups = {}
    for rec in records:
        groups.setdefault((rec.solver, rec.snr_db), []).append(rec)
    out = []
    for (solver, snr), recs in groups.items():
        ok = [r for r in recs if not r.failed]
        db = [r.nmse_db for r in ok]
        out.append({
            "solver": solver,
            "snr_db": snr,
            "n_trials": len(recs),
            "n_failed": len(recs) - len(ok),
            "mean_nmse_db": float(np.mean(db)) if db else math.nan,
            "median_nmse_db": float(statistics.median(db)) if db else math.nan,
            "avg_nmse_db": average_nmse_db(ok, solver, snr),
            "mean_iterations": float(np.mean([r.iterations for r in ok])) if ok else math.nan,
            "mean_runtime_ms": float(np.mean([r.runtime_ms for r in ok])) if ok else math.nan,
        })
    return out


def write_results_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(rec.csv_row())


def read_results_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        ResultRecord(
            solver=row["solver"],
            snr_db=float(row["snr_db"]),
            trial=int(row["trial"]),
            seed=int(row["seed"]),
            nmse_db=float(row["nmse_db"]),
            iterations=int(row["iterations"]),
            runtime_ms=float(row["runtime_ms"]),
            converged=row["converged"] == "true",
            error="failed" if math.isnan(float(row["nmse_db"])) else "",
        )
        for row in rows
    ]


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_summary_json(records, path, crossings=None, config=None):
    doc = {"groups": summarize(records)}
    if crossings is not None:
        doc["iterations_to_target"] = [
            {"solver": name, "snr_db": snr, **{k: v for k, v in stats.items() if k != "iterations"}}
            for (name, snr), stats in crossings.items()
        ]
    if config is not None:
        doc["config"] = config.to_dict()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(doc), fh, indent=2)
