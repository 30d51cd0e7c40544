"""Command-line front end: ``lrsbe generate | estimate | sweep``.

Exit codes: 0 success, 1 runtime failure, 2 validation or usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .beamspace import ChannelRealization, synthesize_channel, top_singular_share
from .errors import LrsbeError, ParameterError
from .evaluation import (
    ExperimentConfig,
    derive_seed,
    iterations_to_target,
    nmse,
    run_sweep,
    summarize,
    write_results_csv,
    write_summary_json,
)
from .measurement import add_noise, forward, make_pilots
from .solvers import SOLVERS, run_estimator

log = logging.getLogger("lrsbe")

CLI_KEYS = {"out", "summary", "verbosity"}


class UsageError(Exception):
    pass


def load_config(path, overrides):
    """Parse a JSON config, apply command-line overrides, validate strictly."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    cli = {k: doc.pop(k) for k in list(doc) if k in CLI_KEYS}
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    try:
        cfg = ExperimentConfig.from_dict(doc)
    except (LrsbeError, TypeError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg, cli


def _check_writable(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"output directory {parent} is not writable")


def _overrides(args):
    out = {}
    if getattr(args, "snr", None):
        out["snr_grid"] = args.snr
    if getattr(args, "trials", None) is not None:
        out["n_trials"] = args.trials
    if getattr(args, "seed", None) is not None:
        out["base_seed"] = args.seed
    return out


def cmd_generate(args):
    cfg, cli = load_config(args.config, _overrides(args))
    out = args.out or cli.get("out")
    if not out:
        raise UsageError("no output path (--out)")
    _check_writable(out)
    try:
        channel = synthesize_channel(cfg.generator, cfg.dims, cfg.base_seed)
    except LrsbeError as exc:
        raise UsageError(str(exc)) from exc
    channel.save(out)
    mats = channel.matrices("beam")
    share = np.mean([top_singular_share(m, 5) for m in mats])
    sparse_frac = np.count_nonzero(channel.h_sparse) / channel.h_sparse.size
    print(f"wrote {out}")
    print(f"dims={list(cfg.dims)} seed={cfg.base_seed}")
    print(f"top5_singular_energy_share={share:.4f}")
    print(f"sparse_fraction={sparse_frac:.4f}")
    return 0


def cmd_estimate(args):
    if args.solver not in SOLVERS:
        raise UsageError(f"unknown solver {args.solver!r}; valid: {', '.join(SOLVERS)}")
    cfg, _ = load_config(args.config, _overrides(args))
    try:
        channel = ChannelRealization.load(args.channel)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load channel {args.channel}: {exc}") from exc
    if tuple(channel.dims) != tuple(cfg.dims):
        raise UsageError(f"channel dims {list(channel.dims)} differ from config {list(cfg.dims)}")
    if args.trace:
        _check_writable(args.trace)
    spec = next((s for s in cfg.solvers if s.name == args.solver), None)
    opts = spec.build() if spec else SOLVERS[args.solver][1]()
    snr = cfg.snr_grid[0]
    pilots = make_pilots(cfg.n_pilots, cfg.dims[2])
    meas = add_noise(forward(pilots, channel.collective), snr, derive_seed(cfg.base_seed, 1))

    from .evaluation import _single_thread_blas

    with _single_thread_blas(args.deterministic):
        res = run_estimator(args.solver, meas, pilots, cfg.dims, opts)
    err = nmse(channel.collective, res.h_hat, cfg.dims[2])
    print(f"solver={args.solver} snr_db={snr:g}")
    print(f"nmse_db={err.db:.6f}")
    print(f"iterations={res.iterations} converged={str(res.converged).lower()}")
    print(f"runtime_ms={res.runtime_ms:.3f}")
    if args.trace:
        res.write_trace_csv(args.trace)
    return 0


def cmd_sweep(args):
    cfg, cli = load_config(args.config, _overrides(args))
    out = args.out or cli.get("out")
    if not out:
        raise UsageError("no output path (--out)")
    summary = args.summary or cli.get("summary") or str(Path(out).with_suffix(".json"))
    _check_writable(out)
    _check_writable(summary)
    records = run_sweep(cfg, jobs=args.jobs, deterministic=args.deterministic)
    crossings = None
    if cfg.nmse_target is not None:
        crossings = iterations_to_target(cfg, cfg.nmse_target, jobs=args.jobs,
                                         deterministic=args.deterministic)
    write_results_csv(records, out)
    write_summary_json(records, summary, crossings, cfg)
    for row in summarize(records):
        log.info("%-6s snr=%6.1f  avg_nmse_db=%8.3f  iters=%6.1f", row["solver"],
                 row["snr_db"], row["avg_nmse_db"], row["mean_iterations"])
    failed = sum(r.failed for r in records)
    print(f"wrote {out} ({len(records)} rows, {failed} failed) and {summary}")
    if records and failed == len(records):
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="lrsbe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override base_seed")
        p.add_argument("--snr", type=float, nargs="+", help="override the SNR grid (dB)")
        p.add_argument("--deterministic", action="store_true",
                       help="pin BLAS to one thread for bitwise-reproducible results")

    gen = sub.add_parser("generate", help="write a synthetic channel realization")
    common(gen)
    gen.add_argument("--out", help="channel JSON path")
    gen.set_defaults(func=cmd_generate)

    est = sub.add_parser("estimate", help="run one estimator on a stored channel")
    common(est)
    est.add_argument("--channel", required=True, help="channel JSON from 'generate'")
    est.add_argument("--solver", required=True, help=f"one of: {', '.join(SOLVERS)}")
    est.add_argument("--trace", help="write the per-iteration trace as CSV")
    est.set_defaults(func=cmd_estimate)

    swp = sub.add_parser("sweep", help="Monte-Carlo sweep over SNR and trials")
    common(swp)
    swp.add_argument("--out", help="results CSV path")
    swp.add_argument("--summary", help="summary JSON path (default: CSV path with .json)")
    swp.add_argument("--trials", type=int, help="override n_trials")
    swp.add_argument("--jobs", type=int, default=os.cpu_count(), help="worker processes")
    swp.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
