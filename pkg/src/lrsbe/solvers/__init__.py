"""Estimator registry: every solver takes ``(meas, pilots, dims, opts, callback)``."""
from dataclasses import fields, replace

from ..errors import ParameterError
from ._common import EstimateResult, IterationRecord, relative_change
from .baselines import (
    IstaOptions,
    OmpOptions,
    SbeOptions,
    ista_estimate,
    omp_estimate,
    sbe_estimate,
)
from .lrsbe import (
    LrsbeOptions,
    SolverState,
    bsbe_estimate,
    lowrank_step,
    lrsbe_estimate,
    m_step,
    sbl_e_step,
    soft_threshold,
    svt,
    svt_step,
    update_block_params,
)

SOLVERS = {
    "omp": (omp_estimate, OmpOptions),
    "ista": (ista_estimate, IstaOptions),
    "sbe": (sbe_estimate, SbeOptions),
    "bsbe": (bsbe_estimate, LrsbeOptions),
    "lrsbe": (lrsbe_estimate, LrsbeOptions),
}


def make_options(name, overrides=None):
    """Build the options dataclass for ``name``, rejecting unknown keys."""
    if name not in SOLVERS:
        raise ParameterError(f"unknown solver {name!r}; valid: {', '.join(SOLVERS)}")
    cls = SOLVERS[name][1]
    overrides = dict(overrides or {})
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ParameterError(f"unknown option(s) for {name}: {', '.join(sorted(unknown))}")
    return replace(cls(), **overrides)


def run_estimator(name, meas, pilots, dims, opts=None, callback=None):
    if name not in SOLVERS:
        raise ParameterError(f"unknown solver {name!r}; valid: {', '.join(SOLVERS)}")
    fn, cls = SOLVERS[name]
    return fn(meas, pilots, dims, opts if opts is not None else cls(), callback)


__all__ = [
    "SOLVERS",
    "EstimateResult",
    "IterationRecord",
    "IstaOptions",
    "LrsbeOptions",
    "OmpOptions",
    "SbeOptions",
    "SolverState",
    "bsbe_estimate",
    "ista_estimate",
    "lowrank_step",
    "lrsbe_estimate",
    "m_step",
    "make_options",
    "omp_estimate",
    "relative_change",
    "run_estimator",
    "sbe_estimate",
    "sbl_e_step",
    "soft_threshold",
    "svt",
    "svt_step",
    "update_block_params",
]
