from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..errors import DimensionError

TRACE_COLUMNS = ("iter", "rel_change", "residual_norm", "alpha", "beta", "nnz_blocks", "rank_hl")


@dataclass
class IterationRecord:
    iter: int
    rel_change: float
    residual_norm: float
    alpha: float = math.nan
    beta: float = math.nan
    nnz_blocks: int = 0
    rank_hl: int = 0
    objective: float = math.nan


@dataclass
class EstimateResult:
    h_hat: np.ndarray
    h_s_hat: np.ndarray
    h_l_hat: np.ndarray
    iterations: int
    converged: bool
    runtime_ms: float
    trace: list = field(default_factory=list)

    def write_trace_csv(self, path_or_file):
        """Dump the per-iteration trace as CSV (one row per iteration)."""
        if hasattr(path_or_file, "write"):
            _write_trace(path_or_file, self.trace)
        else:
            with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
                _write_trace(fh, self.trace)


def _write_trace(fh, trace):
    writer = csv.writer(fh)
    writer.writerow(TRACE_COLUMNS + ("objective",))
    for rec in trace:
        row = asdict(rec)
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                         for c in TRACE_COLUMNS + ("objective",)])


def relative_change(new, old):
    """``||new - old|| / ||old||`` with 0/0 read as 0 and x/0 as inf."""
    num = np.linalg.norm(new - old)
    den = np.linalg.norm(old)
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return float(num / den)


def check_problem(meas, pilots, dims):
    """Validate shapes and return ``(M, M*K)``."""
    m_h, m_v, k_users = (int(d) for d in dims)
    m = m_h * m_v
    if k_users != pilots.k_users:
        raise DimensionError(f"dims say K={k_users} but pilots have K={pilots.k_users}")
    if meas.y.shape != (m * pilots.n_pilots,):
        raise DimensionError(
            f"measurement length {meas.y.shape} does not match M*N={m * pilots.n_pilots}"
        )
    return m, m * k_users


def option_names(cls):
    return {f.name for f in fields(cls)}
