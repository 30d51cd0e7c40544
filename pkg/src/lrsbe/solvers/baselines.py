"""Sparse-only reference estimators: OMP, ISTA and element-wise SBL.

All three use the same structured operator as LRSBE and share its stopping
rule (relative change of the estimate) where it applies.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from ..errors import NumericalError, ParameterError
from ..measurement import adjoint, forward, step_length
from ._common import EstimateResult, IterationRecord, check_problem, relative_change
from .lrsbe import sbl_e_step, soft_threshold


def _zeros(mk):
    return np.zeros(mk, dtype=complex)


# --- OMP ---------------------------------------------------------------------


@dataclass
class OmpOptions:
    max_atoms: int | None = None  # None means M*N, the rank of A
    tol_scale: float = 1.0  # stop once ||r|| <= tol_scale * sqrt(M N sigma2)
    rel_tol: float = 1e-10  # noiseless floor, relative to ||y||
    deterministic: bool = True

    @property
    def q_max(self):
        return self.max_atoms

    def validate(self, dims):
        if self.max_atoms is not None and self.max_atoms < 1:
            raise ParameterError(f"max_atoms must be >= 1, got {self.max_atoms}")
        if self.tol_scale < 0 or self.rel_tol < 0:
            raise ParameterError("OMP tolerances must be non-negative")


def _atom(pilots, mk, idx):
    e = np.zeros(mk, dtype=complex)
    e[idx] = 1.0
    return forward(pilots, e)


def omp_estimate(meas, pilots, dims, opts=None, callback=None):
    """Orthogonal matching pursuit over the ``M K`` columns of ``A``.

    The active set is kept as an incrementally orthogonalised basis, so each
    greedy step costs one adjoint product plus one Gram-Schmidt pass.
    """
    opts = opts or OmpOptions()
    opts.validate(dims)
    m, mk = check_problem(meas, pilots, dims)
    y = np.asarray(meas.y, dtype=complex)
    mn = y.shape[0]
    budget = min(opts.max_atoms or mn, mn, mk)
    eps = max(opts.tol_scale * math.sqrt(mn * meas.sigma2), opts.rel_tol * np.linalg.norm(y))

    start = time.perf_counter()
    support = []
    q = np.zeros((mn, budget), dtype=complex)
    r_fac = np.zeros((budget, budget), dtype=complex)
    qty = np.zeros(budget, dtype=complex)
    excluded = np.zeros(mk, dtype=bool)
    resid = y.copy()
    trace = []

    def current():
        h = _zeros(mk)
        s = len(support)
        if s:
            coef = np.linalg.solve(np.triu(r_fac[:s, :s]), qty[:s])
            h[support] = coef
        return h

    while len(support) < budget and np.linalg.norm(resid) > eps:
        corr = np.abs(adjoint(pilots, resid))
        corr[excluded] = -1.0
        idx = int(np.argmax(corr))
        if corr[idx] <= 0:
            break
        s = len(support)
        a = _atom(pilots, mk, idx)
        v = a.copy()
        coeffs = np.zeros(s, dtype=complex)
        for _ in range(2):  # re-orthogonalise once for stability
            proj = q[:, :s].conj().T @ v
            v = v - q[:, :s] @ proj
            coeffs += proj
        norm = np.linalg.norm(v)
        excluded[idx] = True
        if norm <= 1e-10 * np.linalg.norm(a):
            continue  # column already in the span (pilot twin)
        q[:, s] = v / norm
        r_fac[:s, s] = coeffs
        r_fac[s, s] = norm
        qty[s] = np.vdot(q[:, s], y)
        resid = resid - q[:, s] * np.vdot(q[:, s], resid)
        support.append(idx)
        trace.append(IterationRecord(iter=s + 1, rel_change=math.nan,
                                     residual_norm=float(np.linalg.norm(resid)),
                                     nnz_blocks=s + 1))
        if callback is not None:
            callback(s + 1, current())

    h = current()
    return EstimateResult(
        h_hat=h,
        h_s_hat=h,
        h_l_hat=_zeros(mk),
        iterations=len(support),
        converged=bool(np.linalg.norm(resid) <= eps),
        runtime_ms=(time.perf_counter() - start) * 1e3,
        trace=trace,
    )


# --- ISTA --------------------------------------------------------------------


@dataclass
class IstaOptions:
    q_max: int = 500
    tol: float = 1e-4
    lam_scale: float = 1.0  # lambda = lam_scale * sigma * sqrt(2 log(MK))
    lam: float | None = None  # explicit lambda, overrides lam_scale
    deterministic: bool = True

    def validate(self, dims):
        if self.q_max < 1:
            raise ParameterError(f"q_max must be >= 1, got {self.q_max}")
        if not self.tol > 0:
            raise ParameterError(f"tol must be > 0, got {self.tol}")
        if self.lam_scale < 0 or (self.lam is not None and self.lam < 0):
            raise ParameterError("lambda must be non-negative")


def ista_lambda(opts, sigma2, mk):
    if opts.lam is not None:
        return float(opts.lam)
    return opts.lam_scale * math.sqrt(sigma2) * math.sqrt(2.0 * math.log(mk))


def ista_objective(y, pilots, h, lam):
    r = y - forward(pilots, h)
    return float(np.vdot(r, r).real + lam * np.sum(np.abs(h)))


def ista_estimate(meas, pilots, dims, opts=None, callback=None):
    """Proximal gradient on ``||y - A h||^2 + lam ||h||_1`` with step ``1/T``."""
    opts = opts or IstaOptions()
    opts.validate(dims)
    m, mk = check_problem(meas, pilots, dims)
    y = np.asarray(meas.y, dtype=complex)
    t_step = step_length(pilots)
    lam = ista_lambda(opts, meas.sigma2, mk)
    tau = lam / (2.0 * t_step)

    start = time.perf_counter()
    h = _zeros(mk)
    trace = []
    converged = False
    i = 0
    for i in range(1, opts.q_max + 1):
        resid = y - forward(pilots, h)
        h_new = soft_threshold(h + adjoint(pilots, resid) / t_step, tau)
        rel = relative_change(h_new, h)
        h = h_new
        trace.append(IterationRecord(iter=i, rel_change=rel,
                                     residual_norm=float(np.linalg.norm(y - forward(pilots, h)))))
        if callback is not None:
            callback(i, h)
        if rel <= opts.tol:
            converged = True
            break
    return EstimateResult(h, h, _zeros(mk), i, converged,
                          (time.perf_counter() - start) * 1e3, trace)


# --- SBE ---------------------------------------------------------------------


@dataclass
class SbeOptions:
    q_max: int = 50
    tol: float = 1e-4
    gamma0: float = 1.0
    prune: float = 1e-8
    noise_floor: float = 1e-10
    deterministic: bool = True

    def validate(self, dims):
        if self.q_max < 1:
            raise ParameterError(f"q_max must be >= 1, got {self.q_max}")
        if not self.tol > 0:
            raise ParameterError(f"tol must be > 0, got {self.tol}")
        if self.gamma0 <= 0:
            raise ParameterError("gamma0 must be positive")


def sbe_gamma_update(mu, sigma_blocks, prune=1e-8):
    """EM update ``gamma_k = Sigma_kk + |mu_k|^2`` with relative pruning."""
    gamma = np.real(sigma_blocks[:, 0, 0]) + np.abs(mu) ** 2
    gamma = np.maximum(gamma, 0.0)
    gamma[gamma < prune * gamma.max()] = 0.0
    return gamma


def sbe_estimate(meas, pilots, dims, opts=None, callback=None):
    """Element-wise sparse Bayesian learning (block length 1, no correlation)."""
    opts = opts or SbeOptions()
    opts.validate(dims)
    m, mk = check_problem(meas, pilots, dims)
    y = np.asarray(meas.y, dtype=complex)
    y_power = float(np.mean(np.abs(y) ** 2))
    sigma2 = max(meas.sigma2, opts.noise_floor * (y_power if y_power > 0 else 1.0))

    start = time.perf_counter()
    state = SimpleNamespace(gamma=np.full(mk, float(opts.gamma0)),
                            corr_c=np.ones((1, 1), dtype=complex))
    h = _zeros(mk)
    trace = []
    converged = False
    i = 0
    for i in range(1, opts.q_max + 1):
        if state.gamma.any():
            try:
                mu, sigma = sbl_e_step(pilots, y, state, sigma2)
            except NumericalError as exc:
                raise NumericalError(str(exc), iteration=i) from exc
            state.gamma = sbe_gamma_update(mu, sigma, opts.prune)
        else:
            mu = _zeros(mk)
        rel = relative_change(mu, h)
        h = mu
        trace.append(IterationRecord(iter=i, rel_change=rel,
                                     residual_norm=float(np.linalg.norm(y - forward(pilots, h))),
                                     nnz_blocks=int(np.count_nonzero(state.gamma))))
        if callback is not None:
            callback(i, h)
        if rel <= opts.tol:
            converged = True
            break
    return EstimateResult(h, h, _zeros(mk), i, converged,
                          (time.perf_counter() - start) * 1e3, trace)
