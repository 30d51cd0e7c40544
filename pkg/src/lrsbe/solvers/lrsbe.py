"""Joint low-rank and sparse Bayesian estimation (LRSBE) and its sparse-only variant.

Each outer iteration runs a block-SBL posterior for the sparse component
against the residual left by the low-rank estimate, then one proximal
gradient step plus singular-value thresholding for the low-rank component
against the residual left by the sparse estimate, and finally re-estimates the
precisions ``alpha`` (sparse) and ``beta`` (low-rank).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, EmptyModelError, NumericalError, ParameterError
from ..measurement import adjoint, forward, step_length
from ._common import EstimateResult, IterationRecord, check_problem, relative_change

CLAMP_LO = 1e-8
CLAMP_HI = 1e12


@dataclass
class LrsbeOptions:
    q_max: int = 50
    tol: float = 1e-4
    block_len: int | None = None  # None means M_h
    alpha0: float = 1.0
    beta0: float = 1.0  # channel units, like gamma0
    gamma0: float = 1.0  # prior block variance in channel units (entries of h)
    c_reg: float = 1e-6
    trace_sigma_l_mode: str = "zero"  # "zero" or "gradient"
    prune: float = 1e-8
    svt_mode: str = "collective"  # or "per_user"
    noise_floor: float = 1e-10  # relative to mean |y|^2, keeps the E-step solvable
    whiten: bool = True  # run in units where the noise power is 1; priors are rescaled
    deterministic: bool = True

    def resolve_block_len(self, dims):
        return int(self.block_len) if self.block_len is not None else int(dims[0])

    def validate(self, dims):
        m_h, m_v, k_users = dims
        if self.q_max < 1:
            raise ParameterError(f"q_max must be >= 1, got {self.q_max}")
        if not self.tol > 0:
            raise ParameterError(f"tol must be > 0, got {self.tol}")
        if self.alpha0 <= 0 or self.beta0 <= 0 or self.gamma0 <= 0:
            raise ParameterError("alpha0, beta0 and gamma0 must be positive")
        block = self.resolve_block_len(dims)
        if block < 1 or (m_h * m_v * k_users) % block:
            raise ParameterError(f"block_len={block} must divide M*K={m_h * m_v * k_users}")
        if self.trace_sigma_l_mode not in ("zero", "gradient"):
            raise ParameterError(f"unknown trace_sigma_l_mode {self.trace_sigma_l_mode!r}")
        if self.svt_mode not in ("collective", "per_user"):
            raise ParameterError(f"unknown svt_mode {self.svt_mode!r}")


@dataclass
class SolverState:
    h_s: np.ndarray
    h_l: np.ndarray
    alpha: float
    beta: float
    gamma: np.ndarray  # (G,) block weights, 0 marks a pruned block
    corr_c: np.ndarray  # (L, L) shared intra-block correlation
    mu: np.ndarray
    sigma_blocks: np.ndarray  # (G, L, L) diagonal blocks of the posterior covariance
    iter: int = 0
    sparse_alive: bool = field(default=True)

    @classmethod
    def initial(cls, mk, block_len, alpha0=1.0, beta0=1.0, gamma0=1.0):
        g = mk // block_len
        return cls(
            h_s=np.zeros(mk, dtype=complex),
            h_l=np.zeros(mk, dtype=complex),
            alpha=float(alpha0),
            beta=float(beta0),
            gamma=np.full(g, float(gamma0)),
            corr_c=np.eye(block_len, dtype=complex),
            mu=np.zeros(mk, dtype=complex),
            sigma_blocks=np.zeros((g, block_len, block_len), dtype=complex),
        )


# --- sparse branch -----------------------------------------------------------


def sbl_e_step(p, r_s, state, sigma2):
    """Block-SBL posterior of the sparse component given residual ``r_s``.

    Returns the posterior mean (length ``M K``) and the ``G`` diagonal
    ``L x L`` blocks of the posterior covariance under the prior
    ``Gamma = blockdiag(gamma_g C)``.
    """
    gamma = np.asarray(state.gamma, dtype=float)
    c = np.asarray(state.corr_c)
    block = c.shape[0]
    n, k = p.pilots.shape
    r_s = np.asarray(r_s)
    if r_s.shape[0] % n:
        raise DimensionError(f"residual length {r_s.shape[0]} is not a multiple of N={n}")
    m = r_s.shape[0] // n
    if gamma.shape[0] * block != m * k:
        raise DimensionError(f"G*L={gamma.shape[0] * block} does not match M*K={m * k}")
    if m % block == 0:
        return _e_step_aligned(p.pilots, r_s, gamma, c, sigma2, m)
    return _e_step_general(p.pilots, r_s, gamma, c, sigma2, m)


def _hermitian_inverse(s):
    """Inverse of a (batch of) Hermitian positive definite matrices via Cholesky."""
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "E-step system A Gamma A^H + sigma2 I is not positive definite "
            "(sigma2 = 0 with a rank-deficient Gamma?)"
        ) from exc
    eye = np.broadcast_to(np.eye(s.shape[-1]), s.shape)
    linv = np.linalg.solve(chol, eye)
    return np.swapaxes(linv.conj(), -1, -2) @ linv


def _e_step_aligned(x, r_s, gamma, c, sigma2, m):
    # Blocks never straddle users, so the system splits into M/L independent
    # (N L) x (N L) systems, one per within-user block position.
    n, k = x.shape
    block = c.shape[0]
    pos = m // block
    gam = gamma.reshape(k, pos)
    pair = np.einsum("nk,jk,kb->bnj", x, x.conj(), gam)
    s = np.einsum("bnj,lm->bnljm", pair, c).reshape(pos, n * block, n * block)
    s = s + sigma2 * np.eye(n * block)
    s_inv = _hermitian_inverse(s)

    r = r_s.reshape(n, pos, block).transpose(1, 0, 2).reshape(pos, n * block, 1)
    z = (s_inv @ r).reshape(pos, n, block)
    proj = np.einsum("nk,bnl->kbl", x.conj(), z)
    mu = gam[:, :, None] * np.einsum("lm,kbm->kbl", c, proj)

    s_inv5 = s_inv.reshape(pos, n, block, n, block)
    inner = np.einsum("nk,bnljm,jk->kblm", x.conj(), s_inv5, x)
    g2 = (gam**2)[:, :, None, None]
    sigma = gam[:, :, None, None] * c - g2 * (c @ inner @ c)
    return mu.reshape(-1), sigma.reshape(k * pos, block, block)


def _block_columns(x, m, g, block):
    # Columns of A for collective indices g*L .. g*L+L-1 (the extracted block matrix A_g).
    n = x.shape[0]
    cols = np.zeros((n * m, block), dtype=complex)
    for j, idx in enumerate(range(g * block, (g + 1) * block)):
        user, ant = divmod(idx, m)
        cols[np.arange(n) * m + ant, j] = x[:, user]
    return cols


def _e_step_general(x, r_s, gamma, c, sigma2, m):
    n = x.shape[0]
    block = c.shape[0]
    n_blocks = gamma.shape[0]
    cols = np.stack([_block_columns(x, m, g, block) for g in range(n_blocks)])
    weighted = gamma[:, None, None] * (cols @ c)
    s = np.einsum("gil,gjl->ij", weighted, cols.conj()) + sigma2 * np.eye(n * m)
    s_inv = _hermitian_inverse(s)
    z = s_inv @ r_s
    back = np.einsum("gil,i->gl", cols.conj(), z)
    mu = gamma[:, None] * (back @ c.T)
    inner = np.einsum("gil,ij,gjm->glm", cols.conj(), s_inv, cols)
    sigma = gamma[:, None, None] * c - (gamma**2)[:, None, None] * (c @ inner @ c)
    return mu.reshape(-1), sigma


def update_block_params(mu, sigma_blocks, gamma, alpha, c_reg=1e-6, prune=1e-8):
    """Shared correlation ``C`` and block weights ``gamma`` from posterior statistics.

    Pruned blocks (``gamma == 0``) are excluded from the average and stay at 0.
    ``C`` is symmetrised, ridged by ``c_reg`` and rescaled to trace ``L``.
    """
    sigma_blocks = np.asarray(sigma_blocks)
    n_blocks, block, _ = sigma_blocks.shape
    gamma = np.asarray(gamma, dtype=float)
    active = gamma > 0
    if not active.any():
        raise EmptyModelError("all sparse blocks are pruned")
    mu_b = np.asarray(mu).reshape(n_blocks, block)
    stats = sigma_blocks + mu_b[:, :, None] * mu_b[:, None, :].conj()

    c = np.mean(stats[active] / gamma[active, None, None], axis=0)
    c = 0.5 * (c + c.conj().T) + c_reg * np.eye(block)
    c = c * (block / np.trace(c).real)

    c_inv = np.linalg.inv(c)
    new = np.zeros(n_blocks)
    quad = np.einsum("lm,gml->g", c_inv, stats[active]).real / block
    new[active] = np.maximum(quad, 0.0) / (1.0 + alpha)
    top = new.max()
    new[new < prune * top] = 0.0
    return c, new


# --- low-rank branch ---------------------------------------------------------


def soft_threshold(x, tau):
    """Complex soft threshold: shrink magnitudes by ``tau``, keep phases."""
    x = np.asarray(x)
    mag = np.abs(x)
    scale = np.zeros_like(mag)
    np.divide(np.maximum(mag - tau, 0.0), mag, out=scale, where=mag > 0)
    return x * scale


def lowrank_step(p, r_l, h_l, beta, t_step):
    """One gradient step on ``||r_l - A h_l||^2`` followed by soft thresholding."""
    if not t_step > 0:
        raise ParameterError(f"step length must be positive, got {t_step}")
    grad = adjoint(p, r_l - forward(p, h_l))
    return soft_threshold(h_l + grad / t_step, beta / (2.0 * t_step))


def _collective(h, dims):
    m_h, m_v, k_users = dims
    return h.reshape(k_users, m_h, m_v).transpose(1, 0, 2).reshape(m_h, k_users * m_v)


def _uncollective(mat, dims):
    m_h, m_v, k_users = dims
    return mat.reshape(m_h, k_users, m_v).transpose(1, 0, 2).reshape(-1)


def _shrink_singular(mat, thr):
    u, s, vh = np.linalg.svd(mat, full_matrices=False)
    s = np.maximum(s - thr, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vh[keep], s


def svt(h_l, beta, dims, mode="collective"):
    """Singular-value soft threshold by ``sqrt(beta)/2``; returns (vector, singular values)."""
    dims = tuple(int(d) for d in dims)
    m_h, m_v, k_users = dims
    h_l = np.asarray(h_l)
    if h_l.shape != (m_h * m_v * k_users,):
        raise DimensionError(f"expected length {m_h * m_v * k_users}, got {h_l.shape}")
    thr = math.sqrt(beta) / 2.0
    if mode == "collective":
        mat, s = _shrink_singular(_collective(h_l, dims), thr)
        return _uncollective(mat, dims), s
    per = h_l.reshape(k_users, m_h, m_v)
    out = np.empty_like(per)
    svals = []
    for k in range(k_users):
        out[k], s = _shrink_singular(per[k], thr)
        svals.append(s)
    return out.reshape(-1), np.concatenate(svals)


def svt_step(h_l, beta, dims, mode="collective"):
    return svt(h_l, beta, dims, mode)[0]


# --- M-step ------------------------------------------------------------------


def _clamp(num, den):
    if not (math.isfinite(num) and math.isfinite(den)):
        raise NumericalError(f"non-finite M-step ratio {num}/{den}")
    if den <= 0.0:
        return CLAMP_HI
    return min(max(num / den, CLAMP_LO), CLAMP_HI)


def posterior_weights(mu, sigma_blocks):
    """Per-entry ``|mu|^2 / Sigma_kk`` clamped to [0, 1] (pruned entries give 0)."""
    diag = np.real(np.diagonal(sigma_blocks, axis1=1, axis2=2)).reshape(-1)
    power = np.abs(mu) ** 2
    theta = np.where(power > 0, 1.0, 0.0)
    np.divide(power, diag, out=theta, where=diag > 0)
    return np.clip(theta, 0.0, 1.0)


def m_step(y, p, state, trace_sigma_l=0.0):
    """Re-estimate ``(alpha, beta)`` from the current iterates; both clamped to [1e-8, 1e12]."""
    mk = state.h_s.shape[0]
    resid = y - forward(p, state.h_s + state.h_l)
    theta = posterior_weights(state.mu, state.sigma_blocks)
    alpha_den = float(np.vdot(resid, resid).real) + float(np.sum(1.0 - theta)) / state.alpha
    beta_den = float(np.vdot(state.h_l, state.h_l).real) + float(trace_sigma_l)
    return _clamp(mk, alpha_den), _clamp(mk, beta_den)


# --- driver ------------------------------------------------------------------


def lrsbe_estimate(meas, pilots, dims, opts=None, callback=None, lowrank=True):
    """Run the LRSBE loop; ``lowrank=False`` pins ``h^L = 0`` (the BSBE variant).

    ``callback(i, h_hat)`` is invoked after each iteration with the combined
    estimate. Its cost is included in ``runtime_ms``.
    """
    opts = opts or LrsbeOptions()
    dims = tuple(int(d) for d in dims)
    opts.validate(dims)
    m, mk = check_problem(meas, pilots, dims)
    block = opts.resolve_block_len(dims)
    y = np.asarray(meas.y, dtype=complex)
    t_step = step_length(pilots)

    y_power = float(np.mean(np.abs(y) ** 2))
    sigma2 = max(meas.sigma2, opts.noise_floor * (y_power if y_power > 0 else 1.0))
    scale = math.sqrt(sigma2) if opts.whiten else 1.0
    y = y / scale
    sigma2 = sigma2 / scale**2
    trace_sigma_l = mk * sigma2 / t_step if opts.trace_sigma_l_mode == "gradient" else 0.0

    start = time.perf_counter()
    state = SolverState.initial(mk, block, opts.alpha0, opts.beta0 * scale**2, opts.gamma0 / scale**2)
    h_prev = np.zeros(mk, dtype=complex)
    svals = np.zeros(0)
    trace = []
    converged = False
    for i in range(1, opts.q_max + 1):
        state.iter = i
        r_s = y - forward(pilots, state.h_l)
        if state.sparse_alive:
            try:
                state.mu, state.sigma_blocks = sbl_e_step(pilots, r_s, state, sigma2)
            except NumericalError as exc:
                raise NumericalError(str(exc), iteration=i) from exc
            try:
                state.corr_c, state.gamma = update_block_params(
                    state.mu, state.sigma_blocks, state.gamma, state.alpha, opts.c_reg, opts.prune
                )
            except EmptyModelError:
                state.sparse_alive = False
                state.mu = np.zeros(mk, dtype=complex)
                state.sigma_blocks = np.zeros_like(state.sigma_blocks)
            state.h_s = state.mu.copy()

        if lowrank:
            r_l = y - forward(pilots, state.h_s)
            h_grad = lowrank_step(pilots, r_l, state.h_l, state.beta, t_step)
            state.h_l, svals = svt(h_grad, state.beta, dims, opts.svt_mode)

        h = state.h_s + state.h_l
        alpha, beta = m_step(y, pilots, state, trace_sigma_l)
        state.alpha = alpha
        if lowrank:
            state.beta = beta

        rel = relative_change(h, h_prev)
        resid = y - forward(pilots, h)
        rnorm = float(np.linalg.norm(resid))
        trace.append(
            IterationRecord(
                iter=i,
                rel_change=rel,
                residual_norm=rnorm,
                alpha=state.alpha,
                beta=state.beta,
                nnz_blocks=int(np.count_nonzero(state.gamma)) if state.sparse_alive else 0,
                rank_hl=int(np.count_nonzero(svals)),
                objective=rnorm**2
                + state.alpha * float(np.sum(np.abs(state.h_s)))
                + state.beta * float(np.sum(svals)),
            )
        )
        if callback is not None:
            callback(i, h * scale)
        h_prev = h
        if rel <= opts.tol:
            converged = True
            break

    runtime_ms = (time.perf_counter() - start) * 1e3
    return EstimateResult(
        h_hat=(state.h_s + state.h_l) * scale,
        h_s_hat=state.h_s * scale,
        h_l_hat=state.h_l * scale,
        iterations=state.iter,
        converged=converged,
        runtime_ms=runtime_ms,
        trace=trace,
    )


def bsbe_estimate(meas, pilots, dims, opts=None, callback=None):
    """Block SBL with the low-rank branch disabled."""
    return lrsbe_estimate(meas, pilots, dims, opts, callback, lowrank=False)
