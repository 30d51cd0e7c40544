"""DFT beam-domain transforms and synthetic low-rank + block-sparse channels.

Vectors are row-major flattenings of the ``M_h x M_v`` beam-domain matrix, so
``h_k = H_k.reshape(-1)`` and the collective channel stacks users back to back.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParameterError


def dft_matrix(m):
    """Unitary DFT matrix with entry ``(p, q) = exp(-2j*pi*p*q/m) / sqrt(m)``."""
    m = int(m)
    if m < 1:
        raise DimensionError(f"DFT size must be >= 1, got {m}")
    idx = np.arange(m)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / m) / math.sqrt(m)


@dataclass(frozen=True)
class BeamTransform:
    u_h: np.ndarray
    u_v: np.ndarray

    @classmethod
    def dft(cls, m_h, m_v):
        return cls(dft_matrix(m_h), dft_matrix(m_v))

    @property
    def shape(self):
        return self.u_h.shape[0], self.u_v.shape[0]


def _check_shape(x, t):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape != t.shape:
        raise DimensionError(f"expected matrix of shape {t.shape}, got {x.shape}")
    return x


def to_beam(h_space, t):
    """Space-domain matrix to beam domain: ``U_h^H X U_v``."""
    x = _check_shape(h_space, t)
    return t.u_h.conj().T @ x @ t.u_v


def from_beam(h_beam, t):
    """Inverse of :func:`to_beam`: ``U_h H U_v^H``."""
    x = _check_shape(h_beam, t)
    return t.u_h @ x @ t.u_v.conj().T


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs of the structural channel surrogate.

    ``energy_concentration`` is the required share of low-rank energy in the
    top ``rank_r`` singular values. Generated low-rank components have rank at
    most ``rank_r``, so the share is always 1 and the value is only validated.
    """

    rank_r: int = 5
    sparse_blocks: int = 2
    block_len_gen: int = 8
    power_split: float = 0.5
    energy_concentration: float = 0.9

    def validate(self, dims):
        m_h, m_v, k_users = _check_dims(dims)
        for name in ("rank_r", "sparse_blocks", "block_len_gen"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value}")
        if self.rank_r > min(m_h, m_v):
            raise ParameterError(
                f"rank_r={self.rank_r} exceeds min(M_h, M_v)={min(m_h, m_v)}"
            )
        if self.sparse_blocks * self.block_len_gen > m_h * m_v:
            raise ParameterError(
                f"sparse_blocks*block_len_gen={self.sparse_blocks * self.block_len_gen} "
                f"exceeds M={m_h * m_v}"
            )
        if not 0.0 <= self.power_split <= 1.0:
            raise ParameterError(f"power_split must lie in [0, 1], got {self.power_split}")
        if not 0.0 < self.energy_concentration <= 1.0:
            raise ParameterError(
                f"energy_concentration must lie in (0, 1], got {self.energy_concentration}"
            )


def _check_dims(dims):
    if len(dims) != 3:
        raise DimensionError(f"dims must be (M_h, M_v, K), got {dims}")
    m_h, m_v, k_users = (int(d) for d in dims)
    if min(m_h, m_v, k_users) < 1:
        raise DimensionError(f"dims must be positive, got {dims}")
    return m_h, m_v, k_users


@dataclass(frozen=True)
class ChannelRealization:
    """Per-user beam-domain channels, stored as ``(K, M)`` arrays."""

    h_lowrank: np.ndarray
    h_sparse: np.ndarray
    dims: tuple
    seed: int | None = None

    @property
    def h_beam(self):
        return self.h_lowrank + self.h_sparse

    @property
    def collective(self):
        """Collective channel ``[h_1; ...; h_K]`` of length ``M K``."""
        return self.h_beam.reshape(-1)

    def matrices(self, part="beam"):
        m_h, m_v, k_users = self.dims
        arr = {"beam": self.h_beam, "lowrank": self.h_lowrank, "sparse": self.h_sparse}[part]
        return arr.reshape(k_users, m_h, m_v)

    def to_dict(self):
        users = [
            {
                "lowrank_re": lr.real.tolist(),
                "lowrank_im": lr.imag.tolist(),
                "sparse_re": sp.real.tolist(),
                "sparse_im": sp.imag.tolist(),
            }
            for lr, sp in zip(self.h_lowrank, self.h_sparse)
        ]
        return {"dims": list(self.dims), "seed": self.seed, "users": users}

    @classmethod
    def from_dict(cls, doc):
        dims = _check_dims(doc["dims"])
        m = dims[0] * dims[1]
        users = doc["users"]
        if len(users) != dims[2]:
            raise DimensionError(f"expected {dims[2]} users, found {len(users)}")
        lowrank = np.array(
            [np.asarray(u["lowrank_re"]) + 1j * np.asarray(u["lowrank_im"]) for u in users]
        )
        sparse = np.array(
            [np.asarray(u["sparse_re"]) + 1j * np.asarray(u["sparse_im"]) for u in users]
        )
        if lowrank.shape != (dims[2], m) or sparse.shape != (dims[2], m):
            raise DimensionError("user arrays must all have length M_h*M_v")
        return cls(lowrank, sparse, dims, doc.get("seed"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def lowrank_band_width(m_v):
    return math.ceil(m_v / 4)


def synthesize_channel(params, dims, rng_seed):
    """Draw one multi-user beam-domain channel with a known low-rank/sparse split.

    Low-rank part: all users share an ``M_h x rank_r`` orthonormal left basis
    (common scattering environment), so the collective ``[H_1^L, ..., H_K^L]``
    has rank at most ``rank_r``. Each user's right factor lives on a random
    contiguous band of ``ceil(M_v/4)`` beam columns, with singular weights
    halving in power per direction.

    Sparse part: ``sparse_blocks`` distinct blocks of ``block_len_gen``
    consecutive entries, aligned to the block grid, filled with CN(0, 1).

    Each user is scaled to total energy ``M`` with exactly ``power_split`` of
    it in the low-rank part.
    """
    params.validate(dims)
    m_h, m_v, k_users = _check_dims(dims)
    m = m_h * m_v
    rng = np.random.default_rng(rng_seed)

    basis, _ = np.linalg.qr(_crandn(rng, m_h, params.rank_r))
    weights = np.sqrt(0.5 ** np.arange(params.rank_r))
    band = lowrank_band_width(m_v)
    n_slots = m // params.block_len_gen

    lowrank = np.zeros((k_users, m), dtype=complex)
    sparse = np.zeros((k_users, m), dtype=complex)
    for k in range(k_users):
        start = int(rng.integers(0, m_v - band + 1))
        mat = np.zeros((m_h, m_v), dtype=complex)
        mat[:, start:start + band] = basis @ (weights[:, None] * _crandn(rng, params.rank_r, band))
        lr = mat.reshape(-1)

        sp = np.zeros(m, dtype=complex)
        slots = rng.choice(n_slots, size=params.sparse_blocks, replace=False)
        for s in np.sort(slots):
            lo = int(s) * params.block_len_gen
            sp[lo:lo + params.block_len_gen] = _crandn(rng, params.block_len_gen)

        lr_energy = np.vdot(lr, lr).real
        sp_energy = np.vdot(sp, sp).real
        lowrank[k] = lr * math.sqrt(params.power_split * m / lr_energy)
        sparse[k] = sp * math.sqrt((1.0 - params.power_split) * m / sp_energy)
    return ChannelRealization(lowrank, sparse, (m_h, m_v, k_users), rng_seed)


def top_singular_share(matrix, r):
    """Fraction of squared singular-value mass in the ``r`` largest values."""
    s = np.linalg.svd(matrix, compute_uv=False)
    total = np.sum(s**2)
    if total == 0:
        return 1.0
    return float(np.sum(s[:r] ** 2) / total)
