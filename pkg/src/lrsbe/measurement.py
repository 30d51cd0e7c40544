"""Pilots and the Kronecker-structured measurement operator ``A = X kron I_M``.

``A`` is never formed. With the collective channel reshaped to a ``K x M``
array (one user per row), ``A h`` is the ``N x M`` product ``X @ H`` flattened,
and ``A^H v`` is ``X^H @ V``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .beamspace import dft_matrix
from .errors import DegenerateInputError, DimensionError, ParameterError


@dataclass(frozen=True)
class PilotSet:
    pilots: np.ndarray  # N x K, column k is user k's sequence

    @property
    def n_pilots(self):
        return self.pilots.shape[0]

    @property
    def k_users(self):
        return self.pilots.shape[1]

    def gram(self):
        return self.pilots.conj().T @ self.pilots


def make_pilots(n_pilots, k_users, rng_seed=None):
    """Assign column ``k mod N`` of the unitary N-point DFT to user ``k``.

    The assignment is deterministic; ``rng_seed`` is accepted for interface
    symmetry with the other generators.
    """
    if n_pilots < 1 or k_users < 1:
        raise DimensionError(f"need N >= 1 and K >= 1, got N={n_pilots}, K={k_users}")
    if n_pilots > k_users:
        raise ParameterError(f"N={n_pilots} exceeds K={k_users}; only N <= K is modelled")
    f = dft_matrix(n_pilots)
    return PilotSet(f[:, np.arange(k_users) % n_pilots])


def _antennas(p, length, per):
    if length % per:
        raise DimensionError(f"vector length {length} is not a multiple of {per}")
    return length // per


def forward(p, h):
    """``A h`` for the collective channel ``h`` (length ``M K``)."""
    h = np.asarray(h)
    m = _antennas(p, h.shape[0], p.k_users)
    return (p.pilots @ h.reshape(p.k_users, m)).reshape(-1)


def adjoint(p, v):
    """``A^H v`` for a measurement-space vector ``v`` (length ``M N``)."""
    v = np.asarray(v)
    m = _antennas(p, v.shape[0], p.n_pilots)
    return (p.pilots.conj().T @ v.reshape(p.n_pilots, m)).reshape(-1)


def step_length(p):
    """Largest eigenvalue of ``A^H A``, equal to that of the K x K pilot Gram."""
    return float(np.linalg.eigvalsh(p.gram())[-1])


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    sigma2: float
    snr_db: float

    def to_dict(self):
        return {
            "y_re": self.y.real.tolist(),
            "y_im": self.y.imag.tolist(),
            "sigma2": self.sigma2,
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
        }

    @classmethod
    def from_dict(cls, doc):
        y = np.asarray(doc["y_re"]) + 1j * np.asarray(doc["y_im"])
        snr = doc["snr_db"]
        return cls(y, float(doc["sigma2"]), math.inf if snr is None else float(snr))


def add_noise(y_clean, snr_db, rng_seed):
    """Add CN(0, sigma2) noise with ``sigma2 = mean|y|^2 / 10^(snr/10)``.

    ``snr_db = inf`` returns the clean vector with ``sigma2 = 0``.
    """
    y_clean = np.asarray(y_clean, dtype=complex)
    if math.isinf(snr_db) and snr_db > 0:
        return Measurement(y_clean.copy(), 0.0, math.inf)
    power = float(np.mean(np.abs(y_clean) ** 2))
    if power == 0.0:
        raise DegenerateInputError("signal power is zero; SNR is undefined")
    sigma2 = power / 10.0 ** (snr_db / 10.0)
    rng = np.random.default_rng(rng_seed)
    noise = rng.standard_normal(y_clean.shape) + 1j * rng.standard_normal(y_clean.shape)
    return Measurement(y_clean + noise * math.sqrt(sigma2 / 2.0), sigma2, float(snr_db))
