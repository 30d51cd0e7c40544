"""Dense reference implementations used as test oracles.

Everything here builds the full Kronecker operator and full covariance
matrices explicitly, so it only scales to tiny instances.
"""
import numpy as np
import pytest
from scipy.linalg import block_diag


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def dense_operator(pilots, m):
    return np.kron(pilots, np.eye(m))


def dense_e_step(a, r, gamma, c, sigma2):
    """Posterior of h ~ CN(0, blockdiag(gamma_g C)) from r = A h + CN(0, sigma2 I)."""
    big_gamma = block_diag(*[g * c for g in gamma])
    sy = a @ big_gamma @ a.conj().T + sigma2 * np.eye(a.shape[0])
    gain = big_gamma @ a.conj().T @ np.linalg.inv(sy)
    mu = gain @ r
    sigma = big_gamma - gain @ a @ big_gamma
    block = c.shape[0]
    blocks = np.stack([sigma[i:i + block, i:i + block] for i in range(0, sigma.shape[0], block)])
    return mu, blocks


def svt_oracle(mat, thr):
    u, s, vh = np.linalg.svd(mat)
    shrunk = np.zeros(mat.shape)
    k = min(mat.shape)
    shrunk[:k, :k] = np.diag(np.maximum(s - thr, 0))
    return u @ shrunk @ vh


def random_hpd(rng, n):
    b = crandn(rng, n, n)
    return b @ b.conj().T / n + 0.5 * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(20241019)


ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    """Record one acceptance line; printed in the terminal summary."""
    ACCEPTANCE_LINES.append(f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
