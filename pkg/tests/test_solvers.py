import io
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrsbe.beamspace import GeneratorParams, synthesize_channel
from lrsbe.errors import DimensionError, EmptyModelError, NumericalError, ParameterError
from lrsbe.evaluation import nmse
from lrsbe.measurement import Measurement, PilotSet, add_noise, forward, make_pilots, step_length
from lrsbe.solvers import (
    LrsbeOptions,
    SolverState,
    bsbe_estimate,
    lowrank_step,
    lrsbe_estimate,
    m_step,
    make_options,
    run_estimator,
    sbl_e_step,
    soft_threshold,
    svt,
    svt_step,
    update_block_params,
)
from lrsbe.solvers.lrsbe import CLAMP_HI, CLAMP_LO, posterior_weights

from conftest import crandn, dense_e_step, dense_operator, random_hpd, svt_oracle

IDENTITY = PilotSet(np.ones((1, 1), dtype=complex))


def _state(gamma, c):
    return SimpleNamespace(gamma=np.asarray(gamma, float), corr_c=np.asarray(c, complex))


# --- E-step --------------------------------------------------------------------


def test_e_step_identity_cases(rng):
    r = crandn(rng, 4)
    mu, sig = sbl_e_step(IDENTITY, r, _state([1, 1], np.eye(2)), 1.0)
    np.testing.assert_allclose(mu, r / 2, atol=1e-14)
    np.testing.assert_allclose(sig, np.broadcast_to(np.eye(2) / 2, (2, 2, 2)), atol=1e-14)
    mu, sig = sbl_e_step(IDENTITY, r, _state([1, 1], np.eye(2)), 1e-12)
    np.testing.assert_allclose(mu, r, atol=1e-10)
    assert np.max(np.abs(sig)) < 1e-10


E_STEP_CASES = [
    # (M, K, N, L): first three hit the per-position path, the rest the general one
    (4, 2, 2, 2),
    (8, 4, 2, 4),
    (4, 3, 1, 4),
    (6, 2, 2, 4),
    (3, 4, 2, 4),
    (5, 2, 1, 2),
]


@pytest.mark.parametrize("m,k,n,block", E_STEP_CASES)
def test_e_step_matches_dense_oracle(m, k, n, block, rng):
    for _ in range(4):
        p = make_pilots(n, k)
        g = m * k // block
        gamma = rng.uniform(0.1, 2.0, g)
        gamma[rng.integers(g)] = 0.0  # a pruned block
        c = random_hpd(rng, block)
        r = crandn(rng, m * n)
        sigma2 = rng.uniform(0.05, 1.0)
        mu, sig = sbl_e_step(p, r, _state(gamma, c), sigma2)
        mu_o, sig_o = dense_e_step(dense_operator(p.pilots, m), r, gamma, c, sigma2)
        assert np.max(np.abs(mu - mu_o)) < 1e-10
        assert np.max(np.abs(sig - sig_o)) < 1e-10


def test_e_step_random_pilot_matrix(rng):
    # non-orthogonal pilots exercise cross-user coupling in the system matrix
    x = crandn(rng, 2, 3)
    p = PilotSet(x)
    gamma, c = rng.uniform(0.2, 1.0, 6), random_hpd(rng, 2)
    r = crandn(rng, 8)
    mu, sig = sbl_e_step(p, r, _state(gamma, c), 0.3)
    mu_o, sig_o = dense_e_step(dense_operator(x, 4), r, gamma, c, 0.3)
    np.testing.assert_allclose(mu, mu_o, atol=1e-10)
    np.testing.assert_allclose(sig, sig_o, atol=1e-10)


def test_e_step_singular_system():
    with pytest.raises(NumericalError):
        sbl_e_step(IDENTITY, np.ones(2, complex), _state([0.0], np.eye(2)), 0.0)


def test_e_step_dimension_checks():
    with pytest.raises(DimensionError):
        sbl_e_step(make_pilots(2, 2), np.ones(5, complex), _state([1.0], np.eye(1)), 1.0)
    with pytest.raises(DimensionError):
        sbl_e_step(make_pilots(2, 2), np.ones(4, complex), _state([1.0] * 3, np.eye(1)), 1.0)


# --- block parameters ------------------------------------------------------------


def test_block_params_fixed_point():
    c, gamma = update_block_params(np.zeros(3), np.eye(3)[None], [1.0], alpha=0.0, c_reg=0.0)
    np.testing.assert_allclose(c, np.eye(3), atol=1e-15)
    assert gamma[0] == pytest.approx(1.0)
    _, gamma = update_block_params(np.zeros(3), np.eye(3)[None], [1.0], alpha=1.0, c_reg=0.0)
    assert gamma[0] == pytest.approx(0.5)


def test_block_params_zero_statistics_kill_blocks():
    sig = np.zeros((2, 2, 2))
    sig[0] = np.eye(2)
    _, gamma = update_block_params(np.zeros(4), sig, [1.0, 1.0], alpha=0.0)
    assert gamma[1] == 0.0 and gamma[0] > 0


def test_block_params_all_pruned():
    with pytest.raises(EmptyModelError):
        update_block_params(np.zeros(2), np.zeros((1, 2, 2)), [0.0], alpha=1.0)


def test_block_params_oracle(rng):
    block, g = 3, 5
    mu = crandn(rng, g * block)
    sig = np.stack([random_hpd(rng, block) for _ in range(g)])
    gamma = rng.uniform(0.5, 2.0, g)
    gamma[2] = 0.0
    alpha = 0.7
    c, new = update_block_params(mu, sig, gamma, alpha, c_reg=1e-6)

    active = [i for i in range(g) if gamma[i] > 0]
    stats = [sig[i] + np.outer(mu[i * block:(i + 1) * block], mu[i * block:(i + 1) * block].conj())
             for i in range(g)]
    c_o = sum(stats[i] / gamma[i] for i in active) / len(active)
    c_o = (c_o + c_o.conj().T) / 2 + 1e-6 * np.eye(block)
    c_o *= block / np.trace(c_o).real
    np.testing.assert_allclose(c, c_o, atol=1e-12)
    assert np.allclose(c, c.conj().T, atol=1e-10)
    for i in range(g):
        want = np.trace(np.linalg.solve(c_o, stats[i])).real / block / (1 + alpha) if i in active else 0
        assert new[i] == pytest.approx(want, abs=1e-12)


# --- proximal operators ------------------------------------------------------------


def test_soft_threshold_examples():
    assert soft_threshold(np.array([3.0 + 0j]), 1.0)[0] == pytest.approx(2.0)
    assert soft_threshold(np.array([0.5 * np.exp(0.3j)]), 1.0)[0] == 0
    assert soft_threshold(np.zeros(2, complex), 1.0).tolist() == [0, 0]


def test_soft_threshold_oracle(rng):
    for _ in range(100):
        x = crandn(rng, 20) * rng.uniform(0.1, 3)
        tau = rng.uniform(0, 2)
        out = soft_threshold(x, tau)
        mag = np.abs(x)
        want = np.where(mag > tau, (mag - tau) * np.exp(1j * np.angle(x)), 0)
        assert np.max(np.abs(out - want)) < 1e-10
        assert np.all(np.abs(out) <= mag + 1e-15)
        big = mag >= tau
        np.testing.assert_allclose(np.abs(out[big]), mag[big] - tau, atol=1e-12)


def _collective(h, dims):
    m_h, m_v, k = dims
    return np.concatenate(list(h.reshape(k, m_h, m_v)), axis=1)


def test_svt_rank_one_exact():
    dims = (4, 3, 2)
    u = np.linalg.qr(crandn(np.random.default_rng(1), 4, 1))[0][:, 0]
    v = np.linalg.qr(crandn(np.random.default_rng(2), 6, 1))[0][:, 0]
    mat = 5.0 * np.outer(u, v.conj())
    h = np.concatenate([mat[:, :3].reshape(-1), mat[:, 3:].reshape(-1)])
    out, s_in = svt(h, 4.0, dims)
    s = np.linalg.svd(_collective(out, dims), compute_uv=False)
    assert s[0] == pytest.approx(4.0, abs=1e-12)
    assert s_in[0] == pytest.approx(4.0, abs=1e-12)
    np.testing.assert_allclose(_collective(out, dims), 0.8 * mat, atol=1e-12)


def test_svt_oracle(rng):
    dims = (4, 3, 2)
    assert not svt_step(np.zeros(24, complex), 1.0, dims).any()
    for _ in range(100):
        h = crandn(rng, 24)
        beta = rng.uniform(0, 9)
        out = svt_step(h, beta, dims)
        want = svt_oracle(_collective(h, dims), math.sqrt(beta) / 2)
        assert np.max(np.abs(_collective(out, dims) - want)) < 1e-10
        s_in = np.linalg.svd(_collective(h, dims), compute_uv=False)
        s_out = np.linalg.svd(_collective(out, dims), compute_uv=False)
        assert np.all(s_out <= s_in + 1e-12)


def test_svt_per_user(rng):
    dims = (3, 3, 2)
    h = crandn(rng, 18)
    out = svt_step(h, 1.0, dims, mode="per_user")
    for k in range(2):
        want = svt_oracle(h[9 * k:9 * (k + 1)].reshape(3, 3), 0.5)
        np.testing.assert_allclose(out[9 * k:9 * (k + 1)].reshape(3, 3), want, atol=1e-12)
    with pytest.raises(DimensionError):
        svt_step(h[:-1], 1.0, dims)


def test_lowrank_step_identity_recovers_data(rng):
    r = crandn(rng, 6)
    out = lowrank_step(IDENTITY, r, np.zeros(6, complex), 0.0, 1.0)
    np.testing.assert_allclose(out, r, atol=1e-15)
    with pytest.raises(ParameterError):
        lowrank_step(IDENTITY, r, r, 1.0, 0.0)


def test_lowrank_gradient_descent_monotone(rng):
    p = make_pilots(2, 4)
    t = step_length(p)
    r = crandn(rng, 5 * 2)
    h = np.zeros(20, complex)
    prev = np.inf
    for _ in range(30):
        h = lowrank_step(p, r, h, 0.0, t)
        res = np.linalg.norm(r - forward(p, h))
        assert res <= prev + 1e-12
        prev = res


# --- M-step ------------------------------------------------------------------------


def _mstate(h_s, h_l, mu, sig, alpha=1.0):
    return SimpleNamespace(h_s=h_s, h_l=h_l, mu=mu, sigma_blocks=sig, alpha=alpha)


def test_m_step_clamps_and_definition():
    p = IDENTITY
    mk = 4
    h_s = np.array([1, 2, 1, 3], complex)
    mu = h_s.copy()
    sig = np.stack([np.diag([1.0, 4.0]), np.diag([0.5, 9.0])])  # every theta is 1
    # h^L = 0, perfect fit, live entries fully trusted: both at the upper clamp
    a, b = m_step(h_s, p, _mstate(h_s, np.zeros(4, complex), mu, sig))
    assert (a, b) == (CLAMP_HI, CLAMP_HI)
    # ||h^L||^2 = MK gives beta = 1
    h_l = np.ones(4, complex)
    _, b = m_step(h_s + h_l, p, _mstate(h_s, h_l, mu, sig))
    assert b == pytest.approx(1.0)


def test_m_step_alpha_oracle(rng):
    p = make_pilots(2, 2)
    h_s, h_l = crandn(rng, 8), crandn(rng, 8)
    y = crandn(rng, 8)
    mu = crandn(rng, 8)
    sig = np.stack([random_hpd(rng, 2) for _ in range(4)])
    state = _mstate(h_s, h_l, mu, sig, alpha=0.4)
    a, b = m_step(y, p, state, trace_sigma_l=0.25)
    diag = np.real(np.concatenate([np.diag(s) for s in sig]))
    theta = np.clip(np.abs(mu) ** 2 / diag, 0, 1)
    resid = y - dense_operator(p.pilots, 4) @ (h_s + h_l)
    assert a == pytest.approx(8 / (np.linalg.norm(resid) ** 2 + np.sum(1 - theta) / 0.4), rel=1e-12)
    assert b == pytest.approx(8 / (np.linalg.norm(h_l) ** 2 + 0.25), rel=1e-12)
    assert CLAMP_LO <= a <= CLAMP_HI


def test_posterior_weights_clamped_and_pruned():
    mu = np.array([2.0, 0.0, 1.0, 0.0], complex)
    sig = np.zeros((2, 2, 2))
    sig[0] = np.diag([1.0, 1.0])  # theta 4 -> clamped to 1
    np.testing.assert_allclose(posterior_weights(mu, sig), [1, 0, 1, 0])


def test_m_step_non_finite_raises():
    h = np.array([np.nan, 0], complex)
    with pytest.raises(NumericalError):
        m_step(np.zeros(2, complex), IDENTITY, _mstate(h, np.zeros(2), np.zeros(2), np.zeros((1, 2, 2))))


# --- drivers -------------------------------------------------------------------------


def _problem(dims, n, snr, seed=0, **gen):
    ch = synthesize_channel(GeneratorParams(**gen), dims, seed)
    p = make_pilots(n, dims[2])
    return ch, p, add_noise(forward(p, ch.collective), snr, seed + 1)


def test_options_validation():
    dims = (8, 8, 4)
    for bad in (dict(q_max=0), dict(tol=0), dict(alpha0=0), dict(block_len=7),
                dict(trace_sigma_l_mode="x"), dict(svt_mode="x")):
        with pytest.raises(ParameterError):
            LrsbeOptions(**bad).validate(dims)
    assert LrsbeOptions().resolve_block_len(dims) == 8
    with pytest.raises(ParameterError):
        make_options("lrsbe", {"qmax": 3})
    with pytest.raises(ParameterError):
        make_options("nope")


def test_lrsbe_zero_input():
    dims = (4, 4, 2)
    p = make_pilots(2, 2)
    res = lrsbe_estimate(Measurement(np.zeros(32, complex), 0.0, math.inf), p, dims)
    assert not res.h_hat.any()
    assert res.converged and res.iterations <= 2
    res = bsbe_estimate(Measurement(np.zeros(32, complex), 0.0, math.inf), p, dims)
    assert not res.h_hat.any()


@pytest.mark.parametrize("power_split", [0.0, 0.5])
def test_lrsbe_noiseless_invertible(power_split):
    dims = (8, 8, 4)
    ch, p, meas = _problem(dims, 4, math.inf, power_split=power_split)
    res = lrsbe_estimate(meas, p, dims)
    assert nmse(ch.collective, res.h_hat, 4).db <= -40
    # least-squares oracle on the square, unitary system
    ls = np.linalg.solve(dense_operator(p.pilots, 64), meas.y)
    assert np.max(np.abs(res.h_hat - ls)) < 1e-3 * np.max(np.abs(ls))


def test_result_invariants_and_trace(rng):
    dims = (8, 8, 8)
    ch, p, meas = _problem(dims, 4, 10.0, seed=3)
    seen = []
    opts = LrsbeOptions(q_max=7)
    res = lrsbe_estimate(meas, p, dims, opts, callback=lambda i, h: seen.append(i))
    np.testing.assert_array_equal(res.h_hat, res.h_s_hat + res.h_l_hat)
    assert res.iterations <= 7 and len(res.trace) == res.iterations == len(seen)
    assert seen == list(range(1, res.iterations + 1))
    for rec in res.trace:
        assert CLAMP_LO <= rec.alpha <= CLAMP_HI and CLAMP_LO <= rec.beta <= CLAMP_HI
    buf = io.StringIO()
    res.write_trace_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("iter,rel_change,residual_norm,alpha,beta,nnz_blocks,rank_hl")
    assert len(lines) == res.iterations + 1


def test_stopping_rule_fires_immediately():
    dims = (8, 8, 8)
    _, p, meas = _problem(dims, 4, 5.0, seed=4)
    res = lrsbe_estimate(meas, p, dims, LrsbeOptions(tol=1e-2))
    rels = [r.rel_change for r in res.trace]
    assert all(r > 1e-2 for r in rels[:-1])
    assert res.converged == (rels[-1] <= 1e-2)


def test_bsbe_equals_lrsbe_with_dead_lowrank_branch():
    dims = (8, 8, 4)
    _, p, meas = _problem(dims, 2, 10.0, seed=5)
    a = bsbe_estimate(meas, p, dims)
    b = lrsbe_estimate(meas, p, dims, LrsbeOptions(beta0=CLAMP_HI))
    assert not b.h_l_hat.any()
    np.testing.assert_array_equal(a.h_hat, b.h_hat)


def test_bsbe_close_to_lrsbe_on_pure_sparse_truth():
    dims = (8, 8, 4)
    gaps = []
    for seed in range(5):
        ch, p, meas = _problem(dims, 4, 25.0, seed=seed, power_split=0.0)
        a = nmse(ch.collective, bsbe_estimate(meas, p, dims).h_hat, 4).linear
        b = nmse(ch.collective, lrsbe_estimate(meas, p, dims).h_hat, 4).linear
        gaps.append(10 * math.log10(a) - 10 * math.log10(b))
    assert abs(np.mean(gaps)) <= 1.0


def test_deterministic_repeat():
    dims = (8, 8, 8)
    _, p, meas = _problem(dims, 4, 0.0, seed=6)
    for name in ("omp", "ista", "sbe", "bsbe", "lrsbe"):
        a = run_estimator(name, meas, p, dims)
        b = run_estimator(name, meas, p, dims)
        np.testing.assert_array_equal(a.h_hat, b.h_hat)
        assert a.iterations == b.iterations


def test_state_initial_shapes():
    s = SolverState.initial(32, 4)
    assert s.gamma.shape == (8,) and s.sigma_blocks.shape == (8, 4, 4)
    assert s.alpha == s.beta == 1.0


@given(st.integers(0, 2**31 - 1), st.sampled_from([-10.0, 0.0, 10.0, 30.0]))
@settings(max_examples=15, deadline=None)
def test_hyperparameters_stay_in_clamps(seed, snr):
    dims = (4, 4, 4)
    _, p, meas = _problem(dims, 2, snr, seed=seed, rank_r=2, block_len_gen=4)
    res = lrsbe_estimate(meas, p, dims, LrsbeOptions(q_max=10))
    for rec in res.trace:
        assert math.isfinite(rec.alpha) and CLAMP_LO <= rec.alpha <= CLAMP_HI
        assert math.isfinite(rec.beta) and CLAMP_LO <= rec.beta <= CLAMP_HI
