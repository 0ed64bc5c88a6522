import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffattn.errors import ConfigError, StepIndexError
from diffattn.schedule import (
    ddim_step, ddpm_step, make_schedule, plan_steps, predict_x0, q_sample, time_embedding,
)

# prod_{t=0}^{299} (1 - beta_t), beta linear 1e-4 -> 0.02, evaluated with mpmath at 50 digits
ALPHA_BAR_299 = 0.048058428944293969314163112157
ALPHA_BAR_150 = 0.46234523761946761644708118914


def oracle_alpha_bar(T, b0, b1):
    out, prod = [], 1.0
    for t in range(T):
        beta = b0 + (b1 - b0) * t / (T - 1) if T > 1 else b0
        prod *= 1.0 - beta
        out.append(prod)
    return np.array(out)


@pytest.fixture(scope="module")
def sched():
    return make_schedule(300, 1e-4, 0.02)


def test_golden_alpha_bar(sched):
    assert sched.alpha_bar[299] == pytest.approx(ALPHA_BAR_299, rel=1e-13)
    assert sched.alpha_bar[150] == pytest.approx(ALPHA_BAR_150, rel=1e-13)


def test_schedule_arrays(sched):
    assert len(sched.beta) == len(sched.alpha) == len(sched.alpha_bar) == 300
    assert np.all(sched.alpha == 1.0 - sched.beta)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert 0 < sched.alpha_bar.min() and sched.alpha_bar.max() <= 1
    np.testing.assert_allclose(sched.alpha_bar, oracle_alpha_bar(300, 1e-4, 0.02), rtol=1e-12)


def test_zero_noise_limit():
    s = make_schedule(3, 1e-15, 1e-15)
    np.testing.assert_allclose(s.alpha_bar, [1, 1, 1], atol=1e-14)


def test_schedule_is_read_only(sched):
    with pytest.raises(ValueError):
        sched.beta[0] = 0.5


@pytest.mark.parametrize("args, word", [((0, 1e-4, 0.02), "T_i"), ((10, 0.0, 0.02), "beta_start"),
                                        ((10, 0.03, 0.02), "beta_end"), ((10, 1e-4, 1.0), "beta_end")])
def test_schedule_errors(args, word):
    with pytest.raises(ConfigError, match=word):
        make_schedule(*args)


def test_q_sample_degenerate_inputs(sched):
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(4, 4))
    eps = rng.normal(size=(4, 4))
    ab = sched.alpha_bar[40]
    assert np.array_equal(q_sample(x0, 40, np.zeros_like(x0), sched), math.sqrt(ab) * x0)
    assert np.array_equal(q_sample(np.zeros_like(x0), 40, eps, sched), math.sqrt(1 - ab) * eps)


def test_q_sample_monte_carlo(sched):
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-1, 1, size=(8, 8))
    eps = rng.standard_normal(size=(10_000, 8, 8))
    draws = q_sample(np.broadcast_to(x0, eps.shape), 150, eps, sched)
    ab = sched.alpha_bar[150]
    se = math.sqrt((1 - ab) / 10_000)
    assert np.all(np.abs(draws.mean(0) - math.sqrt(ab) * x0) < 4 * se)
    assert np.all(np.abs(draws.var(0) / (1 - ab) - 1) < 0.05)


def test_q_sample_errors(sched):
    x = np.zeros((2, 2))
    with pytest.raises(StepIndexError):
        q_sample(x, 300, x, sched)
    with pytest.raises(StepIndexError):
        q_sample(x, -1, x, sched)


def test_ddpm_zero_eps(sched):
    x = np.random.default_rng(2).normal(size=(3, 3))
    z = np.zeros_like(x)
    np.testing.assert_array_equal(ddpm_step(x, z, 10, sched, z), x / math.sqrt(sched.alpha[10]))


def test_ddpm_formula_oracle(sched):
    rng = np.random.default_rng(3)
    x, eh, nz = rng.normal(size=(3, 4, 4))
    tau = 77
    beta = 1e-4 + (0.02 - 1e-4) * tau / 299
    ab = oracle_alpha_bar(300, 1e-4, 0.02)
    var = beta * (1 - ab[tau - 1]) / (1 - ab[tau])
    expected = (x - beta / math.sqrt(1 - ab[tau]) * eh) / math.sqrt(1 - beta) + math.sqrt(var) * nz
    np.testing.assert_allclose(ddpm_step(x, eh, tau, sched, nz), expected, rtol=0, atol=1e-12)


def test_ddpm_zero_noise_limit_recovers_x0():
    s = make_schedule(3, 1e-12, 1e-12)
    rng = np.random.default_rng(4)
    x0, eps = rng.normal(size=(2, 4, 4))
    x1 = q_sample(x0, 1, eps, s)
    np.testing.assert_allclose(ddpm_step(x1, eps, 1, s, np.zeros_like(x0)), x0, atol=1e-5)


def test_ddpm_final_step_error(sched):
    x = np.zeros((2, 2))
    with pytest.raises(StepIndexError, match="final"):
        ddpm_step(x, x, 0, sched, x)


def test_ddim_oracle_identity(sched):
    rng = np.random.default_rng(5)
    x0, eps = rng.normal(size=(2, 4, 4))
    x = q_sample(x0, 200, eps, sched)
    np.testing.assert_allclose(ddim_step(x, eps, 200, 120, sched), q_sample(x0, 120, eps, sched), atol=1e-12)


def test_ddim_zero_eps(sched):
    x0 = np.random.default_rng(6).normal(size=(4, 4))
    x = math.sqrt(sched.alpha_bar[100]) * x0
    np.testing.assert_allclose(ddim_step(x, np.zeros_like(x), 100, 30, sched),
                               math.sqrt(sched.alpha_bar[30]) * x0, atol=1e-14)


def test_ddim_chain_inversion(sched):
    rng = np.random.default_rng(7)
    x0, eps = rng.normal(size=(2, 8, 8))
    steps = plan_steps(300, 15).steps
    x = q_sample(x0, steps[0], eps, sched)
    for a, b in zip(steps, steps[1:]):
        x = ddim_step(x, eps, a, b, sched)
    assert np.abs(predict_x0(x, eps, steps[-1], sched) - x0).max() < 1e-5


def test_ddim_ordering_error(sched):
    x = np.zeros((2, 2))
    with pytest.raises(StepIndexError):
        ddim_step(x, x, 10, 10, sched)
    with pytest.raises(StepIndexError):
        ddim_step(x, x, 10, 20, sched)


def test_ddpm_mean_equals_ddim_with_posterior_sigma(sched):
    # ddpm's mean is the eta=1 DDIM update (sigma = posterior std) without noise
    rng = np.random.default_rng(8)
    x0, eps = rng.normal(size=(2, 4, 4))
    z = np.zeros_like(x0)
    for tau in (1, 50, 150, 299):
        x = q_sample(x0, tau, eps, sched)
        np.testing.assert_allclose(ddpm_step(x, eps, tau, sched, z),
                                   ddim_step(x, eps, tau, tau - 1, sched, eta=1.0, noise=z), atol=1e-8)


def test_ddim_eta_requires_noise(sched):
    x = np.zeros((2, 2))
    with pytest.raises(ValueError):
        ddim_step(x, x, 10, 5, sched, eta=0.5)


@settings(max_examples=60, deadline=None)
@given(tau=st.integers(1, 299), data=st.data())
def test_composition_property(sched, tau, data):
    tau_next = data.draw(st.integers(0, tau - 1))
    rng = np.random.default_rng(tau * 1000 + tau_next)
    x0, eps = rng.normal(size=(2, 3, 3))
    got = ddim_step(q_sample(x0, tau, eps, sched), eps, tau, tau_next, sched)
    np.testing.assert_allclose(got, q_sample(x0, tau_next, eps, sched), atol=1e-10)


def test_noise_variance_monotone(sched):
    assert np.all(np.diff(1 - sched.alpha_bar) >= 0)


def test_plan_examples():
    assert plan_steps(300, 300).steps == tuple(range(299, -1, -1))
    assert plan_steps(300, 1).steps == (299,)
    steps = np.array(plan_steps(300, 15).steps)
    gaps = -np.diff(steps)
    assert steps[0] == 299 and steps[-1] == 0 and len(steps) == 15
    assert gaps.max() - gaps.min() <= 1


def test_plan_errors():
    with pytest.raises(ConfigError):
        plan_steps(10, 11)
    with pytest.raises(ConfigError):
        plan_steps(10, 0)


@settings(max_examples=200, deadline=None)
@given(T_i=st.integers(1, 1000), data=st.data())
def test_plan_property(T_i, data):
    T_e = data.draw(st.integers(1, T_i))
    steps = plan_steps(T_i, T_e).steps
    assert len(steps) == T_e == len(set(steps))
    assert steps[0] == T_i - 1
    assert all(a > b for a, b in zip(steps, steps[1:]))
    assert all(0 <= s < T_i for s in steps)
    if T_e > 1:
        assert steps[-1] == 0
        gaps = -np.diff(steps)
        assert gaps.max() - gaps.min() <= 1


def test_time_embedding():
    e0 = time_embedding(0, 16)
    assert np.all(e0[0::2] == 0) and np.all(e0[1::2] == 1)
    e = time_embedding(123, 32)
    assert np.array_equal(e, time_embedding(123, 32))
    assert np.all(np.abs(e) <= 1)
    with pytest.raises(ConfigError):
        time_embedding(3, 7)
