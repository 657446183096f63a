import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from diffsampler import (BrownianReference, GaussianOptimalPolicy, VPSchedule, ZeroPolicy,
                         analytic_optimal_drift_gaussian, simulate_controlled, vp_transition)
from diffsampler.errors import InputError, SimulationError
from diffsampler.sde import (analytic_optimal_control_gaussian, div_f, drift_f, prior_radius,
                             schedule_coeffs, simulate_inference, truncated_normal)

S = VPSchedule(dim=2)


def test_schedule_coefficients():
    beta, alpha, sigma = schedule_coeffs(S, 0.0)
    assert float(beta) == pytest.approx(0.05, abs=1e-15)
    assert float(alpha) == 0.0
    assert float(sigma) == pytest.approx(math.sqrt(0.1), abs=1e-15)
    assert float(schedule_coeffs(S, 1.0)[1]) == pytest.approx(2.525, abs=1e-14)


def test_alpha_is_antiderivative_of_beta():
    t = np.linspace(0, 1, 11)
    h = 1e-6
    d_alpha = (np.asarray(S.alpha(t + h)) - np.asarray(S.alpha(t - h))) / (2 * h)
    np.testing.assert_allclose(d_alpha, np.asarray(S.beta(t)), rtol=1e-8)
    assert np.all(np.diff(np.asarray(S.alpha(t))) > 0)


def test_out_of_range_time_rejected():
    with pytest.raises(InputError):
        schedule_coeffs(S, 1.5)
    with pytest.raises(InputError):
        vp_transition(S, 0.0, -0.1)


def test_drift_and_divergence():
    assert float(div_f(S, 0.0)) == pytest.approx(-0.1, abs=1e-15)
    np.testing.assert_array_equal(np.asarray(drift_f(S, np.zeros(2), 0.3)), 0.0)
    np.testing.assert_allclose(np.asarray(drift_f(S, np.array([1.0, 0.0]), 1.0)), [-5.0, 0.0], atol=1e-14)


def test_vp_transition():
    y0 = np.array([1.0, -2.0])
    m, v = vp_transition(S, y0, 0.0)
    np.testing.assert_array_equal(np.asarray(m), y0)
    assert float(v) == 0.0
    m, v = vp_transition(S, y0, 1.0)
    np.testing.assert_allclose(np.asarray(m), math.exp(-2.525) * y0, rtol=1e-14)
    assert math.exp(-2.525) == pytest.approx(0.0800, abs=1e-4)
    assert float(v) == pytest.approx(0.99359, abs=1e-5)
    np.testing.assert_array_equal(np.asarray(vp_transition(S, np.zeros(2), 0.4)[0]), 0.0)


@given(t_rev=st.floats(0, 1), x=st.lists(st.floats(-5, 5), min_size=2, max_size=2))
@settings(max_examples=40, deadline=None)
def test_analytic_drift_standard_normal(t_rev, x):
    x = np.array(x)
    sig = float(S.sigma(1.0 - t_rev))
    d = np.asarray(analytic_optimal_drift_gaussian(S, np.zeros(2), 1.0, x, t_rev))
    np.testing.assert_allclose(d, -0.5 * sig**2 * x, rtol=1e-12, atol=1e-12)


def test_analytic_drift_special_points():
    m = np.array([1.0, -0.5])
    t_rev = 0.3
    a = float(S.alpha(1.0 - t_rev))
    sig2 = float(S.sigma(1.0 - t_rev)) ** 2
    x = math.exp(-a) * m
    np.testing.assert_allclose(np.asarray(analytic_optimal_drift_gaussian(S, m, 1.0, x, t_rev)), 0.5 * sig2 * x,
                               rtol=1e-12)
    x = np.array([0.3, 0.7])
    nu = 2.0
    sig2 = float(S.sigma(0.0)) ** 2
    expected = sig2 * (m - x) / nu**2 + 0.5 * sig2 * x
    np.testing.assert_allclose(np.asarray(analytic_optimal_drift_gaussian(S, m, nu, x, 1.0)), expected, rtol=1e-12)


def test_gaussian_policy_matches_analytic_control():
    pol = GaussianOptimalPolicy(S, (1.0, 2.0), 1.7)
    x = np.array([[0.2, -0.4]])
    for t_rev in (0.0, 0.25, 1.0):
        np.testing.assert_allclose(np.asarray(pol(x, 1.0 - t_rev)),
                                   np.asarray(analytic_optimal_control_gaussian(S, (1.0, 2.0), 1.7, x, t_rev)),
                                   rtol=1e-13)


def test_single_step_example():
    s = VPSchedule(dim=1)
    b = simulate_controlled(s, ZeroPolicy(), 1, 1, x0=[[1.0]], noise=np.zeros((1, 1, 1)))
    assert float(b.states[0, 1, 0]) == pytest.approx(6.0, abs=1e-14)
    assert float(b.running_cost[0]) == pytest.approx(-5.0, abs=1e-14)


def test_zero_policy_costs():
    b = simulate_controlled(S, ZeroPolicy(), 64, 100, seed=2)
    np.testing.assert_array_equal(np.asarray(b.stoch_int), 0.0)
    dt = 0.01
    expected = -2 * dt * sum(float(S.beta(1.0 - n * dt)) for n in range(100))
    np.testing.assert_allclose(np.asarray(b.running_cost), expected, rtol=1e-12)
    # Left sums of the linear beta exceed the integral -2 alpha(T) by exactly d dt (beta(T) - beta(0)) / 2.
    assert expected + 5.05 == pytest.approx(-2 * dt * (5.0 - 0.05) / 2, abs=1e-12)


def test_em_recurrence_and_replay():
    pol = GaussianOptimalPolicy(S, (0.5, 0.0), 1.3)
    b = simulate_controlled(S, pol, 8, 20, seed=4)
    x = np.asarray(b.states)
    dB = np.asarray(b.noise)
    dt = 1.0 / 20
    for n in range(20):
        t = 1.0 - n * dt
        drift = float(S.sigma(t)) * np.asarray(pol(x[:, n], t)) + float(S.beta(t)) * x[:, n]
        np.testing.assert_allclose(x[:, n + 1], x[:, n] + drift * dt + float(S.sigma(t)) * dB[:, n], rtol=1e-12,
                                   atol=1e-12)
    replay = simulate_controlled(S, pol, 8, 20, x0=b.x0, noise=b.noise)
    np.testing.assert_array_equal(np.asarray(replay.states), x)
    np.testing.assert_array_equal(np.asarray(replay.running_cost), np.asarray(b.running_cost))


def test_noise_statistics():
    b = simulate_controlled(S, ZeroPolicy(), 2000, 10, seed=0)
    dB = np.asarray(b.noise).ravel()
    assert abs(dB.var() / 0.1 - 1) < 0.03
    assert abs(dB.mean()) < 4 * math.sqrt(0.1 / dB.size)


def test_results_independent_of_batch_partition():
    pol = GaussianOptimalPolicy(S, 0.0, 1.0)
    key = jax.random.PRNGKey(11)
    full = simulate_controlled(S, pol, 10, 15, key=key)
    head = simulate_controlled(S, pol, 4, 15, key=key)
    np.testing.assert_array_equal(np.asarray(full.states[:4]), np.asarray(head.states))


def test_truncated_prior():
    keys = jax.random.split(jax.random.PRNGKey(0), 20000)
    x = np.asarray(truncated_normal(keys, 3))
    r = prior_radius(3)
    assert r == pytest.approx(math.sqrt(chi2.ppf(0.9999, 3)))
    assert np.all(np.sum(x**2, 1) <= r**2)
    np.testing.assert_allclose(x.std(0), 1.0, atol=0.03)


def test_brownian_reference():
    s = BrownianReference(dim=2)
    assert s.sigma_const**2 * s.T == pytest.approx(1.0)
    b = simulate_controlled(s, ZeroPolicy(), 4000, 50, seed=1)
    np.testing.assert_array_equal(np.asarray(b.x0), 0.0)
    np.testing.assert_array_equal(np.asarray(b.running_cost), 0.0)
    xT = np.asarray(b.x_final)
    np.testing.assert_allclose(xT.var(0), 1.0, atol=0.08)


def test_exploding_control_reports_step():
    class Blowup:
        def __call__(self, x, t):
            return 1e300 * (x + 1.0)

    jax.tree_util.register_pytree_node(Blowup, lambda p: ((), None), lambda aux, ch: Blowup())
    with pytest.raises(SimulationError) as err:
        simulate_controlled(S, Blowup(), 4, 10, seed=0)
    assert err.value.step is not None and 0 <= err.value.step < 10


def test_ou_transition_moments():
    s = VPSchedule(dim=1)
    M = 20000
    y0 = 1.5
    yT = np.asarray(simulate_inference(s, jnp.full((M, 1), y0), 800, jax.random.PRNGKey(3)))[:, 0]
    mean, var = (float(v) for v in vp_transition(s, y0, 1.0))
    se_mean = math.sqrt(var / M)
    se_var = var * math.sqrt(2 / (M - 1))
    assert abs(yT.mean() - mean) <= 4 * se_mean + 2e-2 * abs(mean)
    assert abs(yT.var(ddof=1) - var) <= 4 * se_var + 2e-2 * var


def test_prior_convergence_from_target_samples():
    # Double-well samples (delta=3) by exact rejection; the GMM's per-coordinate variance of
    # 16.97 would put even the exact terminal variance at 1.102.
    rng = np.random.default_rng(0)
    x = rng.uniform(-4, 4, size=(400000, 2))
    keep = rng.uniform(size=x.shape[0]) < np.exp(-(x[:, 0] ** 2 - 3) ** 2)
    y0 = x[keep][:20000]
    y0[:, 1] = rng.normal(size=len(y0))
    s = VPSchedule(dim=2)
    yT = np.asarray(simulate_inference(s, jnp.asarray(y0), 400, jax.random.PRNGKey(1)))
    assert np.all(np.abs(yT.mean(0)) <= 0.05)
    assert np.all((yT.var(0) >= 0.9) & (yT.var(0) <= 1.1))


def test_time_reversal_with_analytic_drift():
    s = VPSchedule(dim=2)
    m = (1.0, -2.0)
    M = 8000
    b = simulate_controlled(s, GaussianOptimalPolicy(s, m, 1.0), M, 400, seed=5, record=False)
    x = np.asarray(b.x_final)
    se = 1 / math.sqrt(M)
    assert np.all(np.abs(x.mean(0) - m) <= 4 * se + 2e-2)
    assert np.all(np.abs(x.var(0) - 1) <= 4 * math.sqrt(2 / M) + 2e-2)


def test_float32_simulation():
    b = simulate_controlled(S, GaussianOptimalPolicy(S, 0.0, 1.0), 16, 10, seed=0, dtype=jnp.float32)
    assert b.x_final.dtype == jnp.float32
    assert b.running_cost.dtype == jnp.float32
