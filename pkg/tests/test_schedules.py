import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ccad import schedules as sch


def schedule_from_abar(abars, eta=0.0):
    """Build a schedule whose cumulative products are exactly ``abars``."""
    prev = np.r_[1.0, abars[:-1]]
    return sch.NoiseSchedule(len(abars), 1.0 - np.asarray(abars) / prev, eta=eta)


def test_single_step_schedule():
    s = sch.make_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bar, [0.9])


def test_two_step_hand_product():
    s = sch.NoiseSchedule(2, np.array([0.1, 0.2]))
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.9 * 0.8], rtol=0, atol=1e-15)


def test_ddpm_default_schedule_bounds():
    s = sch.make_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bar) < 0)
    # independent route: log-space sum of the linear betas
    betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    log_abar = math.fsum(math.log1p(-b) for b in betas)
    assert math.isclose(math.log(s.alpha_bar[-1]), log_abar, rel_tol=1e-9)
    assert s.alpha_bar[999] < 1e-4


@pytest.mark.parametrize("kwargs, field", [
    (dict(T=0, beta_start=0.1, beta_end=0.2), "T"),
    (dict(T=5, beta_start=0.0, beta_end=0.2), "beta_start"),
    (dict(T=5, beta_start=0.1, beta_end=1.0), "beta_end"),
    (dict(T=5, beta_start=0.3, beta_end=0.2), "beta_start"),
])
def test_invalid_bounds_name_the_field(kwargs, field):
    with pytest.raises(sch.ScheduleError, match=field):
        sch.make_schedule(**kwargs)


@settings(max_examples=100, deadline=None)
@given(T=st.integers(1, 300), lo=st.floats(1e-5, 0.5), span=st.floats(0, 0.49), eta=st.floats(0, 1))
def test_schedule_invariants(T, lo, span, eta):
    s = sch.make_schedule(T, lo, lo + span, eta=eta)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    np.testing.assert_allclose(s.alpha, 1 - s.beta)
    np.testing.assert_allclose(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:], rtol=1e-12)
    np.testing.assert_allclose(s.beta[[0, -1]], [lo, lo + span] if T > 1 else [lo, lo], rtol=1e-12)


def test_external_index_mapping():
    s = sch.NoiseSchedule(3, np.array([0.1, 0.2, 0.3]))
    assert s.abar(0) == 1.0
    assert s.abar(1) == s.alpha_bar[0]
    assert s.abar(3) == s.alpha_bar[2]
    for bad in (4, -1, 1.5):
        with pytest.raises(sch.ScheduleError):
            s.abar(bad)


def test_eta_zero_means_no_noise():
    s = sch.make_schedule(50, 1e-3, 0.05, eta=0.0)
    assert all(s.sigma(t) == 0.0 for t in range(1, 51))


def test_sigma_formula():
    s = schedule_from_abar([0.8, 0.5], eta=0.7)
    expected = 0.7 * math.sqrt((1 - 0.8) / (1 - 0.5)) * math.sqrt(1 - 0.5 / 0.8)
    assert math.isclose(s.sigma(2), expected, rel_tol=1e-12)


def test_forward_diffuse_degenerate_schedule():
    s = sch.NoiseSchedule(1, np.array([1e-300]))
    x0, eps = np.random.default_rng(0).normal(size=(2, 4, 4))
    np.testing.assert_array_equal(sch.forward_diffuse(x0, 1, eps, s), x0)


def test_forward_diffuse_quarter():
    s = schedule_from_abar([0.25])
    out = sch.forward_diffuse(np.zeros((3, 3)), 1, np.ones((3, 3)), s)
    np.testing.assert_allclose(out, math.sqrt(0.75))
    assert abs(out[0, 0] - 0.866025) < 1e-6


def test_forward_diffuse_matches_one_liner():
    s = sch.make_schedule(5, 0.01, 0.2)
    rng = np.random.default_rng(1)
    x0, eps = rng.normal(size=(2, 6, 7))
    for t in range(1, 6):
        ab = np.prod([1 - (0.01 + (0.2 - 0.01) * i / 4) for i in range(t)])
        np.testing.assert_allclose(sch.forward_diffuse(x0, t, eps, s), ab**0.5 * x0 + (1 - ab) ** 0.5 * eps,
                                   rtol=0, atol=1e-12)


def test_forward_diffuse_shape_mismatch():
    s = sch.make_schedule(5, 0.01, 0.2)
    with pytest.raises(ValueError, match="shape"):
        sch.forward_diffuse(np.zeros(3), 1, np.zeros(4), s)


def test_forward_diffuse_accepts_torch():
    s = sch.make_schedule(5, 0.01, 0.2)
    out = sch.forward_diffuse(torch.zeros(2, 2), 3, torch.ones(2, 2), s)
    assert torch.is_tensor(out)


def test_perfect_denoiser_round_trip_t1():
    s = sch.make_schedule(10, 1e-3, 0.1)
    rng = np.random.default_rng(2)
    x0, eps = rng.normal(size=(2, 5, 5))
    x1 = sch.forward_diffuse(x0, 1, eps, s)
    np.testing.assert_allclose(sch.ddim_step(x1, eps, 1, s, rng.normal(size=x0.shape)), x0, atol=1e-6)


def test_zero_prediction_scales_input():
    s = sch.make_schedule(10, 1e-3, 0.1)
    x = np.random.default_rng(3).normal(size=(4, 4))
    for t in (1, 5, 10):
        np.testing.assert_allclose(sch.ddim_step(x, np.zeros_like(x), t, s),
                                   math.sqrt(s.abar(t - 1) / s.abar(t)) * x, rtol=1e-12)


def test_scalar_ddim_step_hand_value():
    s = schedule_from_abar([0.8, 0.5])
    x0_pred = (1.0 - math.sqrt(1 - 0.5) * 0.5) / math.sqrt(0.5)
    expected = math.sqrt(0.8) * x0_pred + math.sqrt(1 - 0.8) * 0.5
    out = sch.ddim_step(np.array(1.0), np.array(0.5), 2, s)
    assert abs(float(out) - expected) < 1e-12


def test_negative_radicand_is_a_schedule_error():
    s = schedule_from_abar([0.8, 0.5], eta=50.0)
    with pytest.raises(sch.ScheduleError, match="radicand"):
        sch.ddim_step(np.ones(2), np.ones(2), 2, s, np.ones(2))


def test_eta_zero_is_deterministic():
    s = sch.make_schedule(20, 1e-3, 0.1)
    rng = np.random.default_rng(4)
    x, e = rng.normal(size=(2, 8))
    a = sch.ddim_step(x, e, 7, s, rng.normal(size=8))
    b = sch.ddim_step(x, e, 7, s, rng.normal(size=8))
    assert np.array_equal(a, b)


def test_stochastic_step_uses_fresh_noise():
    s = sch.make_schedule(20, 1e-3, 0.1, eta=1.0)
    x, e = np.ones(3), np.zeros(3)
    assert not np.array_equal(sch.ddim_step(x, e, 5, s, np.zeros(3)), sch.ddim_step(x, e, 5, s, np.ones(3)))


@pytest.mark.parametrize("t", range(1, 31))
def test_predicted_x0_round_trip_every_t(t):
    s = sch.make_schedule(30, 1e-4, 0.2)
    rng = np.random.default_rng(t)
    x0, eps = rng.normal(size=(2, 4, 4))
    np.testing.assert_allclose(sch.predict_x0(sch.forward_diffuse(x0, t, eps, s), eps, t, s), x0, atol=1e-6)


def test_guidance_disabled_and_zero_residual():
    s = sch.make_schedule(10, 1e-3, 0.1)
    rng = np.random.default_rng(5)
    e, x, xb = rng.normal(size=(3, 6))
    assert np.array_equal(sch.guided_epsilon(e, x, xb, 0.0, 4, s), e)
    assert np.array_equal(sch.guided_epsilon(e, x, x.copy(), 3.0, 4, s), e)


def test_guidance_scalar_value():
    s = schedule_from_abar([0.36])
    e = np.array([0.3, -1.0])
    x = np.zeros(2)
    out = sch.guided_epsilon(e, x, x + 1.0, 2.0, 1, s)
    np.testing.assert_allclose(out, e - 1.6, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(w1=st.floats(0, 10), w2=st.floats(0, 10), t=st.integers(1, 10))
def test_guidance_affine_in_w(w1, w2, t):
    s = sch.make_schedule(10, 1e-3, 0.1)
    rng = np.random.default_rng(6)
    e, x, xb = rng.normal(size=(3, 5))
    lhs = sch.guided_epsilon(e, x, xb, w1, t, s) + sch.guided_epsilon(e, x, xb, w2, t, s) - e
    np.testing.assert_allclose(lhs, sch.guided_epsilon(e, x, xb, w1 + w2, t, s), atol=1e-9)


def test_guidance_rejects_negative_weight():
    s = sch.make_schedule(10, 1e-3, 0.1)
    with pytest.raises(ValueError):
        sch.guided_epsilon(np.zeros(2), np.zeros(2), np.zeros(2), -1.0, 1, s)


def test_target_forward_limits():
    xb = np.random.default_rng(7).normal(size=(3, 3))
    s_one = sch.NoiseSchedule(1, np.array([1e-300]))
    np.testing.assert_array_equal(sch.target_forward(xb, np.ones_like(xb), 1, s_one), xb)
    s = schedule_from_abar([0.25])
    np.testing.assert_allclose(sch.target_forward(xb, np.zeros_like(xb), 1, s), 0.5 * xb)


def test_guided_trajectory_with_exact_denoiser_matches_unguided():
    """xbar0 = x0 and a perfect denoiser: the guidance residual vanishes at every step."""
    s = schedule_from_abar([0.9, 0.6, 0.3])
    rng = np.random.default_rng(8)
    x0, x_T = rng.normal(size=(2, 4))

    def exact_eps(x_t, t):
        a = s.abar(t)
        return (x_t - math.sqrt(a) * x0) / math.sqrt(1 - a)

    guided, plain = x_T.copy(), x_T.copy()
    for t in (3, 2, 1):
        e = exact_eps(guided, t)
        xbar_t = sch.target_forward(x0, e, t, s)
        guided = sch.ddim_step(guided, sch.guided_epsilon(e, guided, xbar_t, 2.5, t, s), t, s)
        plain = sch.ddim_step(plain, exact_eps(plain, t), t, s)
        np.testing.assert_allclose(guided, plain, atol=1e-12)
    # closed form: deterministic DDIM with exact eps lands on x0
    np.testing.assert_allclose(plain, x0, atol=1e-12)


def test_strided_timesteps():
    assert sch.strided_timesteps(1000, 1) == [1000]
    ts = sch.strided_timesteps(1000, 10)
    assert ts[0] == 1000 and ts[-1] == 1 and len(ts) == 10
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert sch.strided_timesteps(5, 5) == [5, 4, 3, 2, 1]
    with pytest.raises(sch.ScheduleError):
        sch.strided_timesteps(5, 6)
