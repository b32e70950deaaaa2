import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dragbench.denoiser import GaussianAnalyticDenoiser
from dragbench.diffusion import (
    Latent, NoiseSchedule, ScheduleError, TimestepError, build_schedule, ddim_denoise_step,
    ddim_invert_step, denoise_to, forward_noise, invert_trajectory,
)

from helpers import ConstantEps


def test_schedule_default_length_and_monotone(sched):
    assert sched.t_max == 50
    assert np.all(np.diff(sched.alphas) < 0)
    assert np.all((sched.alphas > 0) & (sched.alphas < 1))
    assert sched.alphas[-1] < 0.05


def test_schedule_two_steps_product():
    beta = 0.3
    s = build_schedule(2, beta - 1e-9, beta)
    assert s.alphas[0] == pytest.approx(1 - beta, abs=1e-8)
    assert s.alphas[1] == pytest.approx((1 - beta) ** 2, abs=1e-8)


def test_wide_beta_range_reaches_noise():
    # independent product: prod_{s=1}^{50} (1 - beta_s), beta linear in [0.02, 0.6]
    prod = 1.0
    for s in range(50):
        prod *= 1 - (0.02 + s * (0.6 - 0.02) / 49)
    s = build_schedule(50, 0.02, 0.6)
    assert s.alphas[-1] == pytest.approx(prod, rel=1e-12)
    assert s.alphas[-1] < 0.05


@pytest.mark.parametrize("args", [(1, 0.1, 0.2), (50, 0.0, 0.2), (50, 0.3, 0.2), (50, 0.1, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ScheduleError):
        build_schedule(*args)


def test_schedule_rejects_non_monotone():
    with pytest.raises(ScheduleError):
        NoiseSchedule(np.array([0.9, 0.95, 0.5]))


def test_forward_noise_zero_eps(sched, rng):
    z0 = Latent(rng.random((1, 8, 8)))
    out = forward_noise(z0, 10, np.zeros((1, 8, 8)), sched)
    np.testing.assert_allclose(out.data, math.sqrt(sched.alpha(10)) * z0.data)
    assert out.t == 10


def test_forward_noise_zero_signal(sched, rng):
    eps = rng.standard_normal((1, 8, 8))
    out = forward_noise(Latent(np.zeros((1, 8, 8))), 3, eps, sched)
    np.testing.assert_allclose(out.data, math.sqrt(1 - sched.alpha(3)) * eps)


def test_forward_noise_matches_scalar_formula(sched, rng):
    z0 = rng.random((1, 6, 6))
    eps = rng.standard_normal((1, 6, 6))
    out = forward_noise(Latent(z0), 7, eps, sched).data
    a = float(sched.alphas[6])
    for idx in np.ndindex(z0.shape):
        assert out[idx] == pytest.approx(math.sqrt(a) * z0[idx] + math.sqrt(1 - a) * eps[idx], abs=1e-14)


def test_forward_noise_seeded_reproducible(sched):
    z0 = Latent(np.full((1, 4, 4), 0.5))
    a = forward_noise(z0, 5, np.random.default_rng(9).standard_normal((1, 4, 4)), sched)
    b = forward_noise(z0, 5, np.random.default_rng(9).standard_normal((1, 4, 4)), sched)
    assert a.data.tobytes() == b.data.tobytes()


def test_forward_noise_errors(sched):
    with pytest.raises(ValueError):
        forward_noise(Latent(np.zeros((1, 4, 4))), 2, np.zeros((1, 4, 5)), sched)
    with pytest.raises(TimestepError):
        forward_noise(Latent(np.zeros((1, 4, 4)), 3), 2, np.zeros((1, 4, 4)), sched)


def test_denoise_with_zero_eps(sched, rng):
    z = Latent(rng.standard_normal((1, 5, 5)), 12)
    out = ddim_denoise_step(z, ConstantEps(0.0), sched)
    np.testing.assert_allclose(out.data, math.sqrt(sched.alpha(11) / sched.alpha(12)) * z.data)
    assert out.t == 11


def test_invert_with_zero_eps(sched, rng):
    z = Latent(rng.standard_normal((1, 5, 5)), 11)
    out = ddim_invert_step(z, ConstantEps(0.0), sched)
    np.testing.assert_allclose(out.data, math.sqrt(sched.alpha(12) / sched.alpha(11)) * z.data)
    assert out.t == 12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.integers(0, 49), c=st.floats(-3, 3))
def test_constant_eps_roundtrip(seed, t, c):
    sched = build_schedule()
    z = Latent(np.random.default_rng(seed).standard_normal((1, 8, 8)), t)
    den = ConstantEps(c)
    back = ddim_denoise_step(ddim_invert_step(z, den, sched), den, sched)
    assert back.t == t
    assert np.max(np.abs(back.data - z.data)) <= 1e-6


def test_steps_reject_out_of_range_tags(sched):
    den = ConstantEps(0.0)
    with pytest.raises(TimestepError):
        ddim_denoise_step(Latent(np.zeros((1, 2, 2)), 0), den, sched)
    with pytest.raises(TimestepError):
        ddim_invert_step(Latent(np.zeros((1, 2, 2)), 50), den, sched)
    with pytest.raises(TimestepError):
        ddim_denoise_step(Latent(np.zeros((1, 2, 2)), 51), den, sched)


def test_denoise_step_is_pure(sched, rng):
    mu = rng.random((1, 6, 6))
    den = GaussianAnalyticDenoiser(mu, 0.5, sched)
    z = Latent(rng.standard_normal((1, 6, 6)), 20)
    a, b = ddim_denoise_step(z, den, sched), ddim_denoise_step(z, den, sched)
    assert a.data.tobytes() == b.data.tobytes()


def test_gaussian_step_at_tmax_moves_toward_mean(sched, rng):
    mu = rng.random((1, 32, 32))
    den = GaussianAnalyticDenoiser(mu, 1.0, sched)
    a = sched.alpha(50)
    zT = Latent(math.sqrt(a) * mu + rng.standard_normal(mu.shape), 50)
    out = ddim_denoise_step(zT, den, sched)
    assert np.linalg.norm(out.data - mu) < np.linalg.norm(zT.data - mu)


def test_trajectory_depth_zero(sched, rng):
    z0 = Latent(rng.random((1, 4, 4)))
    traj = invert_trajectory(z0, 0, ConstantEps(0.1), sched)
    assert len(traj) == 1 and traj[0] is z0


def test_trajectory_default_depth_and_recurrence(sched, rng):
    mu = rng.random((1, 8, 8))
    den = GaussianAnalyticDenoiser(mu, 0.7, sched)
    z0 = Latent(rng.random((1, 8, 8)))
    traj = invert_trajectory(z0, 38, den, sched)
    assert sorted(traj.latents) == list(range(39))
    assert traj[0].data.tobytes() == z0.data.tobytes()
    for t in range(1, 39):
        prev = traj[t - 1].data
        a_t, a_p = sched.alpha(t), sched.alpha(t - 1)
        eps = den.predict_eps(prev, t - 1)
        expect = (math.sqrt(a_t) * (math.sqrt(1 / a_t - 1) - math.sqrt(1 / a_p - 1)) * eps
                  + math.sqrt(a_t / a_p) * prev)
        np.testing.assert_allclose(traj[t].data, expect, rtol=0, atol=1e-12)
        assert traj[t].t == t


def test_gaussian_chain_concentrates_on_mean(sched):
    # median over 20 seeds of ||z_t - mu|| must shrink over the last 10 steps
    mu = np.random.default_rng(0).random((1, 16, 16))
    den = GaussianAnalyticDenoiser(mu, 0.05, sched)
    dists = []
    for seed in range(20):
        z = Latent(np.random.default_rng(seed).standard_normal(mu.shape), 50)
        z = denoise_to(z, 10, den, sched)
        row = [np.linalg.norm(z.data - mu)]
        while z.t > 0:
            z = ddim_denoise_step(z, den, sched)
            row.append(np.linalg.norm(z.data - mu))
        dists.append(row)
    med = np.median(np.array(dists), axis=0)
    assert np.all(np.diff(med) < 0)
