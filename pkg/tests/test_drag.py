import dataclasses

import numpy as np
import pytest

from dragbench import ops
from dragbench.denoiser import ConvDenoiser, GaussianAnalyticDenoiser
from dragbench.diffusion import Latent, TimestepError, denoise_to, invert_trajectory
from dragbench.drag import (
    ControlPair, DragConfig, DragState, EditMask, motion_loss_baseline, motion_loss_ip,
    motion_supervise, run_all_at_once, run_gooddrag, supervised_center, track_handle, track_points,
)

from helpers import brute_force_track, central_difference, loss_oracle, relative_error

CFG16 = DragConfig(K=0, B=1, J=1, eta=0.02, beta=2.5, r1=3, r2=4, lam=0.2, T=10, optimizer="sgd")


@pytest.fixture
def conv_setup(sched, rng):
    den = ConvDenoiser.init(seed=11)
    yy, xx = np.mgrid[0:16, 0:16]
    src = Latent(np.exp(-((yy - 7) ** 2 + (xx - 6) ** 2) / 8.0)[None])
    traj = invert_trajectory(src, CFG16.T, den, sched)
    pairs = [ControlPair((7, 6), (7, 11))]
    mask = EditMask((np.abs(xx - 8) <= 5).astype(int))
    return den, traj, pairs, mask


def perturbed_state(traj, pairs, cfg, rng, scale=0.05):
    st = DragState.start(traj, pairs, cfg)
    return st.replace(z=Latent(st.z.data + scale * rng.standard_normal(st.z.shape), st.z.t),
                      handles=[(8, 7)], k=3)


def test_ip_loss_identical_latent_beta_zero(conv_setup, sched):
    den, traj, pairs, _ = conv_setup
    cfg = dataclasses.replace(CFG16, beta=0.0)
    st = DragState.start(traj, pairs, cfg)
    loss, grad = motion_loss_ip(st, cfg, EditMask.full((16, 16)), den, sched)
    assert loss == 0.0
    assert np.all(grad == 0)


def test_ip_loss_full_mask_drops_second_term(conv_setup, sched, rng):
    den, traj, pairs, mask = conv_setup
    st = perturbed_state(traj, pairs, CFG16, rng)
    full = EditMask.full((16, 16))
    lam0 = dataclasses.replace(CFG16, lam=0.0)
    assert motion_loss_ip(st, CFG16, full, den, sched)[0] == pytest.approx(
        motion_loss_ip(st, lam0, mask, den, sched)[0], rel=1e-12)


@pytest.mark.parametrize("variant", ["ip", "baseline"])
def test_loss_value_and_gradient_match_oracle(variant, conv_setup, sched, rng):
    den, traj, pairs, mask = conv_setup
    st = perturbed_state(traj, pairs, CFG16, rng)
    t = st.z.t
    if variant == "ip":
        ref = [ops.sample_patch(den.forward(traj[t].data, t)[1], pairs[0].p, CFG16.r1)]
        loss, grad = motion_loss_ip(st, CFG16, mask, den, sched)
    else:
        ref = [ops.sample_patch(den.forward(st.z.data, t)[1], st.handles[0], CFG16.r1)]
        loss, grad = motion_loss_baseline(st, CFG16, mask, den, sched)

    def f(z):
        return loss_oracle(z, t, st, CFG16, mask, den, sched, variant, ref)

    assert loss == pytest.approx(f(st.z.data), rel=1e-12)
    errs = []
    for _ in range(10):
        v = rng.standard_normal(st.z.shape)
        errs.append(relative_error(central_difference(f, st.z.data, v, h=1e-5), (grad * v).sum()))
    assert max(errs) <= 1e-4


def test_baseline_beta_zero_first_term_vanishes(conv_setup, sched, rng):
    den, traj, pairs, mask = conv_setup
    cfg = dataclasses.replace(CFG16, beta=0.0, lam=0.0)
    st = perturbed_state(traj, pairs, cfg, rng)
    assert motion_loss_baseline(st, cfg, mask, den, sched)[0] == 0.0


def test_variants_coincide_at_k0_and_differ_later(conv_setup, sched, rng):
    den, traj, pairs, mask = conv_setup
    st = DragState.start(traj, pairs, CFG16)
    assert motion_loss_ip(st, CFG16, mask, den, sched)[0] == motion_loss_baseline(st, CFG16, mask, den, sched)[0]
    moved = perturbed_state(traj, pairs, CFG16, rng)
    a = motion_loss_ip(moved, CFG16, mask, den, sched)[0]
    b = motion_loss_baseline(moved, CFG16, mask, den, sched)[0]
    assert np.isfinite(a) and np.isfinite(b) and a != b


def test_loss_rejects_t0(conv_setup, sched):
    den, traj, pairs, mask = conv_setup
    st = DragState.start(traj, pairs, CFG16).replace(z=traj[0])
    with pytest.raises(TimestepError):
        motion_loss_ip(st, CFG16, mask, den, sched)


def test_loss_rejects_patch_leaving_canvas(conv_setup, sched):
    den, traj, _, mask = conv_setup
    st = DragState.start(traj, [ControlPair((2, 6), (2, 12))], CFG16)
    with pytest.raises(ops.PatchBoundsError):
        motion_loss_ip(st, CFG16, mask, den, sched)


def test_single_step_matches_gradient_update(conv_setup, sched, rng):
    den, traj, pairs, mask = conv_setup
    st = perturbed_state(traj, pairs, CFG16, rng)
    _, grad = motion_loss_baseline(st, CFG16, mask, den, sched)
    out = motion_supervise(st, CFG16, mask, den, sched, "baseline")
    np.testing.assert_allclose(out.z.data, st.z.data - CFG16.eta * grad, rtol=0, atol=1e-15)
    assert out.handles == st.handles and out.k == st.k
    assert len(out.log) == len(st.log) + 1


def test_zero_step_size_leaves_latent(conv_setup, sched, rng):
    den, traj, pairs, mask = conv_setup
    cfg = dataclasses.replace(CFG16, eta=0.0, J=2)
    st = perturbed_state(traj, pairs, cfg, rng)
    assert np.array_equal(motion_supervise(st, cfg, mask, den, sched).z.data, st.z.data)


def test_three_steps_compose(conv_setup, sched, rng):
    den, traj, pairs, mask = conv_setup
    st = perturbed_state(traj, pairs, CFG16, rng)
    once = st
    for _ in range(3):
        once = motion_supervise(once, CFG16, mask, den, sched)
    thrice = motion_supervise(st, dataclasses.replace(CFG16, J=3), mask, den, sched)
    assert np.array_equal(once.z.data, thrice.z.data)


def test_adam_step_is_bounded_by_learning_rate(conv_setup, sched, rng):
    den, traj, pairs, mask = conv_setup
    cfg = dataclasses.replace(CFG16, optimizer="adam")
    st = perturbed_state(traj, pairs, cfg, rng)
    out = motion_supervise(st, cfg, mask, den, sched)
    assert np.max(np.abs(out.z.data - st.z.data)) <= cfg.eta * (1 + 1e-6)
    assert out.opt.step == 1


def test_tracking_returns_to_origin_on_unedited_latent(conv_setup, sched):
    den, traj, pairs, _ = conv_setup
    cfg = dataclasses.replace(CFG16, r2=3)
    st = DragState.start(traj, pairs, cfg).replace(handles=[(8, 8)])
    assert track_points(st, cfg, den).handles == [pairs[0].p]


def test_tracking_finds_planted_translation(rng):
    F = rng.random((4, 24, 24))
    ref = rng.random(4) + 5.0
    F[:, 15, 9] = ref
    (y, x), dist = track_handle(F, ref, (12, 12), 5)
    assert (y, x) == (15, 9)
    assert brute_force_track(F, ref, (12, 12), 5) == (15, 9)
    assert dist.shape == (11, 11)


def test_tracking_zero_radius_keeps_handle(rng):
    F = rng.random((3, 10, 10))
    assert track_handle(F, rng.random(3), (4, 5), 0)[0] == (4, 5)


@pytest.mark.parametrize("seed", range(20))
def test_tracking_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    if seed % 2:
        F = rng.integers(0, 3, size=(3, 20, 20)).astype(float)
        ref = rng.integers(0, 3, size=3).astype(float)
    else:
        F = rng.random((5, 20, 20))
        ref = rng.random(5)
    p = tuple(int(v) for v in rng.integers(0, 20, size=2))
    r2 = int(rng.integers(1, 13))
    assert track_handle(F, ref, p, r2)[0] == brute_force_track(F, ref, p, r2)


def test_tracking_window_clips_at_border(rng):
    F = rng.random((2, 10, 10))
    (y, x), dist = track_handle(F, rng.random(2), (0, 9), 3)
    assert dist.shape == (4, 4)
    assert 0 <= y <= 3 and 6 <= x <= 9


def test_config_invariants():
    with pytest.raises(ValueError):
        DragConfig(K=75, B=10)
    with pytest.raises(ValueError):
        DragConfig(K=70, B=10, T=6)
    with pytest.raises(ValueError):
        DragConfig(r1=0)
    with pytest.raises(ValueError):
        DragConfig(eta=-1.0)
    d = DragConfig()
    assert (d.K, d.B, d.J, d.beta, d.r1, d.r2, d.lam, d.T) == (70, 10, 3, 4.0, 4, 12, 0.2, 38)
    assert d.eta == 0.02


def test_control_pair_validation():
    with pytest.raises(ValueError):
        ControlPair((3, 3), (3, 3))
    with pytest.raises(ValueError):
        ControlPair((3, 3), (3, 40)).check_inside((32, 32))


def test_supervised_center_clamps_to_target():
    np.testing.assert_allclose(supervised_center((10, 10), (10, 20), 4.0), [10, 14])
    np.testing.assert_allclose(supervised_center((10, 10), (10, 12), 4.0), [10, 12])


# --- sessions on the analytic denoiser (fast) ---------------------------------

@pytest.fixture
def gauss_session(sched):
    yy, xx = np.mgrid[0:24, 0:24]
    img = np.exp(-((yy - 11) ** 2 + (xx - 9) ** 2) / 10.0)[None]
    den = GaussianAnalyticDenoiser(np.full((1, 24, 24), 0.2), 0.5, sched)
    mask = EditMask(((xx >= 4) & (xx <= 19)).astype(int))
    return Latent(img), [ControlPair((11, 9), (11, 15))], mask, den


def test_k0_equals_plain_reconstruction(gauss_session, sched):
    src, pairs, mask, den = gauss_session
    cfg = DragConfig(K=0, T=12)
    out, rep = run_gooddrag(src, pairs, mask, cfg, den, sched)
    recon = denoise_to(invert_trajectory(src, 12, den, sched)[12], 0, den, sched)
    assert out.data.tobytes() == recon.data.tobytes()
    out2, _ = run_all_at_once(src, pairs, mask, cfg, den, sched)
    assert out2.data.tobytes() == out.data.tobytes()
    assert rep.denoise_count() == 12


def test_default_bookkeeping(gauss_session, sched):
    src, pairs, mask, den = gauss_session
    cfg = DragConfig(r1=3, r2=4, beta=3.0)
    _, rep = run_gooddrag(src, pairs, mask, cfg, den, sched)
    assert rep.drag_timesteps() == [38 - k // 10 for k in range(70)]
    assert rep.denoise_count("alternation") == 7
    assert rep.denoise_count("tail") == 31
    assert rep.denoise_count() == 38


def test_all_at_once_tags_stay_at_T(gauss_session, sched):
    src, pairs, mask, den = gauss_session
    cfg = DragConfig(K=20, B=10, r1=3, r2=4, beta=3.0, T=15)
    _, rep = run_all_at_once(src, pairs, mask, cfg, den, sched)
    assert set(rep.drag_timesteps()) == {15}
    assert rep.denoise_count("tail") == 15 and rep.denoise_count("alternation") == 0


def test_frozen_handles_stay_put(gauss_session, sched):
    src, pairs, mask, den = gauss_session
    cfg = DragConfig(K=30, B=10, r1=3, r2=4, beta=3.0, T=15, converge_radius=3.0)
    _, rep = run_gooddrag(src, pairs, mask, cfg, den, sched)
    first = next((i for i, r in enumerate(rep.records) if r["frozen"][0]), None)
    if first is not None:
        frozen_at = rep.records[first]["handles"]
        assert all(r["handles"] == frozen_at for r in rep.records[first:])
        assert all(r["live_handles"] == 0 for r in rep.records[first + 1:])
        # the drags still run, supervised by the mask term alone
        assert all(r["losses"] for r in rep.records[first + 1:])


class _PoisonAfter:
    """Wraps a denoiser and starts emitting NaNs after ``n`` forward calls."""

    def __init__(self, inner, n):
        self.inner, self.n, self.calls = inner, n, 0

    def predict_eps(self, z, t):
        return self.inner.predict_eps(z, t)

    def forward(self, z, t):
        self.calls += 1
        eps, F, tape = self.inner.forward(z, t)
        if self.calls > self.n:
            F = F * np.nan
        return eps, F, tape

    def extract_features(self, z, t):
        return self.forward(z, t)[1]

    def vjp(self, *a, **kw):
        return self.inner.vjp(*a, **kw)


def test_non_finite_loss_aborts_with_partial_report(gauss_session, sched):
    src, pairs, mask, den = gauss_session
    cfg = DragConfig(K=20, B=10, r1=3, r2=4, beta=3.0, T=15)
    _, rep = run_gooddrag(src, pairs, mask, cfg, _PoisonAfter(den, 12), sched)
    assert rep.status == "aborted"
    assert 0 < len(rep.records) < 20
    assert "k" in rep.diagnostics
