"""Noise schedule, forward noising, and deterministic DDIM denoising / inversion.

Timesteps are 1-indexed: ``alphas[t - 1]`` is the cumulative signal factor at
step ``t`` and ``t = 0`` is the clean image (alpha = 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from dragbench.denoiser import Denoiser

T_MAX = 50
DEFAULT_BETA_MIN = 0.02
DEFAULT_BETA_MAX = 0.6


class ScheduleError(ValueError):
    pass


class TimestepError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ScheduleError("need at least two timesteps")
        if not np.all((a > 0) & (a < 1)):
            raise ScheduleError("alphas must lie in (0, 1)")
        if not np.all(np.diff(a) < 0):
            raise ScheduleError("alphas must be strictly decreasing")
        a.setflags(write=False)
        object.__setattr__(self, "alphas", a)

    @property
    def t_max(self) -> int:
        return int(self.alphas.size)

    def alpha(self, t: int) -> float:
        """Cumulative signal factor at step ``t``; alpha(0) == 1."""
        if not 0 <= t <= self.t_max:
            raise TimestepError(f"timestep {t} outside 0..{self.t_max}")
        return 1.0 if t == 0 else float(self.alphas[t - 1])

    def denoise_coeffs(self, t: int) -> tuple[float, float]:
        """(c_z, c_eps) such that z_{t-1} = c_z * z_t + c_eps * eps."""
        a_t, a_prev = self.alpha(t), self.alpha(t - 1)
        c_z = np.sqrt(a_prev / a_t)
        return float(c_z), float(np.sqrt(1 - a_prev) - c_z * np.sqrt(1 - a_t))

    def invert_coeffs(self, t: int) -> tuple[float, float]:
        """(c_z, c_eps) such that z_t = c_z * z_{t-1} + c_eps * eps."""
        a_t, a_prev = self.alpha(t), self.alpha(t - 1)
        c_eps = np.sqrt(a_t) * (np.sqrt(1 / a_t - 1) - np.sqrt(1 / a_prev - 1))
        return float(np.sqrt(a_t / a_prev)), float(c_eps)


def build_schedule(t_max: int = T_MAX, beta_min: float = DEFAULT_BETA_MIN,
                   beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    """Linear-beta schedule: alpha_t = prod_{s<=t} (1 - beta_s)."""
    if t_max < 2:
        raise ScheduleError(f"t_max must be >= 2, got {t_max}")
    if not 0 < beta_min < beta_max < 1:
        raise ScheduleError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, t_max)
    return NoiseSchedule(np.cumprod(1.0 - betas))


@dataclass(frozen=True)
class Latent:
    """A (C, H, W) grid tagged with its diffusion timestep."""

    data: np.ndarray
    t: int = 0

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[None]
        if d.ndim != 3:
            raise ValueError(f"latent must be (C, H, W), got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("latent has non-finite entries")
        if self.t < 0:
            raise TimestepError(f"negative timestep {self.t}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def _check_tag(z: Latent, sched: NoiseSchedule) -> None:
    if not 0 <= z.t <= sched.t_max:
        raise TimestepError(f"latent tag {z.t} outside 0..{sched.t_max}")


def forward_noise(z0: Latent, t: int, eps: np.ndarray, sched: NoiseSchedule) -> Latent:
    if z0.t != 0:
        raise TimestepError(f"forward_noise expects a clean latent, got t={z0.t}")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} != latent shape {z0.shape}")
    a = sched.alpha(t)
    return Latent(np.sqrt(a) * z0.data + np.sqrt(1 - a) * eps, t)


def ddim_denoise_step(z: Latent, denoiser: Denoiser, sched: NoiseSchedule) -> Latent:
    _check_tag(z, sched)
    if z.t < 1:
        raise TimestepError("cannot denoise below t=0")
    eps = denoiser.predict_eps(z.data, z.t)
    c_z, c_eps = sched.denoise_coeffs(z.t)
    return Latent(c_z * z.data + c_eps * eps, z.t - 1)


def ddim_invert_step(z: Latent, denoiser: Denoiser, sched: NoiseSchedule) -> Latent:
    # eps at (z_{t-1}, t-1) stands in for eps at (z_t, t)
    _check_tag(z, sched)
    t = z.t + 1
    if t > sched.t_max:
        raise TimestepError(f"cannot invert past t_max={sched.t_max}")
    eps = denoiser.predict_eps(z.data, z.t)
    c_z, c_eps = sched.invert_coeffs(t)
    return Latent(c_z * z.data + c_eps * eps, t)


@dataclass
class InversionTrajectory:
    latents: dict[int, Latent] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return max(self.latents)

    def __getitem__(self, t: int) -> Latent:
        return self.latents[t]

    def __len__(self) -> int:
        return len(self.latents)


def invert_trajectory(z0: Latent, T: int, denoiser: Denoiser, sched: NoiseSchedule) -> InversionTrajectory:
    if z0.t != 0:
        raise TimestepError("inversion starts from a clean latent")
    if not 0 <= T <= sched.t_max:
        raise TimestepError(f"inversion depth {T} outside 0..{sched.t_max}")
    traj = InversionTrajectory({0: z0})
    z = z0
    for _ in range(T):
        z = ddim_invert_step(z, denoiser, sched)
        traj.latents[z.t] = z
    return traj


def denoise_to(z: Latent, t_end: int, denoiser: Denoiser, sched: NoiseSchedule) -> Latent:
    while z.t > t_end:
        z = ddim_denoise_step(z, denoiser, sched)
    return z
