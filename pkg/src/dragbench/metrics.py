"""Evaluation metrics: dragging accuracy, reconstruction fidelity, drift and rank correlation.

The decoder between latent and image space is the identity here, so every
metric reads latents directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from dragbench.denoiser import Denoiser
from dragbench.drag import tracking_reference
from dragbench.diffusion import Latent, NoiseSchedule, ddim_denoise_step, invert_trajectory
from dragbench.ops import PatchBoundsError

DAI_GAMMAS = (1, 5, 10, 20)


@dataclass(frozen=True)
class DaiConfig:
    gamma: int = 1
    boundary: Literal["error", "zero"] = "error"

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.boundary not in ("error", "zero"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")


def _square_patch(x: np.ndarray, center, gamma: int, boundary: str) -> np.ndarray:
    c, h, w = x.shape
    y, xc = int(center[0]), int(center[1])
    if boundary == "error":
        if y - gamma < 0 or xc - gamma < 0 or y + gamma > h - 1 or xc + gamma > w - 1:
            raise PatchBoundsError(f"patch of radius {gamma} at {(y, xc)} leaves {h}x{w}")
        return x[:, y - gamma:y + gamma + 1, xc - gamma:xc + gamma + 1]
    padded = np.pad(x, ((0, 0), (gamma, gamma), (gamma, gamma)))
    return padded[:, y:y + 2 * gamma + 1, xc:xc + 2 * gamma + 1]


def dai(original: Latent, edited: Latent, pairs, gamma: int | DaiConfig = 1) -> float:
    """Mean over pairs of the squared L2 gap between the source patch at p and the edited patch at q.

    Channels are summed inside the norm; the result is divided by the patch
    area (1 + 2 gamma)^2. With ``boundary="zero"`` pixels outside the canvas
    read as zero instead of raising. Pairs may be ControlPairs or plain
    ``(p, q)`` tuples; the latter allow p == q.
    """
    cfg = gamma if isinstance(gamma, DaiConfig) else DaiConfig(int(gamma))
    if original.shape != edited.shape:
        raise ValueError(f"shape mismatch {original.shape} vs {edited.shape}")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("dai needs at least one control pair")
    total = 0.0
    for pr in pairs:
        p, q = (pr.p, pr.q) if hasattr(pr, "p") else pr
        a = _square_patch(original.data, p, cfg.gamma, cfg.boundary)
        b = _square_patch(edited.data, q, cfg.gamma, cfg.boundary)
        total += float(((a - b) ** 2).sum()) / (1 + 2 * cfg.gamma) ** 2
    return total / len(pairs)


def fidelity_mse(a: Latent, b: Latent) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a.data - b.data) ** 2))


def out_of_mask_change(original: Latent, edited: Latent, mask) -> float:
    """Mean absolute change over the frozen (mask == 0) pixels; 0 when nothing is frozen."""
    frozen = np.broadcast_to(mask.frozen, original.shape)
    n = frozen.sum()
    if n == 0:
        return 0.0
    return float((np.abs(edited.data - original.data) * frozen).sum() / n)


def content_location(original: Latent, edited: Latent, p, q, r1: int, r2: int) -> tuple[int, int]:
    """Where the original content around ``p`` ended up in ``edited``, searched near ``q``.

    Pixel-space L1 patch match (patch radius ``r1``) over the window of radius
    ``r2`` around ``q``, clipped so the patch stays on the canvas. Ties go to
    the smallest L-inf distance from ``q``, then row-major order.
    """
    a, b = np.asarray(original.data), np.asarray(edited.data)
    h, w = a.shape[-2:]
    ref = a[:, p[0] - r1:p[0] + r1 + 1, p[1] - r1:p[1] + r1 + 1]
    if ref.shape[-2:] != (2 * r1 + 1, 2 * r1 + 1):
        raise PatchBoundsError(f"patch of radius {r1} around {p} leaves the canvas")
    best, best_key = None, None
    for y in range(max(r1, q[0] - r2), min(h - r1, q[0] + r2 + 1)):
        for x in range(max(r1, q[1] - r2), min(w - r1, q[1] + r2 + 1)):
            d = float(np.abs(b[:, y - r1:y + r1 + 1, x - r1:x + r1 + 1] - ref).sum())
            key = (d, max(abs(y - q[0]), abs(x - q[1])), y, x)
            if best_key is None or key < best_key:
                best, best_key = (y, x), key
    if best is None:
        raise PatchBoundsError(f"empty search window around {q}")
    return best


def content_handle_distance(original: Latent, edited: Latent, pairs, r1: int = 4, r2: int = 12) -> list[float]:
    """Per pair, Euclidean distance from the target to where the handle content was found."""
    out = []
    for pr in pairs:
        p, q = (pr.p, pr.q) if hasattr(pr, "p") else pr
        y, x = content_location(original, edited, p, q, r1, r2)
        out.append(float(np.hypot(y - q[0], x - q[1])))
    return out


def noise_accumulation_experiment(z0: Latent, N: int, sigma: float, sched: NoiseSchedule,
                                  denoiser: Denoiser, seed: int, t_start: int = 38) -> tuple[float, float]:
    """Inject N noise fields into the inverted latent, either all at t_start or one per step.

    Returns (mse_single, mse_distributed) of each arm's reconstruction against z0.
    """
    if not 0 <= N <= t_start:
        raise ValueError(f"need 0 <= N <= t_start, got N={N}, t_start={t_start}")
    zT = invert_trajectory(z0, t_start, denoiser, sched)[t_start]
    rng = np.random.default_rng(seed)
    noise = sigma * rng.standard_normal((N,) + z0.shape)

    single = Latent(zT.data + noise.sum(axis=0), t_start)
    while single.t > 0:
        single = ddim_denoise_step(single, denoiser, sched)

    dist = zT
    for i in range(N):
        dist = ddim_denoise_step(Latent(dist.data + noise[i], dist.t), denoiser, sched)
    while dist.t > 0:
        dist = ddim_denoise_step(dist, denoiser, sched)
    return fidelity_mse(single, z0), fidelity_mse(dist, z0)


def drift_curve(report) -> list[tuple[int, float]]:
    """(k, drift) with drift the mean L1 feature gap between each tracked handle and its origin.

    Starts with (0, 0.0) for the untouched state; the entry for k is the gap
    after drag k - 1 completed. Records without tracking data repeat the previous value.
    """
    out = [(0, 0.0)]
    last = 0.0
    for rec in report.records:
        track = rec.get("track") or []
        if track:
            last = float(np.mean([d["drift"] for d in track]))
        out.append((rec["k"] + 1, last))
    return out


def tracking_distances(features: np.ndarray, ref_vec: np.ndarray, p, r2: int, margin: int = 0) -> np.ndarray:
    h, w = features.shape[-2:]
    y0, y1 = max(margin, p[0] - r2), min(h - margin, p[0] + r2 + 1)
    x0, x1 = max(margin, p[1] - r2), min(w - margin, p[1] + r2 + 1)
    return np.abs(features[:, y0:y1, x0:x1] - np.asarray(ref_vec)[:, None, None]).sum(axis=0)


def heatmap_std(state, cfg, denoiser: Denoiser) -> float:
    """Std of the tracking distance map (same window as tracking) around each handle, averaged."""
    F = denoiser.forward(state.z.data, state.z.t)[1]
    ref_F = tracking_reference(state, cfg, denoiser)
    vals = [float(tracking_distances(F, ref_F[:, pr.p[0], pr.p[1]], state.handles[i], cfg.r2, cfg.r1).std())
            for i, pr in enumerate(state.pairs)]
    return float(np.mean(vals))


@dataclass(frozen=True)
class RankTable:
    human: np.ndarray
    metric: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.human)
        r = np.asarray(self.metric)
        if u.ndim != 2 or u.shape != r.shape:
            raise ValueError("rank tables must be 2-D and the same shape")
        n_m = u.shape[1]
        expect = np.arange(1, n_m + 1)
        for name, tab in (("human", u), ("metric", r)):
            for i, row in enumerate(tab):
                if not np.array_equal(np.sort(row), expect):
                    raise ValueError(f"{name} row {i} is not a permutation of 1..{n_m}")
        object.__setattr__(self, "human", u.astype(np.int64))
        object.__setattr__(self, "metric", r.astype(np.int64))

    @property
    def n_methods(self) -> int:
        return self.human.shape[1]


def spearman(table: RankTable) -> float:
    """Mean over images of the per-row Spearman coefficient between human and metric ranks."""
    n_m = table.n_methods
    if n_m < 2:
        raise ValueError("need at least two methods to rank")
    d2 = ((table.human - table.metric) ** 2).sum(axis=1)
    rho = 1.0 - 6.0 * d2 / (n_m * (n_m ** 2 - 1))
    return float(rho.mean())


def ranks_from_scores(scores, higher_is_better: bool = True) -> np.ndarray:
    """Per-row ranks 1..N_m (1 = best); ties broken by column order."""
    s = np.asarray(scores, dtype=np.float64)
    key = -s if higher_is_better else s
    order = np.argsort(key, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(s.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, s.shape[1] + 1)
    return ranks
