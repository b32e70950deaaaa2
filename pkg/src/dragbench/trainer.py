"""Blob-world scenes and the epsilon-prediction training loop for ConvDenoiser."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dragbench.denoiser import ConvDenoiser
from dragbench.diffusion import Latent, NoiseSchedule

log = logging.getLogger(__name__)

CANVAS = (32, 32)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float]  # (row, col)
    radius: float
    intensity: float


@dataclass(frozen=True)
class BlobScene:
    blobs: tuple[Blob, ...] = ()
    canvas: tuple[int, int] = CANVAS

    def __post_init__(self):
        object.__setattr__(self, "blobs", tuple(self.blobs))
        if len(self.blobs) > 3:
            raise ValueError("a scene holds at most 3 blobs")
        h, w = self.canvas
        for b in self.blobs:
            y, x = b.center
            if not (b.radius <= y <= h - 1 - b.radius and b.radius <= x <= w - 1 - b.radius):
                raise ValueError(f"blob at {b.center} with radius {b.radius} violates canvas margin")
            if not 0.2 <= b.intensity <= 1.0:
                raise ValueError(f"blob intensity {b.intensity} outside [0.2, 1]")

    def to_dict(self) -> dict:
        return {"canvas": list(self.canvas),
                "blobs": [{"center": list(b.center), "radius": b.radius, "intensity": b.intensity}
                          for b in self.blobs]}

    @classmethod
    def from_dict(cls, d: dict) -> BlobScene:
        blobs = tuple(Blob(tuple(b["center"]), b["radius"], b["intensity"]) for b in d.get("blobs", []))
        return cls(blobs, tuple(d.get("canvas", CANVAS)))


def render_array(scene: BlobScene) -> np.ndarray:
    """Sum of Gaussian bumps with std radius/2, clamped to [0, 1]; shape (H, W)."""
    h, w = scene.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for b in scene.blobs:
        s = b.radius / 2.0
        img += b.intensity * np.exp(-((yy - b.center[0]) ** 2 + (xx - b.center[1]) ** 2) / (2 * s * s))
    return np.clip(img, 0.0, 1.0)


def render_scene(scene: BlobScene) -> Latent:
    return Latent(render_array(scene)[None], 0)


def random_scene(rng: np.random.Generator, canvas=CANVAS) -> BlobScene:
    h, w = canvas
    blobs = []
    for _ in range(rng.integers(1, 4)):
        r = rng.uniform(3.0, 6.0)
        blobs.append(Blob((rng.uniform(r, h - 1 - r), rng.uniform(r, w - 1 - r)), r, rng.uniform(0.2, 1.0)))
    return BlobScene(tuple(blobs), canvas)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    momentum: float = 0.0
    canvas: tuple[int, int] = CANVAS

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class TrainResult:
    model: ConvDenoiser
    losses: list[float] = field(default_factory=list)

    def write_loss_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "loss"])
            for i, v in enumerate(self.losses):
                wr.writerow([i, repr(v)])


def sample_batch(rng: np.random.Generator, cfg: TrainConfig, sched: NoiseSchedule):
    x0 = np.stack([render_array(random_scene(rng, cfg.canvas))[None] for _ in range(cfg.batch)])
    ts = rng.integers(1, sched.t_max + 1, size=cfg.batch)
    eps = rng.standard_normal(x0.shape)
    a = sched.alphas[ts - 1][:, None, None, None]
    return np.sqrt(a) * x0 + np.sqrt(1 - a) * eps, ts, eps


def eps_mse(model: ConvDenoiser, xt, ts, eps) -> float:
    pred, _ = model.forward_batch(xt, ts)
    return float(np.mean((pred - eps) ** 2))


def train_denoiser(cfg: TrainConfig, sched: NoiseSchedule, model: ConvDenoiser | None = None,
                   log_every: int = 500) -> TrainResult:
    """SGD on E||eps - eps_theta(sqrt(a_t) z0 + sqrt(1 - a_t) eps, t)||^2 over random scenes."""
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = ConvDenoiser.init(seed=cfg.seed)
    params = model.params
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    result = TrainResult(model)
    for step in range(cfg.steps):
        xt, ts, eps = sample_batch(rng, cfg, sched)
        pred, tape = model.forward_batch(xt, ts)
        diff = pred - eps
        loss = float(np.mean(diff ** 2))
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}")
        result.losses.append(loss)
        _, grads = model.backward_batch(tape, g_eps=2.0 * diff / diff.size, param_grads=True)
        for k in params:
            velocity[k] = cfg.momentum * velocity[k] + grads[k]
            params[k] -= cfg.learning_rate * velocity[k]
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, loss)
    return result
