"""Noise predictors exposing eps(z, t), an interpolated feature map F(z), and a VJP.

Two implementations share the contract: an analytic Gaussian-prior denoiser
used as a verification oracle, and a small convolutional network whose forward
and reverse passes are written out by hand in ``dragbench.ops``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from dragbench import ops
from dragbench.diffusion import NoiseSchedule
from dragbench.tensorio import load_checkpoint, save_checkpoint


class MissingWeightsError(RuntimeError):
    pass


class Denoiser(Protocol):
    def predict_eps(self, z: np.ndarray, t: int) -> np.ndarray: ...

    def forward(self, z: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray, Any]:
        """Return (eps, features at latent resolution, tape); the tape feeds ``vjp``."""
        ...

    def extract_features(self, z: np.ndarray, t: int) -> np.ndarray: ...

    def vjp(self, z: np.ndarray, t: int, cot_eps: np.ndarray | None = None,
            cot_features: np.ndarray | None = None, tape: Any = None) -> np.ndarray: ...


def _check_cotangent(cot, shape, what):
    if cot is not None and cot.shape != shape:
        raise ValueError(f"{what} cotangent shape {cot.shape} != output shape {shape}")


class GaussianAnalyticDenoiser:
    """Exact posterior-mean denoiser for a prior z0 ~ N(mu, sigma0^2 I).

    Features are the stack [z; m_t(z)] so drag losses can run without a
    trained network.
    """

    def __init__(self, mu: np.ndarray, sigma0: float, sched: NoiseSchedule):
        if sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        mu = np.asarray(mu, dtype=np.float64)
        self.mu = mu[None] if mu.ndim == 2 else mu
        self.sigma0 = float(sigma0)
        self.sched = sched

    def _coeffs(self, t: int):
        a = self.sched.alpha(max(t, 1))
        s2 = self.sigma0 ** 2
        denom = a * s2 + (1 - a)
        # m = gain * z + offset ; eps = (z - sqrt(a) m) / sqrt(1 - a)
        gain = np.sqrt(a) * s2 / denom
        offset = (1 - a) * self.mu / denom
        return a, gain, offset

    def posterior_mean(self, z: np.ndarray, t: int) -> np.ndarray:
        _, gain, offset = self._coeffs(t)
        return gain * z + offset

    def predict_eps(self, z, t):
        a, gain, offset = self._coeffs(t)
        return ((1 - np.sqrt(a) * gain) * z - np.sqrt(a) * offset) / np.sqrt(1 - a)

    def forward(self, z, t):
        eps = self.predict_eps(z, t)
        return eps, np.concatenate([z, self.posterior_mean(z, t)]), None

    def extract_features(self, z, t):
        return self.forward(z, t)[1]

    def vjp(self, z, t, cot_eps=None, cot_features=None, tape=None):
        a, gain, _ = self._coeffs(t)
        c = z.shape[0]
        _check_cotangent(cot_eps, z.shape, "eps")
        _check_cotangent(cot_features, (2 * c,) + z.shape[1:], "feature")
        g = np.zeros_like(z)
        if cot_eps is not None:
            g += cot_eps * (1 - np.sqrt(a) * gain) / np.sqrt(1 - a)
        if cot_features is not None:
            g += cot_features[:c] + gain * cot_features[c:]
        return g


PARAM_NAMES = ("conv1.w", "conv1.b", "temb.w", "temb.b", "conv2.w", "conv2.b",
               "conv3.w", "conv3.b", "out.w", "out.b")


@dataclass
class _Tape:
    x: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    a3: np.ndarray
    h3: np.ndarray
    emb: np.ndarray


class ConvDenoiser:
    """conv(1->w1) + t-bias, SiLU, conv(w1->w2), SiLU, conv(w2->D), SiLU [features], conv(D->1).

    The SiLU output of the third layer is the feature layer. It is already at
    the latent's resolution, so the interpolation step is the identity here.
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params = None
        if params is not None:
            self.load_params(params)

    @classmethod
    def init(cls, seed: int = 0, widths=(16, 32, 16), channels: int = 1, emb_dim: int = 8) -> ConvDenoiser:
        rng = np.random.default_rng(seed)
        w1, w2, w3 = widths

        def he(o, i):
            return rng.normal(0.0, np.sqrt(2.0 / (9 * i)), size=(o, i, 3, 3))

        params = {
            "conv1.w": he(w1, channels), "conv1.b": np.zeros(w1),
            "temb.w": rng.normal(0.0, 1.0 / np.sqrt(emb_dim), size=(w1, emb_dim)),
            "temb.b": np.zeros(w1),
            "conv2.w": he(w2, w1), "conv2.b": np.zeros(w2),
            "conv3.w": he(w3, w2), "conv3.b": np.zeros(w3),
            "out.w": he(channels, w3) * 0.1, "out.b": np.zeros(channels),
        }
        return cls(params)

    @classmethod
    def zeros(cls, widths=(16, 32, 16), channels: int = 1, emb_dim: int = 8) -> ConvDenoiser:
        net = cls.init(0, widths, channels, emb_dim)
        return cls({k: np.zeros_like(v) for k, v in net.params.items()})

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        missing = [k for k in PARAM_NAMES if k not in params]
        if missing:
            raise MissingWeightsError(f"checkpoint lacks {missing}")
        self.params = {k: np.array(params[k], dtype=np.float64) for k in PARAM_NAMES}

    @classmethod
    def load(cls, path: str | Path) -> ConvDenoiser:
        return cls(load_checkpoint(path))

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self._p())

    def _p(self) -> dict[str, np.ndarray]:
        if self.params is None:
            raise MissingWeightsError("denoiser has no weights loaded")
        return self.params

    @property
    def feature_dim(self) -> int:
        return self._p()["conv3.w"].shape[0]

    @property
    def emb_dim(self) -> int:
        return self._p()["temb.w"].shape[1]

    # batched core -------------------------------------------------------

    def forward_batch(self, x: np.ndarray, ts) -> tuple[np.ndarray, _Tape]:
        p = self._p()
        ts = np.broadcast_to(np.asarray(ts), (x.shape[0],))
        emb = np.stack([ops.timestep_embedding(float(t), self.emb_dim) for t in ts])
        tbias = emb @ p["temb.w"].T + p["temb.b"]
        a1 = ops.conv2d(x, p["conv1.w"], p["conv1.b"]) + tbias[:, :, None, None]
        h1 = ops.silu(a1)
        a2 = ops.conv2d(h1, p["conv2.w"], p["conv2.b"])
        h2 = ops.silu(a2)
        a3 = ops.conv2d(h2, p["conv3.w"], p["conv3.b"])
        h3 = ops.silu(a3)
        eps = ops.conv2d(h3, p["out.w"], p["out.b"])
        return eps, _Tape(x, a1, h1, a2, h2, a3, h3, emb)

    def backward_batch(self, tape: _Tape, g_eps=None, g_feat=None, param_grads: bool = False):
        """Reverse pass. Returns (grad_x, grads-dict or None)."""
        p = self._p()
        grads = {}

        def back(x, w, g, name, need_input=True):
            gx, grads[name + ".w"], grads[name + ".b"] = ops.conv2d_vjp(
                x, w, g, need_input=need_input, need_weight=param_grads)
            return gx

        g_h3 = np.zeros_like(tape.h3) if g_feat is None else np.array(g_feat, dtype=np.float64)
        if g_eps is not None:
            g_h3 = g_h3 + back(tape.h3, p["out.w"], g_eps, "out")
        elif param_grads:
            grads["out.w"], grads["out.b"] = np.zeros_like(p["out.w"]), np.zeros_like(p["out.b"])
        g_a3 = g_h3 * ops.silu_grad(tape.a3)
        g_a2 = back(tape.h2, p["conv3.w"], g_a3, "conv3") * ops.silu_grad(tape.a2)
        g_a1 = back(tape.h1, p["conv2.w"], g_a2, "conv2") * ops.silu_grad(tape.a1)
        g_x = back(tape.x, p["conv1.w"], g_a1, "conv1")
        if param_grads:
            g_tb = g_a1.sum(axis=(2, 3))
            grads["temb.w"] = g_tb.T @ tape.emb
            grads["temb.b"] = g_tb.sum(axis=0)
            return g_x, grads
        return g_x, None

    # single-latent contract ---------------------------------------------

    def forward(self, z, t):
        eps, tape = self.forward_batch(z[None], t)
        return eps[0], ops.resize_bilinear(tape.h3[0], z.shape[-2:]), tape

    def predict_eps(self, z, t):
        return self.forward(z, t)[0]

    def extract_features(self, z, t):
        return self.forward(z, t)[1]

    def vjp(self, z, t, cot_eps=None, cot_features=None, tape=None):
        if tape is None:
            _, _, tape = self.forward(z, t)
        _check_cotangent(cot_eps, z.shape, "eps")
        _check_cotangent(cot_features, (self.feature_dim,) + z.shape[1:], "feature")
        g_eps = None if cot_eps is None else cot_eps[None]
        g_feat = None
        if cot_features is not None:
            g_feat = ops.resize_bilinear_vjp(cot_features, tape.h3.shape[-2:])[None]
        g_x, _ = self.backward_batch(tape, g_eps, g_feat)
        return g_x[0]


def extract_features(z, denoiser: Denoiser) -> np.ndarray:
    """F(z) = I(U(z; t)) for a :class:`~dragbench.diffusion.Latent`."""
    feats = denoiser.extract_features(z.data, z.t)
    return ops.resize_bilinear(feats, z.shape[-2:])


def sample_feature_patch(features: np.ndarray, center, r1: int) -> np.ndarray:
    return ops.sample_patch(features, center, r1)
