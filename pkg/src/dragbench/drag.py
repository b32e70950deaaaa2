"""Drag editing: motion supervision, point tracking, and the two drag schedules.

Coordinates are integer (row, col) pairs. A session inverts the source to
timestep ``T``, then runs ``K`` drag operations. Each drag is ``J`` gradient
steps on the motion-supervision loss followed by one nearest-feature tracking
step. Under the alternating schedule one DDIM denoising step follows every
``B`` drags; the all-at-once schedule performs every drag at ``T``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from dragbench import ops
from dragbench.denoiser import Denoiser
from dragbench.diffusion import (
    InversionTrajectory, Latent, NoiseSchedule, TimestepError, ddim_denoise_step, invert_trajectory,
)

log = logging.getLogger(__name__)

LossVariant = Literal["ip", "baseline"]
ScheduleMode = Literal["gooddrag", "all-at-once"]


class DragAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class ControlPair:
    p: tuple[int, int]
    q: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "p", (int(self.p[0]), int(self.p[1])))
        object.__setattr__(self, "q", (int(self.q[0]), int(self.q[1])))
        if self.p == self.q:
            raise ValueError(f"handle and target coincide at {self.p}")

    def check_inside(self, shape: tuple[int, int], margin: float = 0) -> None:
        h, w = shape
        for name, (y, x) in (("handle", self.p), ("target", self.q)):
            if not (margin <= y <= h - 1 - margin and margin <= x <= w - 1 - margin):
                raise ValueError(f"{name} {(y, x)} is not inside {h}x{w} with margin {margin}")


@dataclass(frozen=True, eq=False)
class EditMask:
    """Binary (H, W) grid: 1 marks the editable region."""

    data: np.ndarray

    def __eq__(self, other):
        return isinstance(other, EditMask) and np.array_equal(self.data, other.data)

    __hash__ = None

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2 or not np.isin(d, (0, 1)).all():
            raise ValueError("mask must be a 2-D binary grid")
        d = d.astype(np.float64)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @classmethod
    def full(cls, shape: tuple[int, int]) -> EditMask:
        return cls(np.ones(shape))

    @property
    def frozen(self) -> np.ndarray:
        return 1.0 - self.data


@dataclass(frozen=True)
class DragConfig:
    K: int = 70
    B: int = 10
    J: int = 3
    eta: float = 0.02
    beta: float = 4.0
    r1: int = 4
    r2: int = 12
    lam: float = 0.2
    T: int = 38
    converge_radius: float = 1.0
    optimizer: Literal["sgd", "adam"] = "sgd"
    track_reference: Literal["current", "inversion"] = "current"

    def __post_init__(self):
        if self.K < 0 or self.B < 1 or self.J < 1:
            raise ValueError("need K >= 0, B >= 1, J >= 1")
        if self.K % self.B:
            raise ValueError(f"K={self.K} is not divisible by B={self.B}")
        if self.T - self.K // self.B < 0:
            raise ValueError(f"T={self.T} leaves no room for {self.K // self.B} alternation steps")
        if self.r1 < 1 or self.r2 < 1:
            raise ValueError("radii must be >= 1")
        if min(self.eta, self.beta, self.lam) < 0:
            raise ValueError("eta, beta and lambda must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.track_reference not in ("current", "inversion"):
            raise ValueError(f"unknown tracking reference {self.track_reference!r}")

    @property
    def boundary_margin(self) -> float:
        return self.r1 + self.beta

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class DragState:
    z: Latent
    handles: list[tuple[int, int]]
    pairs: tuple[ControlPair, ...]
    trajectory: InversionTrajectory
    k: int = 0
    frozen: list[bool] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    opt: AdamState | None = None
    _ref_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def start(cls, trajectory: InversionTrajectory, pairs, cfg: DragConfig, t: int | None = None) -> DragState:
        t = trajectory.depth if t is None else t
        pairs = tuple(pairs)
        st = cls(trajectory[t], [pr.p for pr in pairs], pairs, trajectory,
                 frozen=[False] * len(pairs))
        st.frozen = [st.distance_to_target(i) <= cfg.converge_radius for i in range(len(pairs))]
        return st

    def direction(self, i: int) -> np.ndarray:
        d = np.subtract(self.pairs[i].q, self.handles[i], dtype=np.float64)
        n = np.linalg.norm(d)
        return d / n if n > 0 else d

    def distance_to_target(self, i: int) -> float:
        return float(np.linalg.norm(np.subtract(self.pairs[i].q, self.handles[i])))

    def reference_features(self, t: int, denoiser: Denoiser) -> np.ndarray:
        """F(z_t^0) from the cached inversion trajectory."""
        if t not in self._ref_cache:
            z0t = self.trajectory[t]
            self._ref_cache[t] = denoiser.forward(z0t.data, t)[1]
        return self._ref_cache[t]

    def replace(self, **changes) -> DragState:
        new = dataclasses.replace(self, **changes)
        new._ref_cache = self._ref_cache
        return new


def supervised_center(p, q, beta: float) -> np.ndarray:
    """p + beta * d, landing on q instead of overshooting it."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    dist = np.linalg.norm(q - p)
    if dist < beta:
        return q
    return p + beta * (q - p) / dist if dist > 0 else p


@dataclass
class LossTerms:
    loss: float
    feature: float
    mask: float
    grad: np.ndarray


def _loss_terms(z: np.ndarray, t: int, state: DragState, cfg: DragConfig, mask: EditMask,
                denoiser: Denoiser, sched: NoiseSchedule, variant: LossVariant) -> LossTerms:
    if t < 1:
        raise TimestepError("motion supervision needs t >= 1")
    if variant not in ("ip", "baseline"):
        raise ValueError(f"unknown loss variant {variant!r}")
    eps, F, tape = denoiser.forward(z, t)
    cot_F = np.zeros_like(F)
    feat_loss = 0.0
    ref_F = state.reference_features(t, denoiser) if variant == "ip" else None
    for i, pair in enumerate(state.pairs):
        if state.frozen[i]:
            continue
        center = supervised_center(state.handles[i], pair.q, cfg.beta)
        patch = ops.sample_patch(F, center, cfg.r1)
        if variant == "ip":
            ref = ops.sample_patch(ref_F, pair.p, cfg.r1)
        else:
            ref = ops.sample_patch(F, state.handles[i], cfg.r1)  # stop-gradient: used as a constant
        diff = patch - ref
        feat_loss += float(np.abs(diff).sum())
        cot_F += ops.sample_patch_vjp(np.sign(diff), F.shape, center, cfg.r1)

    c_z, c_eps = sched.denoise_coeffs(t)
    z_prev = c_z * z + c_eps * eps
    resid = (z_prev - state.trajectory[t - 1].data) * mask.frozen
    mask_loss = cfg.lam * float(np.abs(resid).sum())
    cot_prev = cfg.lam * np.sign(resid) * mask.frozen
    grad = c_z * cot_prev + denoiser.vjp(z, t, c_eps * cot_prev, cot_F, tape=tape)
    return LossTerms(feat_loss + mask_loss, feat_loss, mask_loss, grad)


def motion_loss_ip(state, cfg, mask, denoiser, sched) -> tuple[float, np.ndarray]:
    """Features at p^k + beta d^k on z_t^k pulled toward the original patch at p^0 on z_t^0."""
    r = _loss_terms(state.z.data, state.z.t, state, cfg, mask, denoiser, sched, "ip")
    return r.loss, r.grad


def motion_loss_baseline(state, cfg, mask, denoiser, sched) -> tuple[float, np.ndarray]:
    """Same loss with the reference patch taken at p^k on the current latent."""
    r = _loss_terms(state.z.data, state.z.t, state, cfg, mask, denoiser, sched, "baseline")
    return r.loss, r.grad


def motion_supervise(state: DragState, cfg: DragConfig, mask: EditMask, denoiser: Denoiser,
                     sched: NoiseSchedule, variant: LossVariant = "ip") -> DragState:
    """J gradient steps on the motion loss; handles and k are left alone."""
    z = state.z.data.copy()
    t = state.z.t
    opt = state.opt
    entries = []
    for j in range(cfg.J):
        terms = _loss_terms(z, t, state, cfg, mask, denoiser, sched, variant)
        if not (math.isfinite(terms.loss) and np.all(np.isfinite(terms.grad))):
            raise DragAborted(f"non-finite loss at k={state.k}, j={j}",
                              {"k": state.k, "j": j, "t": t, "loss": terms.loss,
                               "handles": [list(h) for h in state.handles]})
        entries.append({"k": state.k, "j": j, "t": t, "loss": terms.loss,
                        "feature": terms.feature, "mask": terms.mask})
        if cfg.optimizer == "sgd":
            z = z - cfg.eta * terms.grad
        else:
            opt = _adam_step(opt, terms.grad, z.shape)
            z = z - cfg.eta * _adam_direction(opt)
    return state.replace(z=Latent(z, t), log=state.log + entries, opt=opt)


_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


def _adam_step(opt: AdamState | None, grad: np.ndarray, shape) -> AdamState:
    if opt is None:
        opt = AdamState(np.zeros(shape), np.zeros(shape))
    return AdamState(_ADAM_B1 * opt.m + (1 - _ADAM_B1) * grad,
                     _ADAM_B2 * opt.v + (1 - _ADAM_B2) * grad * grad, opt.step + 1)


def _adam_direction(opt: AdamState) -> np.ndarray:
    m_hat = opt.m / (1 - _ADAM_B1 ** opt.step)
    v_hat = opt.v / (1 - _ADAM_B2 ** opt.step)
    return m_hat / (np.sqrt(v_hat) + _ADAM_EPS)


def track_handle(F: np.ndarray, ref_vec: np.ndarray, p, r2: int,
                 margin: int = 0) -> tuple[tuple[int, int], np.ndarray]:
    """Nearest-feature search in the window around ``p``, clipped to the canvas shrunk by ``margin``.

    Ties go to the smallest L-inf distance from ``p``, then row-major order.
    Returns the new point and the window's distance map.
    """
    h, w = F.shape[-2:]
    py, px = p
    y0, y1 = max(margin, py - r2), min(h - margin, py + r2 + 1)
    x0, x1 = max(margin, px - r2), min(w - margin, px + r2 + 1)
    if y0 >= y1 or x0 >= x1:
        raise ValueError(f"empty tracking window around {p} with margin {margin}")
    dist = np.abs(F[:, y0:y1, x0:x1] - ref_vec[:, None, None]).sum(axis=0)
    ys, xs = np.nonzero(dist == dist.min())  # row-major order
    cheb = np.maximum(np.abs(ys + y0 - py), np.abs(xs + x0 - px))
    best = int(np.argmin(cheb))  # first minimum keeps row-major order among equals
    return (int(ys[best] + y0), int(xs[best] + x0)), dist


def tracking_reference(state: DragState, cfg: DragConfig, denoiser: Denoiser) -> np.ndarray:
    if cfg.track_reference == "inversion":
        return state.reference_features(state.trajectory.depth, denoiser)
    return state.reference_features(state.z.t, denoiser)


def track_points(state: DragState, cfg: DragConfig, denoiser: Denoiser) -> DragState:
    """Move each live handle to its best feature match; freeze handles that reach their target."""
    F = denoiser.forward(state.z.data, state.z.t)[1]
    if not np.all(np.isfinite(F)):
        raise DragAborted(f"non-finite features during tracking at k={state.k}",
                          {"k": state.k, "t": state.z.t, "handles": [list(h) for h in state.handles]})
    ref_F = tracking_reference(state, cfg, denoiser)
    handles = list(state.handles)
    frozen = list(state.frozen)
    diag = []
    for i, pair in enumerate(state.pairs):
        ref_vec = ref_F[:, pair.p[0], pair.p[1]]
        if frozen[i]:
            y, x = handles[i]
            diag.append({"drift": float(np.abs(F[:, y, x] - ref_vec).sum()), "heatmap_std": None})
            continue
        # keep handles where the supervision patch still fits on the canvas
        handles[i], dist = track_handle(F, ref_vec, handles[i], cfg.r2, margin=cfg.r1)
        diag.append({"drift": float(dist.min()), "heatmap_std": float(dist.std())})
    new = state.replace(handles=handles)
    new.frozen = [frozen[i] or new.distance_to_target(i) <= cfg.converge_radius
                  for i in range(len(handles))]
    new.log = state.log + [{"k": state.k, "t": state.z.t, "track": diag}]
    return new


@dataclass
class DragReport:
    mode: str
    variant: str
    config: dict
    records: list[dict] = field(default_factory=list)
    denoise_steps: list[dict] = field(default_factory=list)
    initial_handles: list[list[int]] = field(default_factory=list)
    final_handles: list[list[int]] = field(default_factory=list)
    targets: list[list[int]] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)
    metrics: dict[str, Any] = field(default_factory=dict)

    def drag_timesteps(self) -> list[int]:
        return [r["t"] for r in self.records]

    def denoise_count(self, phase: str | None = None) -> int:
        return sum(1 for d in self.denoise_steps if phase is None or d["phase"] == phase)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_inputs(source: Latent, pairs, mask: EditMask, cfg: DragConfig, sched: NoiseSchedule):
    if source.t != 0:
        raise TimestepError("drag sessions start from a clean latent")
    if cfg.T > sched.t_max:
        raise ValueError(f"T={cfg.T} exceeds schedule length {sched.t_max}")
    shape = source.shape[-2:]
    if mask.data.shape != shape:
        raise ValueError(f"mask shape {mask.data.shape} != latent shape {shape}")
    for pr in pairs:
        pr.check_inside(shape)


def _run(source: Latent, pairs, mask: EditMask, cfg: DragConfig, denoiser: Denoiser,
         sched: NoiseSchedule, variant: LossVariant, mode: ScheduleMode) -> tuple[Latent, DragReport]:
    pairs = tuple(pairs)
    _check_inputs(source, pairs, mask, cfg, sched)
    report = DragReport(mode, variant, cfg.to_dict(),
                        initial_handles=[list(p.p) for p in pairs], targets=[list(p.q) for p in pairs])
    traj = invert_trajectory(source, cfg.T, denoiser, sched)
    state = DragState.start(traj, pairs, cfg)
    try:
        for k in range(cfg.K):
            state.k = k
            t = state.z.t
            rec = {"k": k, "t": t, "handles_before": [list(h) for h in state.handles],
                   "live_handles": state.frozen.count(False)}
            # frozen handles drop out of the loss, but the drag still runs: with every
            # handle frozen the mask term alone keeps pulling the frozen region back
            n_log = len(state.log)
            state = motion_supervise(state, cfg, mask, denoiser, sched, variant)
            state = track_points(state, cfg, denoiser)
            rec.update(losses=state.log[n_log:-1], track=state.log[-1]["track"])
            rec["handles"] = [list(h) for h in state.handles]
            rec["frozen"] = list(state.frozen)
            report.records.append(rec)
            if mode == "gooddrag" and (k + 1) % cfg.B == 0:
                state = state.replace(z=ddim_denoise_step(state.z, denoiser, sched), opt=None)
                report.denoise_steps.append({"phase": "alternation", "after_k": k, "t_from": t, "t_to": t - 1})
    except DragAborted as exc:
        log.warning("drag session aborted: %s", exc)
        report.status, report.error, report.diagnostics = "aborted", str(exc), exc.diagnostics
        report.final_handles = [list(h) for h in state.handles]
        return state.z, report
    z = state.z
    while z.t > 0:
        report.denoise_steps.append({"phase": "tail", "t_from": z.t, "t_to": z.t - 1})
        z = ddim_denoise_step(z, denoiser, sched)
    report.final_handles = [list(h) for h in state.handles]
    return z, report


def run_gooddrag(source: Latent, pairs, mask: EditMask, cfg: DragConfig, denoiser: Denoiser,
                 sched: NoiseSchedule, variant: LossVariant = "ip") -> tuple[Latent, DragReport]:
    """Alternating drag and denoising: drag k happens at t = T - floor(k / B)."""
    return _run(source, pairs, mask, cfg, denoiser, sched, variant, "gooddrag")


def run_all_at_once(source: Latent, pairs, mask: EditMask, cfg: DragConfig, denoiser: Denoiser,
                    sched: NoiseSchedule, variant: LossVariant = "ip") -> tuple[Latent, DragReport]:
    """Every drag at t = T, then T denoising steps."""
    return _run(source, pairs, mask, cfg, denoiser, sched, variant, "all-at-once")


def run_session(source, pairs, mask, cfg, denoiser, sched, mode: ScheduleMode = "gooddrag",
                variant: LossVariant = "ip"):
    if mode not in ("gooddrag", "all-at-once"):
        raise ValueError(f"unknown schedule mode {mode!r}")
    return _run(source, pairs, mask, cfg, denoiser, sched, variant, mode)
