import numpy as np

from dragbench import ops
from dragbench.drag import supervised_center


def central_difference(f, x, v, h=1e-3):
    return (f(x + h * v) - f(x - h * v)) / (2 * h)


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


class ConstantEps:
    """Denoiser stub whose prediction ignores z and t."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    def predict_eps(self, z, t):
        return np.broadcast_to(self.value, z.shape).copy()


def brute_force_track(F, ref_vec, p, r2, margin=0):
    h, w = F.shape[-2:]
    cands = []
    for y in range(p[0] - r2, p[0] + r2 + 1):
        for x in range(p[1] - r2, p[1] + r2 + 1):
            if margin <= y < h - margin and margin <= x < w - margin:
                d = sum(abs(F[c, y, x] - ref_vec[c]) for c in range(F.shape[0]))
                cands.append((d, max(abs(y - p[0]), abs(x - p[1])), y, x))
    best = min(cands)
    return best[2], best[3]


def loss_oracle(z, t, state, cfg, mask, den, sched, variant, frozen_ref):
    """Independent evaluation of the motion loss with the stop-gradient references held fixed."""
    eps, F, _ = den.forward(z, t)
    total = 0.0
    for i, pair in enumerate(state.pairs):
        if state.frozen[i]:
            continue
        c = supervised_center(state.handles[i], pair.q, cfg.beta)
        total += np.abs(ops.sample_patch(F, c, cfg.r1) - frozen_ref[i]).sum()
    a_t, a_p = sched.alpha(t), sched.alpha(t - 1)
    z_prev = np.sqrt(a_p) * (z - np.sqrt(1 - a_t) * eps) / np.sqrt(a_t) + np.sqrt(1 - a_p) * eps
    total += cfg.lam * np.abs((z_prev - state.trajectory[t - 1].data) * (1 - mask.data)).sum()
    return total


def probe_vjp(den, z, t, rng, n_probes, with_features=True):
    eps, feats, _ = den.forward(z, t)
    ce = rng.standard_normal(eps.shape)
    cf = rng.standard_normal(feats.shape) if with_features else None

    def f(x):
        e, F, _ = den.forward(x, t)
        out = (ce * e).sum()
        if with_features:
            out += (cf * F).sum()
        return out

    g = den.vjp(z, t, ce, cf)
    errs = []
    for _ in range(n_probes):
        v = rng.standard_normal(z.shape)
        errs.append(relative_error(central_difference(f, z, v), (g * v).sum()))
    return max(errs)


# one line per acceptance criterion, printed in the terminal summary by conftest
ACCEPTANCE: list[str] = []


def check(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert passed, line
