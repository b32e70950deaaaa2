"""Array primitives with hand-written adjoints.

Every forward op here has a matching ``*_vjp`` that maps an output cotangent
back to input cotangents. Convolutions are 3x3, stride 1, zero "same" padding,
on batched (N, C, H, W) float64 arrays.
"""

from __future__ import annotations

import numpy as np


class PatchBoundsError(ValueError):
    pass


def _cols(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C*9, N*H*W) column matrix of zero-padded 3x3 taps."""
    n, c, h, w = x.shape
    xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, n, h, w))
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, n * h * w)


def _to_nchw(y: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return y.reshape(-1, n, h, w).transpose(1, 0, 2, 3)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation with (O, C, 3, 3) weights."""
    n, _, h, w = x.shape
    out = weight.reshape(weight.shape[0], -1) @ _cols(x)
    if bias is not None:
        out += bias[:, None]
    return _to_nchw(out, n, h, w)


def conv2d_vjp(x: np.ndarray, weight: np.ndarray, gout: np.ndarray, need_input: bool = True,
               need_weight: bool = True):
    """Returns (grad_x, grad_weight, grad_bias) for ``conv2d``; skipped parts are None."""
    gw = gb = gx = None
    if need_weight:
        o = weight.shape[0]
        g2 = gout.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ _cols(x).T).reshape(weight.shape)
        gb = g2.sum(axis=1)
    if need_input:
        # adjoint of same-padded correlation = same-padded correlation with
        # the spatially flipped, channel-transposed kernel
        flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = conv2d(gout, flipped)
    return gx, gw, gb


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def timestep_embedding(t: float, dim: int = 8, max_period: float = 1000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D bilinear resampling matrix (align-corners convention)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def resize_bilinear(f: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize (..., h, w) to (..., H, W); identity when sizes already match."""
    h, w = f.shape[-2:]
    if (h, w) == tuple(size):
        return f
    rh, rw = interp_matrix(size[0], h), interp_matrix(size[1], w)
    return rh @ f @ rw.T


def resize_bilinear_vjp(g: np.ndarray, in_size: tuple[int, int]) -> np.ndarray:
    H, W = g.shape[-2:]
    if (H, W) == tuple(in_size):
        return g
    rh, rw = interp_matrix(H, in_size[0]), interp_matrix(W, in_size[1])
    return rh.T @ g @ rw


def _patch_corners(shape: tuple[int, int], center, r: int):
    h, w = shape
    y, x = float(center[0]), float(center[1])
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    fy, fx = y - y0, x - x0
    y_hi = y0 + (1 if fy > 0 else 0) + r
    x_hi = x0 + (1 if fx > 0 else 0) + r
    if y0 - r < 0 or x0 - r < 0 or y_hi > h - 1 or x_hi > w - 1:
        raise PatchBoundsError(f"patch at ({y:.2f}, {x:.2f}) radius {r} leaves {h}x{w} grid")
    return y0, x0, fy, fx


def sample_patch(f: np.ndarray, center, r: int) -> np.ndarray:
    """Bilinear samples of (D, H, W) ``f`` on the (2r+1)^2 grid around a fractional (row, col)."""
    y0, x0, fy, fx = _patch_corners(f.shape[-2:], center, r)
    s = 2 * r + 1
    ys, xs = slice(y0 - r, y0 - r + s), slice(x0 - r, x0 - r + s)
    out = (1 - fy) * (1 - fx) * f[:, ys, xs]
    if fx > 0:
        out = out + (1 - fy) * fx * f[:, ys, x0 - r + 1:x0 - r + 1 + s]
    if fy > 0:
        out = out + fy * (1 - fx) * f[:, y0 - r + 1:y0 - r + 1 + s, xs]
        if fx > 0:
            out = out + fy * fx * f[:, y0 - r + 1:y0 - r + 1 + s, x0 - r + 1:x0 - r + 1 + s]
    return out


def sample_patch_vjp(g: np.ndarray, shape: tuple[int, ...], center, r: int) -> np.ndarray:
    """Scatter a patch cotangent back onto a zero (D, H, W) grid."""
    y0, x0, fy, fx = _patch_corners(shape[-2:], center, r)
    s = 2 * r + 1
    out = np.zeros(shape)
    ys, xs = slice(y0 - r, y0 - r + s), slice(x0 - r, x0 - r + s)
    ys1, xs1 = slice(y0 - r + 1, y0 - r + 1 + s), slice(x0 - r + 1, x0 - r + 1 + s)
    out[:, ys, xs] += (1 - fy) * (1 - fx) * g
    if fx > 0:
        out[:, ys, xs1] += (1 - fy) * fx * g
    if fy > 0:
        out[:, ys1, xs] += fy * (1 - fx) * g
        if fx > 0:
            out[:, ys1, xs1] += fy * fx * g
    return out
