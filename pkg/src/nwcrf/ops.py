"""Differentiable tensor operations.

Every function accepts Variables or plain arrays/scalars and returns a
Variable.  Spatial maps use a channels-last layout ``[..., H, W, C]`` with
an optional leading batch axis.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Variable, as_variable, emit
from .errors import DegenerateRowError, DomainError, ShapeError

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return emit(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return emit(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    av, bv = a.value, b.value
    return emit(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    av, bv = a.value, b.value
    out = av / bv
    return emit(out, (a, b),
                lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def neg(a) -> Variable:
    a = as_variable(a)
    return emit(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Variable:
    a = as_variable(a)
    out = np.exp(a.value)
    return emit(out, (a,), lambda g: (g * out,))


def log(a) -> Variable:
    a = as_variable(a)
    if np.any(a.value <= 0):
        raise DomainError("log of a nonpositive value")
    av = a.value
    return emit(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Variable:
    """Square root; the derivative at exactly zero is taken as zero."""
    a = as_variable(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.value)

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return emit(out, (a,), back)


def clip(a, lo: float | None = None, hi: float | None = None) -> Variable:
    a = as_variable(a)
    out = np.clip(a.value, lo, hi)
    inside = out == a.value
    return emit(out, (a,), lambda g: (g * inside,))


def sigmoid(a) -> Variable:
    a = as_variable(a)
    x = a.value
    # Split by sign so neither branch overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a) -> Variable:
    """Tanh-form GELU; odd part is exactly x/2, so gelu(x) - gelu(-x) == x."""
    a = as_variable(a)
    x = a.value
    u = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return emit(out, (a,), back)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(a, axis=None, keepdims: bool = False) -> Variable:  # noqa: A001 - mirrors numpy
    a = as_variable(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return emit(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Variable:
    a = as_variable(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape: Sequence[int]) -> Variable:
    a = as_variable(a)
    return emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Variable:
    a = as_variable(a)
    inv = np.argsort(axes)
    return emit(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence, axis: int = -1) -> Variable:
    parts = [as_variable(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return emit(out, parts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def slice_last(a, start: int, stop: int) -> Variable:
    """Channel slice ``a[..., start:stop]``."""
    a = as_variable(a)

    def back(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)

    return emit(a.value[..., start:stop], (a,), back)


def take(a, index: np.ndarray, axis: int) -> Variable:
    """Gather along ``axis``; index -1 yields zeros (padding slots)."""
    a = as_variable(a)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = np.take(a.value, safe, axis=axis)
    if not valid.all():
        shape = [1] * out.ndim
        shape[axis:axis + index.ndim] = index.shape
        out = out * valid.reshape(shape)

    def back(g):
        gm = np.moveaxis(g.reshape(g.shape[:axis] + (-1,) + g.shape[axis + index.ndim:]), axis, 0)
        full = np.zeros((a.shape[axis],) + gm.shape[1:])
        flat_idx = index.reshape(-1)
        keep = flat_idx >= 0
        np.add.at(full, flat_idx[keep], gm[keep])
        return (np.moveaxis(full, 0, axis),)

    return emit(out, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Variable:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_variable(a), as_variable(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul extents {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return emit(av @ bv, (a, b), back)


def softmax_rows(logits, mask: np.ndarray | None = None) -> Variable:
    """Softmax over the last axis; ``mask`` False entries get exactly zero weight."""
    logits = as_variable(logits)
    x = logits.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every entry masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return emit(out, (logits,), back)


def layer_norm(a, eps: float = 1e-5) -> Variable:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = as_variable(a)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        n = x.shape[-1]
        gy = g
        return (inv * (gy - gy.mean(axis=-1, keepdims=True)
                       - y * (gy * y).sum(axis=-1, keepdims=True) / n),)

    return emit(y, (a,), back)


# ---------------------------------------------------------------------------
# spatial operations


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [H, W, C] or [B, H, W, C], got {x.shape}")


def conv2d(x, kernel, bias=None, stride: int = 1) -> Variable:
    """2-D cross-correlation with zero padding ``k // 2`` (same extents at stride 1)."""
    x, kernel = as_variable(x), as_variable(kernel)
    xv, squeeze = _as_batched(x.value)
    kv = kernel.value
    if kv.ndim != 4 or kv.shape[0] != kv.shape[1] or kv.shape[0] % 2 == 0:
        raise ShapeError(f"kernel must be [k, k, Cin, Cout] with odd k, got {kv.shape}")
    kh, _, cin, cout = kv.shape
    if xv.shape[-1] != cin:
        raise ShapeError(f"input has {xv.shape[-1]} channels, kernel expects {cin}")
    inputs = [x, kernel]
    if bias is not None:
        bias = as_variable(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias extents {bias.shape} != ({cout},)")
        inputs.append(bias)
    pad = kh // 2
    n, h, w, _ = xv.shape
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    if kh == 1:
        xs = xv[:, ::stride, ::stride, :]
        out = xs @ kv[0, 0]
    else:
        xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kh), axis=(1, 2))
        win = win[:, ::stride, ::stride][:, :ho, :wo]  # [n, ho, wo, cin, kh, kw]
        out = np.tensordot(win, kv, axes=([3, 4, 5], [2, 0, 1]))
    if bias is not None:
        out = out + bias.value

    def back(g):
        g4 = g[None] if squeeze else g
        if kh == 1:
            gk = np.tensordot(xs, g4, axes=([0, 1, 2], [0, 1, 2]))[None, None]
            gx = np.zeros_like(xv)
            gx[:, ::stride, ::stride, :] = g4 @ kv[0, 0].T
        else:
            gk = np.tensordot(win, g4, axes=([0, 1, 2], [0, 1, 2]))  # [cin, kh, kw, cout]
            gk = np.transpose(gk, (1, 2, 0, 3))
            gxp = np.zeros_like(xp)
            for ky in range(kh):
                for kx in range(kh):
                    gxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :] += g4 @ kv[ky, kx].T
            gx = gxp[:, pad:pad + h, pad:pad + w, :]
        grads = [gx[0] if squeeze else gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 1, 2)))
        return grads

    return emit(out[0] if squeeze else out, inputs, back)


def pixel_rearrange(x) -> Variable:
    """Depth-to-space with block 2: out[2y+dy, 2x+dx, c] = in[y, x, 4c + 2dy + dx]."""
    x = as_variable(x)
    v = x.value
    if v.ndim < 3 or v.shape[-1] % 4:
        raise ShapeError(f"pixel_rearrange needs a channel count divisible by 4, got {v.shape}")
    *lead, h, w, d = v.shape
    c = d // 4
    nl = len(lead)
    fwd = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
    out = np.transpose(v.reshape(*lead, h, w, c, 2, 2), fwd).reshape(*lead, 2 * h, 2 * w, c)

    def back(g):
        gr = g.reshape(*lead, h, 2, w, 2, c)
        inv = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
        return (np.transpose(gr, inv).reshape(v.shape),)

    return emit(out, (x,), back)


def pixel_rearrange_inverse(x) -> Variable:
    """Space-to-depth with block 2; exact inverse of :func:`pixel_rearrange`."""
    x = as_variable(x)
    v = x.value
    if v.ndim < 3 or v.shape[-3] % 2 or v.shape[-2] % 2:
        raise ShapeError(f"space-to-depth needs even spatial extents, got {v.shape}")
    *lead, h2, w2, c = v.shape
    h, w = h2 // 2, w2 // 2
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    out = np.transpose(v.reshape(*lead, h, 2, w, 2, c), perm).reshape(*lead, h, w, 4 * c)

    def back(g):
        gr = g.reshape(*lead, h, w, c, 2, 2)
        inv = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
        return (np.transpose(gr, inv).reshape(v.shape),)

    return emit(out, (x,), back)


def _resample(x, rows: np.ndarray, cols: np.ndarray) -> Variable:
    """Separable linear map over the spatial axes: out = rows @ x @ cols.T per channel."""
    x = as_variable(x)
    out = np.einsum("iy,...yxc,jx->...ijc", rows, x.value, cols, optimize=True)
    return emit(out, (x,), lambda g: (np.einsum("iy,...ijc,jx->...yxc", rows, g, cols, optimize=True),))


def pool_matrix(n: int, s: int) -> np.ndarray:
    """Averaging weights for buckets floor(i*n/s) .. floor((i+1)*n/s)."""
    m = np.zeros((s, n))
    for i in range(s):
        lo, hi = (i * n) // s, ((i + 1) * n) // s
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def nearest_matrix(n_out: int, n_in: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), (np.arange(n_out) * n_in) // n_out] = 1.0
    return m


def avg_pool_to(x, s: int) -> Variable:
    """Adaptive average pooling of a [..., H, W, C] map onto an s x s grid."""
    x = as_variable(x)
    if x.ndim < 3:
        raise ShapeError(f"expected [..., H, W, C], got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if s < 1 or s > min(h, w):
        raise ShapeError(f"pool size {s} exceeds spatial extents {(h, w)}")
    return _resample(x, pool_matrix(h, s), pool_matrix(w, s))


def resize_nearest(x, h_out: int, w_out: int) -> Variable:
    x = as_variable(x)
    h, w = x.shape[-3], x.shape[-2]
    return _resample(x, nearest_matrix(h_out, h), nearest_matrix(w_out, w))


def linear(x, weight, bias=None) -> Variable:
    """Affine map over the last axis."""
    x, weight = as_variable(x), as_variable(weight)
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight) if x.ndim > 2 else matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[-1],)) if x.ndim > 2 else y
