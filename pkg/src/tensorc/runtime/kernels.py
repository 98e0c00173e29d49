"""Numerical kernels on plain numpy arrays (NCHW layout).

These are pure functions: they read their operands and return or fill a
result array.  Allocation, in-place execution and the workspace buffer are
handled by :mod:`tensorc.runtime.ops`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .pool import ShapeFault

LOG_FLOOR = 1e-30


def conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int, value: float = 0.0, extra: tuple[int, int] = (0, 0)) -> np.ndarray:
    if pad == 0 and extra == (0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad + extra[0]), (pad, pad + extra[1])), constant_values=value)


# ---------------------------------------------------------------- convolution


def im2col_elems(xshape, k: int, stride: int, pad: int) -> int:
    n, c, h, w = xshape
    return n * c * k * k * conv_out(h, k, stride, pad) * conv_out(w, k, stride, pad)


def im2col(x: np.ndarray, k: int, stride: int, pad: int, out: np.ndarray | None = None) -> np.ndarray:
    """Patches of ``x`` as columns: (N, C*k*k, Ho*Wo)."""
    n, c, h, w = x.shape
    ho, wo = conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)
    win = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3)  # N, C, k, k, Ho, Wo
    if out is None:
        out = np.empty(n * c * k * k * ho * wo, x.dtype)
    out = out.reshape(n, c, k, k, ho, wo)
    out[...] = cols
    return out.reshape(n, c * k * k, ho * wo)


def col2im(cols: np.ndarray, xshape, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = xshape
    ho, wo = conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), cols.dtype)
    for di in range(k):
        for dj in range(k):
            xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += cols[:, :, di, dj]
    return xp[:, :, pad:pad + h, pad:pad + w]


def _check_conv(x, W, B=None):
    if x.ndim != 4 or W.ndim != 4 or x.shape[1] != W.shape[1]:
        raise ShapeFault(f"convolution of {x.shape} with filter {W.shape}")
    if B is not None and B.shape != (W.shape[0],):
        raise ShapeFault(f"convolution bias {B.shape} for filter {W.shape}")


def conv_forward_im2col(x, W, B, stride: int, pad: int, workspace: np.ndarray | None = None) -> np.ndarray:
    _check_conv(x, W, B)
    n, _, h, w = x.shape
    o, _, k, _ = W.shape
    ho, wo = conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)
    cols = im2col(x, k, stride, pad, workspace)
    y = np.matmul(W.reshape(o, -1), cols)  # N, O, Ho*Wo
    y = y.reshape(n, o, ho, wo)
    if B is not None:
        y += B.reshape(1, o, 1, 1)
    return y


def conv_forward_direct(x, W, B, stride: int, pad: int) -> np.ndarray:
    """Convolution by accumulating one filter tap at a time (no patch buffer)."""
    _check_conv(x, W, B)
    n, _, h, w = x.shape
    o, _, k, _ = W.shape
    ho, wo = conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)
    xp = _pad(x, pad)
    y = np.zeros((n, o, ho, wo), np.result_type(x, W))
    for di in range(k):
        for dj in range(k):
            tap = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            y += np.einsum("nchw,oc->nohw", tap, W[:, :, di, dj], optimize=True)
    if B is not None:
        y += B.reshape(1, o, 1, 1)
    return y


def conv_backward_data_im2col(dy, W, xshape, stride: int, pad: int) -> np.ndarray:
    n, o, ho, wo = dy.shape
    k = W.shape[2]
    cols = np.matmul(W.reshape(o, -1).T, dy.reshape(n, o, ho * wo))
    return col2im(cols, xshape, k, stride, pad)


def conv_backward_data_direct(dy, W, xshape, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = xshape
    _, _, ho, wo = dy.shape
    k = W.shape[2]
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), np.result_type(dy, W))
    for di in range(k):
        for dj in range(k):
            xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += np.einsum(
                "nohw,oc->nchw", dy, W[:, :, di, dj], optimize=True)
    return xp[:, :, pad:pad + h, pad:pad + w]


def conv_backward_filter_im2col(dy, x, wshape, stride: int, pad: int, workspace: np.ndarray | None = None):
    n, o, ho, wo = dy.shape
    k = wshape[2]
    cols = im2col(x, k, stride, pad, workspace)
    dw = np.einsum("nop,nfp->of", dy.reshape(n, o, ho * wo), cols, optimize=True)
    return dw.reshape(wshape)


def conv_backward_filter_direct(dy, x, wshape, stride: int, pad: int) -> np.ndarray:
    _, _, ho, wo = dy.shape
    k = wshape[2]
    xp = _pad(x, pad)
    dw = np.zeros(wshape, np.result_type(dy, x))
    for di in range(k):
        for dj in range(k):
            tap = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            dw[:, :, di, dj] = np.einsum("nohw,nchw->oc", dy, tap, optimize=True)
    return dw


def conv_backward_bias(dy) -> np.ndarray:
    return dy.sum(axis=(0, 2, 3))


# ---------------------------------------------------------------- pooling


def _pool_geometry(shape, k, stride, pad, ceil_mode):
    _, _, h, w = shape
    if ceil_mode:
        ho = -(-(h + 2 * pad - k) // stride) + 1
        wo = -(-(w + 2 * pad - k) // stride) + 1
    else:
        ho, wo = conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)
    extra = (max(0, (ho - 1) * stride + k - h - 2 * pad), max(0, (wo - 1) * stride + k - w - 2 * pad))
    return ho, wo, extra


def _windows(x, k, stride, pad, ceil_mode, fill):
    ho, wo, extra = _pool_geometry(x.shape, k, stride, pad, ceil_mode)
    xp = _pad(x, pad, fill, extra)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.reshape(win.shape[:4] + (k * k,))


def pool_forward(x, k: int, stride: int, pad: int, is_max: bool, ceil_mode: bool = False) -> np.ndarray:
    if is_max:
        return _windows(x, k, stride, pad, ceil_mode, -np.inf).max(axis=-1)
    return _windows(x, k, stride, pad, ceil_mode, 0.0).sum(axis=-1) / (k * k)


def pool_backward(dy, x, k: int, stride: int, pad: int, is_max: bool, ceil_mode: bool = False) -> np.ndarray:
    """Gradient for the pooling input.

    Max pooling routes each output gradient to the first maximal element of
    its window in row-major order; average pooling spreads it over the k*k
    window (padding included in the divisor).
    """
    n, c, h, w = x.shape
    ho, wo, extra = _pool_geometry(x.shape, k, stride, pad, ceil_mode)
    dxp = np.zeros((n, c, h + 2 * pad + extra[0], w + 2 * pad + extra[1]), dy.dtype)
    if is_max:
        arg = _windows(x, k, stride, pad, ceil_mode, -np.inf).argmax(axis=-1)
    for di in range(k):
        for dj in range(k):
            sl = (slice(None), slice(None), slice(di, di + stride * ho, stride), slice(dj, dj + stride * wo, stride))
            if is_max:
                dxp[sl] += np.where(arg == di * k + dj, dy, 0)
            else:
                dxp[sl] += dy / (k * k)
    return dxp[:, :, pad:pad + h, pad:pad + w]


# ---------------------------------------------------------------- elementwise and rows


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy, y) -> np.ndarray:
    return np.where(y > 0, dy, 0)


def softmax(x) -> np.ndarray:
    """Row-wise softmax of a (N, K) array, max-subtracted."""
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_backward(dy, s) -> np.ndarray:
    return s * (dy - (dy * s).sum(axis=1, keepdims=True))


def safe_log(x) -> np.ndarray:
    return np.log(np.maximum(x, LOG_FLOOR))


def dropout_mask(shape, rate: float, seed: int, iteration: int, salt: int, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate).

    The stream is a Philox generator keyed by (seed, iteration, salt), so any
    two programs running the same iteration draw the same mask.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, iteration, salt])))
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def one_hot(labels, classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeFault(f"label outside [0, {classes})")
    out = np.zeros(labels.shape + (classes,), dtype)
    np.put_along_axis(out, labels[..., None], 1, axis=-1)
    return out


def concat(xs) -> np.ndarray:
    return np.concatenate(xs, axis=1)


def concat_backward(dy, start: int, end: int) -> np.ndarray:
    return dy[:, start:end]


def matmul(a, b, a_axis: int, b_axis: int) -> np.ndarray:
    """Contract axis ``a_axis`` of rank-2 ``a`` with axis ``b_axis`` of ``b``."""
    if a.shape[a_axis] != b.shape[b_axis]:
        raise ShapeFault(f"matmul of {a.shape}[{a_axis}] with {b.shape}[{b_axis}]")
    lhs = a.T if a_axis == 0 else a
    rhs = b if b_axis == 0 else b.T
    return lhs @ rhs


def precision(pred, labels) -> float:
    """Fraction of rows whose argmax agrees between predictions and one-hot labels."""
    return float(np.mean(np.argmax(pred, axis=1) == np.argmax(labels, axis=1)))


def clip_scale(clip: float, lambdas, tensors) -> float:
    """``min(1, clip / ||g + lambda p||)`` over all (gradient, parameter) pairs."""
    total = 0.0
    for lam, (g, p) in zip(lambdas, zip(tensors[0::2], tensors[1::2])):
        d = np.asarray(g, np.float64) + lam * np.asarray(p, np.float64)
        total += float(np.sum(d * d))
    norm = np.sqrt(total)
    return 1.0 if norm <= clip else float(clip / norm)


def update(target: np.ndarray, g, alpha: float, beta: float, decay: float = 0.0, decay_of=None,
           scale: float = 1.0) -> None:
    """``target <- beta * target + alpha * scale * (g + decay * decay_of)``, in place."""
    step = np.asarray(g)
    if decay and decay_of is not None:
        step = step + decay * np.asarray(decay_of)
    if beta != 1.0:
        target *= beta
    target += (alpha * scale) * step


# ---------------------------------------------------------------- indexed expressions


def bc(a, axes: tuple, ndim: int) -> np.ndarray:
    """Place the axes of ``a`` at grid positions ``axes`` of an ``ndim`` grid.

    The result has extent 1 on every grid axis ``a`` does not use, so it
    broadcasts against other operands on the same grid.  A grid position
    listed twice takes the diagonal.
    """
    a = np.asarray(a)
    if len(axes) != a.ndim:
        raise ShapeFault(f"{a.ndim}-d operand indexed by {len(axes)} indices")
    used = sorted(set(axes))
    if list(axes) != used:
        a = np.einsum(a, list(axes), used)
    shape = [1] * ndim
    for pos, d in zip(used, a.shape):
        shape[pos] = d
    return a.reshape(shape)


def delta(i: int, j: int, ni: int, nj: int, ndim: int, dtype=np.float32) -> np.ndarray:
    """Kronecker delta of grid positions ``i`` and ``j`` as a broadcastable array."""
    ai = np.arange(ni).reshape([ni if p == i else 1 for p in range(ndim)])
    aj = np.arange(nj).reshape([nj if p == j else 1 for p in range(ndim)])
    return (ai == aj).astype(dtype)


def gsum(a, extent: int, ndim: int):
    """Sum over the last axis of an ``ndim + 1`` grid (the innermost summation index)."""
    a = np.asarray(a)
    if a.ndim == 0:
        return a * extent
    if a.shape[-1] == 1 and extent != 1:
        return a[..., 0] * extent
    return a.sum(axis=-1)


def gt(a, b):
    """1 where ``a > b`` else 0, in the operands' floating type."""
    r = np.greater(a, b)
    dt = np.result_type(a, b)
    return r.astype(dt if np.issubdtype(dt, np.floating) else np.float32)
