"""Runtime API called once per IR statement.

Each operation takes the :class:`Context`, its operands (device tensors or
plain arrays such as parameters), literal hyperparameters and an optional
``out``: an operand to overwrite in place, or :data:`SCRATCH`.  It returns
a :class:`DeviceTensor` whose storage came from the pool.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .context import SCRATCH, Context
from .pool import DeviceTensor, ShapeFault

__all__ = [
    "SCRATCH", "arr", "to_device", "indicator", "flatten", "reshape", "conv", "conv_grad_data",
    "conv_grad_filter", "conv_grad_bias", "pool", "pool_grad", "relu", "relu_grad", "softmax",
    "softmax_grad", "dropout_mask", "dropout", "dropout_grad", "concat", "concat_grad", "matmul",
    "bias_add", "log", "recip", "scale", "add", "tensor", "clip_scale", "dot", "precision", "update",
    "release", "lrn",
]


def arr(x) -> np.ndarray:
    return x.data if isinstance(x, DeviceTensor) else np.asarray(x)


def _store(ctx: Context, value, out=None) -> DeviceTensor:
    value = np.asarray(value)
    t = ctx.alloc(value.shape, out)
    np.copyto(t.data, value, casting="unsafe")
    return t


def release(ctx: Context, t: DeviceTensor) -> None:
    ctx.release(t)


# ---------------------------------------------------------------- data movement and views


def to_device(ctx: Context, host) -> DeviceTensor:
    return _store(ctx, np.asarray(host, ctx.dtype))


def indicator(labels, classes: int, dtype=np.float32) -> np.ndarray:
    return K.one_hot(labels, classes, dtype)


def flatten(x, axis: int) -> np.ndarray:
    a = arr(x)
    return a.reshape(a.shape[:axis] + (-1,))


def reshape(x, shape) -> np.ndarray:
    return arr(x).reshape(shape)


# ---------------------------------------------------------------- convolution


def _conv_workspace(ctx: Context, xshape, k, stride, pad):
    ws = ctx.workspace(K.im2col_elems(xshape, k, stride, pad))
    if ws is None:
        ctx.direct_convs += 1
    else:
        ctx.im2col_convs += 1
    return ws


def conv(ctx: Context, x, W, B, stride: int, pad: int, out=None) -> DeviceTensor:
    x, W, B = arr(x), arr(W), arr(B)
    ws = _conv_workspace(ctx, x.shape, W.shape[2], stride, pad)
    if ws is None:
        y = K.conv_forward_direct(x, W, B, stride, pad)
    else:
        y = K.conv_forward_im2col(x, W, B, stride, pad, ws)
    return _store(ctx, y, out)


def conv_grad_data(ctx: Context, dy, W, xshape, stride: int, pad: int, out=None) -> DeviceTensor:
    dy, W = arr(dy), arr(W)
    if ctx.workspace(K.im2col_elems(xshape, W.shape[2], stride, pad)) is None:
        dx = K.conv_backward_data_direct(dy, W, xshape, stride, pad)
    else:
        dx = K.conv_backward_data_im2col(dy, W, xshape, stride, pad)
    return _store(ctx, dx, out)


def conv_grad_filter(ctx: Context, dy, x, wshape, stride: int, pad: int, out=None) -> DeviceTensor:
    dy, x = arr(dy), arr(x)
    ws = ctx.workspace(K.im2col_elems(x.shape, wshape[2], stride, pad))
    if ws is None:
        dw = K.conv_backward_filter_direct(dy, x, wshape, stride, pad)
    else:
        dw = K.conv_backward_filter_im2col(dy, x, wshape, stride, pad, ws)
    return _store(ctx, dw, out)


def conv_grad_bias(ctx: Context, dy, out=None) -> DeviceTensor:
    return _store(ctx, K.conv_backward_bias(arr(dy)), out)


# ---------------------------------------------------------------- layers


def pool(ctx: Context, x, k: int, stride: int, pad: int, is_max: bool, ceil_mode: bool = False,
         out=None) -> DeviceTensor:
    return _store(ctx, K.pool_forward(arr(x), k, stride, pad, is_max, ceil_mode), out)


def pool_grad(ctx: Context, dy, y, x, k: int, stride: int, pad: int, is_max: bool, ceil_mode: bool = False,
              out=None) -> DeviceTensor:
    dy = arr(dy).reshape(arr(y).shape)
    return _store(ctx, K.pool_backward(dy, arr(x), k, stride, pad, is_max, ceil_mode), out)


def relu(ctx: Context, x, out=None) -> DeviceTensor:
    return _store(ctx, K.relu(arr(x)), out)


def relu_grad(ctx: Context, dy, y, out=None) -> DeviceTensor:
    return _store(ctx, K.relu_backward(arr(dy), arr(y)), out)


def softmax(ctx: Context, x, out=None) -> DeviceTensor:
    return _store(ctx, K.softmax(arr(x)), out)


def softmax_grad(ctx: Context, dy, s, out=None) -> DeviceTensor:
    return _store(ctx, K.softmax_backward(arr(dy), arr(s)), out)


def dropout_mask(ctx: Context, shape, rate: float, salt: int, out=None) -> DeviceTensor:
    return _store(ctx, K.dropout_mask(tuple(shape), rate, ctx.seed, ctx.iteration, salt, ctx.dtype), out)


def dropout(ctx: Context, x, mask, out=None) -> DeviceTensor:
    return _store(ctx, arr(x) * arr(mask), out)


def dropout_grad(ctx: Context, dy, mask, out=None) -> DeviceTensor:
    return _store(ctx, arr(dy) * arr(mask), out)


def lrn(ctx: Context, x, *hyper, out=None) -> DeviceTensor:
    raise NotImplementedError("local response normalization has no execution kernel (analysis only)")


def concat(ctx: Context, *xs, out=None) -> DeviceTensor:
    return _store(ctx, K.concat([arr(x) for x in xs]), out)


def concat_grad(ctx: Context, dy, start: int, end: int, out=None) -> DeviceTensor:
    return _store(ctx, K.concat_backward(arr(dy), start, end), out)


# ---------------------------------------------------------------- vectorized forms


def matmul(ctx: Context, a, b, a_axis: int, b_axis: int, out=None) -> DeviceTensor:
    return _store(ctx, K.matmul(arr(a), arr(b), a_axis, b_axis), out)


def bias_add(ctx: Context, a, b, out=None) -> DeviceTensor:
    return _store(ctx, arr(a) + arr(b), out)


def log(ctx: Context, x, out=None) -> DeviceTensor:
    return _store(ctx, K.safe_log(arr(x)), out)


def recip(ctx: Context, x, out=None) -> DeviceTensor:
    return _store(ctx, 1.0 / arr(x), out)


def scale(ctx: Context, x, factor: float, out=None) -> DeviceTensor:
    return _store(ctx, arr(x) * factor, out)


def add(ctx: Context, a, b, out=None) -> DeviceTensor:
    a, b = arr(a), arr(b)
    if a.shape != b.shape:
        raise ShapeFault(f"elementwise add of {a.shape} and {b.shape}")
    return _store(ctx, a + b, out)


def tensor(ctx: Context, shape, value, out=None) -> DeviceTensor:
    """Materialize an indexed expression evaluated on the index grid."""
    value = np.broadcast_to(np.asarray(value), tuple(shape))
    return _store(ctx, value, out)


# ---------------------------------------------------------------- scalars and updates


def clip_scale(ctx: Context, clip: float, lambdas, *tensors, out=None) -> DeviceTensor:
    return _store(ctx, np.asarray(K.clip_scale(clip, lambdas, [arr(t) for t in tensors])), out)


def dot(a, b) -> float:
    return float(np.sum(arr(a) * arr(b), dtype=np.float64))


def precision(pred, labels) -> float:
    return K.precision(arr(pred), arr(labels))


def update(target: np.ndarray, g, alpha: float, beta: float, decay: float = 0.0, decay_of=None,
           scale=None) -> None:
    s = 1.0 if scale is None else float(arr(scale))
    K.update(target, arr(g), alpha, beta, decay, None if decay_of is None else arr(decay_of), s)
