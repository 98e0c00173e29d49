"""Shape rules for every layer kind.

Shapes are plain tuples of extents, batch-major (NCHW for rank 4).  The rules
here are pure functions of hyperparameters and operand shapes; the tree walk
that applies them lives in :mod:`tensorc.infer`.
"""

from __future__ import annotations

import math

from .errors import NonPositiveExtent, ShapeMismatch

Shape = tuple[int, ...]

ELEMENTWISE = {"ReLU", "Dropout", "DropoutMask", "LRN"}


def numel(shape: Shape) -> int:
    return math.prod(shape)


def nbytes(shape: Shape, elem_bytes: int = 4) -> int:
    return elem_bytes * numel(shape)


def window_extent(n: int, k: int, stride: int, pad: int, ceil_mode: bool = False, site: str = "?") -> int:
    """Output extent of a sliding window; floor division unless ``ceil_mode``."""
    span = n + 2 * pad - k
    out = (-(-span // stride) if ceil_mode else span // stride) + 1
    if span < 0 or out < 1:
        raise NonPositiveExtent(site, ">= 1", out, detail=f"input {n}, kernel {k}, stride {stride}, pad {pad}")
    return out


def _rank(site: str, shape: Shape, rank: int) -> None:
    if len(shape) != rank:
        raise ShapeMismatch(site, f"rank {rank}", f"rank {len(shape)} {shape}")


def shape_rule(kind: str, hyper: tuple, inputs: list[Shape], site: str | None = None) -> Shape:
    """Output shape of ``kind`` applied to operands with shapes ``inputs``.

    Convolution operands are (input, filter, bias); the filter and bias shapes
    are checked when given.  ``full`` is not a primitive (fully connected
    layers lower to indexed contractions) but the rule is kept here so callers
    can ask for its output shape directly.
    """
    site = site or kind
    if kind == "Convolv":
        stride, pad = hyper[0], hyper[1]
        x = inputs[0]
        _rank(site, x, 4)
        w = inputs[1]
        _rank(site, w, 4)
        if w[1] != x[1]:
            raise ShapeMismatch(site, f"filter in-channels {x[1]}", w[1])
        if w[2] != w[3]:
            raise ShapeMismatch(site, "square filter", w[2:])
        if len(inputs) > 2 and inputs[2] != (w[0],):
            raise ShapeMismatch(site, f"bias {(w[0],)}", inputs[2])
        k = w[2]
        return (x[0], w[0], window_extent(x[2], k, stride, pad, site=site), window_extent(x[3], k, stride, pad, site=site))
    if kind == "Pooling":
        k, stride, pad = hyper[0], hyper[1], hyper[2]
        ceil_mode = len(hyper) > 4 and bool(hyper[4])
        x = inputs[0]
        _rank(site, x, 4)
        return (x[0], x[1], window_extent(x[2], k, stride, pad, ceil_mode, site),
                window_extent(x[3], k, stride, pad, ceil_mode, site))
    if kind == "ReLU":
        if hyper and hyper[0]:
            _rank(site, inputs[0], hyper[0])
        return inputs[0]
    if kind == "Softmax":
        _rank(site, inputs[0], 2)
        return inputs[0]
    if kind in ("Dropout", "DropoutMask"):
        if kind == "Dropout" and len(inputs) > 1 and inputs[1] != inputs[0]:
            raise ShapeMismatch(site, inputs[0], inputs[1])
        return inputs[0]
    if kind == "LRN":
        _rank(site, inputs[0], 4)
        return inputs[0]
    if kind == "Concat":
        if not inputs:
            raise ShapeMismatch(site, "at least one branch", 0)
        first = inputs[0]
        _rank(site, first, 4)
        channels = 0
        for s in inputs:
            _rank(site, s, 4)
            if (s[0],) + s[2:] != (first[0],) + first[2:]:
                raise ShapeMismatch(site, f"branch dims (N,H,W)={(first[0],) + first[2:]}",
                                    (s[0],) + s[2:], detail="concat branches must agree off the channel axis")
            channels += s[1]
        return (first[0], channels) + first[2:]
    if kind == "full":
        x = inputs[0]
        _rank(site, x, 2)
        return (x[0], hyper[0])
    if kind == "Flatten":
        rank, axis = hyper
        x = inputs[0]
        _rank(site, x, rank)
        return x[:axis] + (numel(x[axis:]),)
    if kind == "ClipScale":  # global gradient-norm factor: a scalar
        return ()
    raise ValueError(f"no shape rule for {kind!r}")
