"""Parameter initialization."""

from __future__ import annotations

import zlib

import numpy as np


def fans(shape: tuple) -> tuple[int, int]:
    """(fan_in, fan_out) of a weight: (out, in) matrices or (out, in, k, k) filters."""
    if len(shape) < 2:
        return shape[0] if shape else 1, shape[0] if shape else 1
    receptive = int(np.prod(shape[2:], dtype=np.int64)) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_param(name: str, shape: tuple, init: tuple, seed: int = 42, dtype=np.float32) -> np.ndarray:
    """A fresh parameter.

    ``init`` is ``("xavier",)`` (uniform on +-sqrt(6/(fan_in+fan_out))),
    ``("const", v)`` or ``("gaussian", sd)``.  Each parameter draws from its
    own stream keyed by the seed and its name.
    """
    shape = tuple(shape)
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
    kind = init[0]
    if kind == "xavier":
        fan_in, fan_out = fans(shape)
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        a = rng.uniform(-bound, bound, shape)
    elif kind == "const":
        a = np.full(shape, init[1])
    elif kind == "gaussian":
        a = rng.normal(0.0, init[1], shape)
    else:
        raise ValueError(f"unknown initializer {kind!r}")
    # Draw at single precision so f32 and f64 runs start from the same values.
    return a.astype(np.float32).astype(dtype)
