"""Execution context: pool, convolution workspace, precision, seed.

One context owns every tensor of a running program.  It may be handed
from one thread to another but must not be used by two at once.
"""

from __future__ import annotations

import math

import numpy as np

from .pool import DeviceTensor, MemoryPool

# Passed as ``out=`` to a kernel whose result is consumed immediately by a
# parameter update; the buffer is not taken from the pool.
SCRATCH = object()


class Context:
    def __init__(self, mode: str = "dealloc", dtype=np.float32, workspace_bytes: int | None = None,
                 seed: int = 42, pool_cap_bytes: int | None = None):
        self.dtype = np.dtype(dtype)
        self.pool = MemoryPool(mode, self.dtype, pool_cap_bytes)
        self.seed = int(seed)
        self.iteration = 0
        # None means "as large as any convolution needs"; 0 forces direct convolution.
        self.workspace_bytes = workspace_bytes
        self._workspace: np.ndarray | None = None
        self.direct_convs = 0
        self.im2col_convs = 0

    @property
    def mode(self) -> str:
        return self.pool.mode

    # -- allocation

    def alloc(self, shape, out=None) -> DeviceTensor:
        """Storage for a result of ``shape``.

        ``out`` may be an operand whose storage is taken over (in-place
        execution) or :data:`SCRATCH` for an untracked temporary.
        """
        shape = tuple(int(d) for d in shape)
        if out is SCRATCH:
            return DeviceTensor(shape, np.empty(shape, self.dtype))
        if isinstance(out, DeviceTensor):
            if out.shape != shape:
                raise ValueError(f"in-place target has shape {out.shape}, result needs {shape}")
            return DeviceTensor(shape, out.data, out.block, alias=True)
        n = math.prod(shape)
        block = self.pool.acquire(4 * n)
        view = block.buf[:n].reshape(shape)
        return DeviceTensor(shape, view, block)

    def release(self, t: DeviceTensor) -> None:
        if t.block is not None:
            self.pool.release(t.block)
            t.block = None

    def to_device(self, host) -> DeviceTensor:
        host = np.asarray(host)
        t = self.alloc(host.shape)
        t.data[...] = host
        return t

    def workspace(self, elems: int) -> np.ndarray | None:
        """A flat buffer of ``elems`` elements, or None when over the cap."""
        if self.workspace_bytes is not None and 4 * elems > self.workspace_bytes:
            return None
        if self._workspace is None or self._workspace.size < elems:
            self._workspace = np.empty(elems, self.dtype)
        return self._workspace[:elems]
