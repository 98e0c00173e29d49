"""Device tensors and the block pool that backs them.

Every temporary produced while running a body is carved out of a block
obtained from :class:`MemoryPool`.  In ``reuse`` mode released blocks stay
in a size-keyed free list and later requests are served best-fit from it;
in ``dealloc`` mode a released block is dropped immediately, so the free
list is always empty and every request is a fresh allocation.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np


class PoolExhausted(MemoryError):
    """A fresh allocation would exceed the configured hard cap."""


class ShapeFault(ValueError):
    """A kernel received operands whose shapes it cannot combine."""


@dataclass(eq=False)
class Block:
    """A flat buffer of ``nbytes`` bytes (``buf`` holds it as elements)."""

    buf: np.ndarray
    nbytes: int
    ident: int


@dataclass(eq=False)
class DeviceTensor:
    """A shaped view over (a prefix of) a pool block.

    ``alias`` is set when the tensor took over the storage of an operand
    (in-place execution); the operand must not be used afterwards.
    """

    shape: tuple
    data: np.ndarray
    block: Block | None = None
    alias: bool = False

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


@dataclass
class MemoryPool:
    mode: str = "dealloc"
    dtype: np.dtype = np.dtype(np.float32)
    cap_bytes: int | None = None
    free: list = field(default_factory=list)  # sorted (nbytes, ident, Block)
    allocs_from_os: int = 0
    reuses: int = 0
    releases: int = 0
    os_bytes: int = 0
    live_bytes: int = 0
    peak_bytes: int = 0
    _ids: int = 0

    def __post_init__(self):
        if self.mode not in ("dealloc", "reuse"):
            raise ValueError(f"pool mode must be 'dealloc' or 'reuse', not {self.mode!r}")
        self.dtype = np.dtype(self.dtype)

    def acquire(self, nbytes: int) -> Block:
        """Smallest free block of at least ``nbytes``, else a fresh one."""
        k = bisect.bisect_left(self.free, (nbytes, -1))
        if k < len(self.free):
            _, _, block = self.free.pop(k)
            self.reuses += 1
        else:
            if self.cap_bytes is not None and self.os_bytes + nbytes > self.cap_bytes:
                raise PoolExhausted(f"allocating {nbytes} bytes would exceed the pool cap of {self.cap_bytes}")
            self._ids += 1
            # Sizes are accounted at 4 bytes per element whatever the element
            # type, so a double-precision run follows the same plan.
            elems = math.ceil(nbytes / 4)
            block = Block(np.empty(elems, self.dtype), nbytes, self._ids)
            self.allocs_from_os += 1
            self.os_bytes += nbytes
        self.live_bytes += block.nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        return block

    def release(self, block: Block) -> None:
        self.releases += 1
        self.live_bytes -= block.nbytes
        if self.mode == "reuse":
            bisect.insort(self.free, (block.nbytes, block.ident, block))
        else:
            self.os_bytes -= block.nbytes

    @property
    def free_bytes(self) -> int:
        return sum(b.nbytes for _, _, b in self.free)

    def stats(self) -> dict:
        return {"mode": self.mode, "allocs_from_os": self.allocs_from_os, "reuses": self.reuses,
                "releases": self.releases, "live_bytes": self.live_bytes, "peak_bytes": self.peak_bytes,
                "free_blocks": len(self.free)}
