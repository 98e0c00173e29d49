"""Static memory analysis of a compiled body.

Two running totals are kept per statement:

* dealloc mode: allocations add, ``Dealloc`` subtracts;
* reuse mode: a best-fit pool is simulated; freed blocks go back to the pool
  and later allocations are served from it when a block is large enough, so
  the total only counts bytes requested from the system and never decreases.

Byte counts are exact integers; the MB columns are ``float32(bytes / 1e6)``,
which is how the six-decimal figures of the reference table come out
(36.768002, 39.408001, ...).  Parameter, velocity and convolution workspace
memory are reported separately.
"""

from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import ir
from .shapes import nbytes

HEADER = ("IR expression", "Dimensions", "Current mem", "Total", "w/o dealloc")


def mb(nbytes_: int) -> float:
    """Bytes to MB (1e6 bytes) at single precision, as displayed."""
    return float(np.float32(nbytes_ / 1e6))


@dataclass
class MemoryRow:
    stmt: str
    dims: tuple | None
    delta_bytes: int
    total_dealloc_bytes: int
    total_reuse_bytes: int

    @property
    def delta_mb(self) -> float:
        return mb(self.delta_bytes)

    @property
    def total_dealloc_mb(self) -> float:
        return mb(self.total_dealloc_bytes)

    @property
    def total_reuse_mb(self) -> float:
        return mb(self.total_reuse_bytes)

    @property
    def dims_text(self) -> str:
        return "" if self.dims is None else " ".join(str(d) for d in self.dims)


@dataclass
class MemoryReport:
    rows: list[MemoryRow] = field(default_factory=list)
    peak_dealloc_bytes: int = 0
    peak_reuse_bytes: int = 0
    param_bytes: int = 0
    workspace_bytes: int = 0
    direct_convs: list[str] = field(default_factory=list)

    @property
    def peak_dealloc_mb(self) -> float:
        return mb(self.peak_dealloc_bytes)

    @property
    def peak_reuse_mb(self) -> float:
        return mb(self.peak_reuse_bytes)

    @property
    def param_mb(self) -> float:
        return self.param_bytes / 1e6

    @property
    def workspace_mb(self) -> float:
        return self.workspace_bytes / 1e6

    def grand_total_mb(self, mode: str) -> float:
        peak = self.peak_reuse_bytes if mode == "reuse" else self.peak_dealloc_bytes
        return (peak + self.param_bytes + self.workspace_bytes) / 1e6

    def text(self) -> str:
        return format_table(self)

    def csv(self) -> str:
        return format_csv(self)


class BestFitPool:
    """Size-keyed free list; ``acquire`` returns the smallest block that fits."""

    def __init__(self):
        self.free: list[tuple[int, int]] = []  # (size, block id), sorted
        self.os_bytes = 0
        self._ids = 0

    def acquire(self, size: int) -> tuple[int, int]:
        k = bisect.bisect_left(self.free, (size, -1))
        if k < len(self.free):
            return self.free.pop(k)
        self._ids += 1
        self.os_bytes += size
        return (size, self._ids)

    def release(self, block: tuple[int, int]) -> None:
        bisect.insort(self.free, block)


def analyze(body: list, elem_bytes: int = 4) -> MemoryReport:
    """Per-statement memory table for a statement list (see module doc)."""
    if isinstance(body, ir.IrProgram):
        return analyze_program(body)
    rows: list[MemoryRow] = []
    live = 0
    peak = 0
    pool = BestFitPool()
    blocks: dict[str, tuple[int, int]] = {}
    sizes: dict[str, int] = {}
    for s in body:
        if isinstance(s, ir.Let):
            size = nbytes(s.shape, elem_bytes)
            sizes[s.var] = size
            if s.inplace is not None:
                blocks[s.var] = blocks.pop(s.inplace)
                delta = 0
            else:
                blocks[s.var] = pool.acquire(size)
                delta = size
            live += delta
            rows.append(MemoryRow(s.text(), tuple(s.shape), delta, live, pool.os_bytes))
        elif isinstance(s, ir.Dealloc):
            size = sizes[s.var]
            live -= size
            pool.release(blocks.pop(s.var))
            rows.append(MemoryRow(s.text(), None, -size, live, pool.os_bytes))
        else:
            rows.append(MemoryRow(s.text(), None, 0, live, pool.os_bytes))
        peak = max(peak, live)
    return MemoryReport(rows, peak, pool.os_bytes)


def static_memory(params, convs, workspace_cap_mb: float | None, velocities=(), elem_bytes: int = 4):
    """(param bytes, workspace bytes, convs running direct).

    Parameters count weights, biases and velocities.  All convolutions
    share one im2col workspace sized by the largest of them, capped; a
    convolution whose buffer exceeds the cap runs the direct kernel.
    """
    pbytes = sum(nbytes(p.shape, elem_bytes) for p in params)
    pbytes += sum(nbytes(shape, elem_bytes) for _, shape in velocities)
    need = [c.im2col_elems * elem_bytes for c in convs]
    biggest = max(need, default=0)
    if workspace_cap_mb is None:
        return pbytes, biggest, []
    cap = int(round(workspace_cap_mb * 1e6))
    direct = [c.site for c, b in zip(convs, need) if b > cap]
    return pbytes, min(cap, biggest), direct


def analyze_program(p: ir.IrProgram, body: str = "train") -> MemoryReport:
    rep = analyze(p.train if body == "train" else p.test, p.elem_bytes)
    pb, wb, direct = static_memory(p.params, p.convs, p.workspace_cap_mb, p.velocities, p.elem_bytes)
    rep.param_bytes, rep.workspace_bytes, rep.direct_convs = pb, wb, direct
    return rep


def _fmt_row(text: str, dims: str, a: str, b: str, c: str) -> str:
    if len(text) > 45:
        return f"{text}\n{'':46}{dims:<13}{a:>10}{b:>12}{c:>12}"
    return f"{text:<46}{dims:<13}{a:>10}{b:>12}{c:>12}"


def format_table(rep: MemoryReport) -> str:
    head = f"{HEADER[0]:<46}{HEADER[1]:<13}{HEADER[2]:>12}{HEADER[3]:>10}{HEADER[4]:>12}"
    lines = [head, "-" * len(head)]
    for r in rep.rows:
        lines.append(_fmt_row(r.stmt, r.dims_text, f"{r.delta_mb:.6f}", f"{r.total_dealloc_mb:.6f}",
                              f"{r.total_reuse_mb:.6f}").rstrip())
    lines.append("-" * len(head))
    lines.append(f"peak (dealloc mode)      {rep.peak_dealloc_mb:.6f} MB")
    lines.append(f"peak (reuse mode)        {rep.peak_reuse_mb:.6f} MB")
    lines.append(f"parameters + velocities  {rep.param_mb:.6f} MB")
    ws = f"convolution workspace    {rep.workspace_mb:.6f} MB"
    if rep.direct_convs:
        ws += f"  (direct: {', '.join(rep.direct_convs)})"
    lines.append(ws)
    return "\n".join(lines) + "\n"


def format_csv(rep: MemoryReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stmt", "dims", "delta_mb", "total_dealloc_mb", "total_reuse_mb"])
    for r in rep.rows:
        w.writerow([r.stmt, r.dims_text, f"{r.delta_mb:.6f}", f"{r.total_dealloc_mb:.6f}", f"{r.total_reuse_mb:.6f}"])
    w.writerow(["#peak_dealloc_mb", "", f"{rep.peak_dealloc_mb:.6f}", "", ""])
    w.writerow(["#peak_reuse_mb", "", f"{rep.peak_reuse_mb:.6f}", "", ""])
    w.writerow(["#param_mb", "", f"{rep.param_mb:.6f}", "", ""])
    w.writerow(["#workspace_mb", "", f"{rep.workspace_mb:.6f}", "", ""])
    return buf.getvalue()
