"""Training and test loops shared by the interpreter and generated programs.

A *model* is any object with

* ``name``, ``batch`` and ``ctx`` (a :class:`Context`),
* ``train_step(X, Y) -> loss`` and ``test_step(X, Y) -> precision``,
* ``state() -> {name: array}`` with every parameter and velocity (arrays are
  updated in place, so loading a snapshot writes into them).
"""

from __future__ import annotations

import csv
import os
import sys
from typing import Callable

import numpy as np

from .data import Dataset
from .snapshot import has_snapshot, load_snapshot, read_meta, save_snapshot


def save(model, directory: str, iteration: int) -> None:
    meta = {"name": model.name, "iteration": int(iteration), "seed": int(model.ctx.seed),
            "tensors": sorted(model.state())}
    save_snapshot(directory, model.state(), meta)


def resume(model, directory: str, warn: bool = True) -> int:
    """Load whatever the snapshot holds; returns the iteration to continue from."""
    if not has_snapshot(directory):
        return 0
    load_snapshot(directory, model.state(), warn=warn)
    return int(read_meta(directory).get("iteration", 0))


def test(model, data: Dataset, iters: int) -> float:
    """Mean precision over ``iters`` batches (at least one)."""
    scores = []
    for i in range(max(1, iters)):
        X, Y = data.batch(i, model.batch)
        scores.append(model.test_step(X, Y))
    return float(np.mean(scores))


def train(model, data: Dataset, iters: int, *, start: int = 0, snapshot_dir: str | None = None,
          snapshot_every: int = 0, loss_csv: str | None = None, test_data: Dataset | None = None,
          test_iters: int = 0, log: Callable[[str], None] | None = None) -> list[float]:
    """Run iterations ``start .. iters-1``; returns the losses of this call.

    Batch ``i`` of the cyclic pass feeds iteration ``i``, and the context's
    iteration counter (which keys dropout masks) follows it, so a resumed run
    sees the same batches as an uninterrupted one.
    """
    log = log or (lambda s: print(s, file=sys.stdout, flush=True))
    losses: list[float] = []
    writer = fh = None
    if loss_csv:
        fresh = start == 0 or not os.path.exists(loss_csv)
        fh = open(loss_csv, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["iteration", "loss"])
    try:
        for i in range(start, iters):
            model.ctx.iteration = i
            X, Y = data.batch(i, model.batch)
            loss = float(model.train_step(X, Y))
            losses.append(loss)
            log(f"iteration {i + 1}: loss {loss:.6f}")
            if writer:
                writer.writerow([i + 1, f"{loss:.8g}"])
            done = i + 1
            if snapshot_dir and snapshot_every and done % snapshot_every == 0 and done < iters:
                save(model, snapshot_dir, done)
                if test_data is not None and test_iters:
                    log(f"iteration {done}: test precision {test(model, test_data, test_iters):.4f}")
    finally:
        if fh:
            fh.close()
    if snapshot_dir and iters > start:
        save(model, snapshot_dir, iters)
    return losses
