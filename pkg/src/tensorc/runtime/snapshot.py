"""Parameter snapshots: one ``<name>.ddt`` file per tensor plus ``meta.json``.

File layout (little endian)::

    b"DDSL" | u32 version (1) | u32 rank | u32 dims[rank] | f32 payload
"""

from __future__ import annotations

import json
import os
import struct
import warnings

import numpy as np

MAGIC = b"DDSL"
VERSION = 1
META = "meta.json"


class FormatError(ValueError):
    """A data or snapshot file does not have the expected layout."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path


def write_tensor(path: str, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f4")
    header = MAGIC + struct.pack("<II", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(a.tobytes())
    os.replace(tmp, path)


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(path, f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise FormatError(path, "truncated header")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(path, f"unsupported version {version}")
    end = 12 + 4 * rank
    if len(raw) < end:
        raise FormatError(path, "truncated dimensions")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - end != 4 * n:
        raise FormatError(path, f"payload has {len(raw) - end} bytes, dims {dims} need {4 * n}")
    return np.frombuffer(raw, "<f4", n, end).reshape(dims).copy()


def save_snapshot(directory: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, a in tensors.items():
        write_tensor(os.path.join(directory, f"{name}.ddt"), np.asarray(a))
    if meta is not None:
        with open(os.path.join(directory, META), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)


def load_snapshot(directory: str, tensors: dict[str, np.ndarray], warn: bool = True) -> list[str]:
    """Overwrite each array in ``tensors`` (in place) from its file, if present.

    Missing files leave the array unchanged (fine-tuning from a partial
    snapshot); files without a matching name are ignored.  Returns the names
    that were loaded.
    """
    loaded = []
    for name, target in tensors.items():
        path = os.path.join(directory, f"{name}.ddt")
        if not os.path.exists(path):
            if warn:
                warnings.warn(f"snapshot {directory} has no {name}.ddt; keeping its initial value", stacklevel=2)
            continue
        a = read_tensor(path)
        if a.shape != target.shape:
            raise FormatError(path, f"dims {a.shape} do not match parameter shape {target.shape}")
        target[...] = a
        loaded.append(name)
    return loaded


def read_meta(directory: str) -> dict:
    path = os.path.join(directory, META)
    if not os.path.exists(path):
        return {}
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def has_snapshot(directory: str | None) -> bool:
    return bool(directory) and os.path.isdir(directory) and any(n.endswith(".ddt") for n in os.listdir(directory))
