"""CPU runtime for compiled networks.

Generated programs import only numpy and this package.  The public names
are the kernels called once per IR statement (see :mod:`.ops`), the
execution :class:`Context` with its block pool, parameter initialization,
snapshots, data sources and the train/test driver.
"""

from .context import SCRATCH, Context
from .data import Dataset, DimensionMismatch, load_idx, open_source, read_idx, synth_data
from .driver import resume, save, test, train
from .init import init_param
from .kernels import bc, delta, gsum, gt, safe_log
from .ops import *  # noqa: F401,F403  (the per-statement API)
from .ops import __all__ as _ops_all
from .pool import DeviceTensor, MemoryPool, PoolExhausted, ShapeFault
from .snapshot import FormatError, load_snapshot, read_tensor, save_snapshot, write_tensor

__all__ = [
    "Context", "SCRATCH", "Dataset", "DimensionMismatch", "load_idx", "open_source", "read_idx",
    "synth_data", "resume", "save", "test", "train", "init_param", "bc", "delta", "gsum", "gt", "safe_log",
    "DeviceTensor", "MemoryPool", "PoolExhausted", "ShapeFault", "FormatError", "load_snapshot",
    "read_tensor", "save_snapshot", "write_tensor", *_ops_all,
]
