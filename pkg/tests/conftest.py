from __future__ import annotations

import os

import numpy as np
import pytest

from tensorc import compiler, ir
from tensorc.interp import Interpreter
from tensorc.runtime.context import Context

HERE = os.path.dirname(os.path.abspath(__file__))
NETS = os.path.join(os.path.dirname(HERE), "src", "tensorc", "nets")
CORPUS = os.path.join(HERE, "corpus")
SMALL = os.path.join(HERE, "nets", "small.net")


def net_path(name: str) -> str:
    return os.path.join(NETS, name)


def evaluator(dtype=np.float64) -> Interpreter:
    """An interpreter with no program, for evaluating loose expressions."""
    it = Interpreter.__new__(Interpreter)
    it.ctx = Context("dealloc", dtype)
    it.params, it.velocities, it.env = {}, {}, {}
    it.trace, it.live_trace, it.printed = False, [], []
    it.inputs = {}
    return it


def eval_tensor(e, env: dict, dtype=np.float64) -> np.ndarray:
    """Value of a (possibly nested) tensor expression; free ``Var`` leaves come from ``env``."""
    stmts, (atom,) = ir.to_ssa([], [e], start=1000)
    it = evaluator(dtype)
    it.run(stmts, env=env)
    return np.array(it.atom(atom) if ir.is_atom(atom) else it.tensor(atom), dtype=dtype)


def eval_scalar(e, env: dict, dtype=np.float64) -> float:
    stmts, _ = ir.to_ssa([("value", e)], [], start=1000)
    it = evaluator(dtype)
    return it.run(stmts, env=env)[0]


@pytest.fixture(scope="session")
def lenet():
    return compiler.compile_file(net_path("lenet.net"))


@pytest.fixture(scope="session")
def lenet_reuse():
    return compiler.compile_file(net_path("lenet.net"), mode="reuse")


@pytest.fixture(scope="session")
def small():
    return compiler.compile_file(SMALL)
