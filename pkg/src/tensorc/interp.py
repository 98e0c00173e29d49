"""Direct execution of an ``IrProgram`` against the runtime.

The interpreter walks the statement lists and dispatches every right-hand
side to the runtime operation a generated program would call.  It is the
in-process reference the generated code is checked against, and it gives
tests access to intermediate values (``env``) and per-statement pool
statistics (``live_trace``).
"""

from __future__ import annotations

import numpy as np

from . import expr as E
from . import ir
from .runtime import kernels as K
from .runtime import ops
from .runtime.context import SCRATCH, Context
from .runtime.init import init_param
from .runtime.pool import DeviceTensor


def workspace_bytes(program: ir.IrProgram) -> int | None:
    cap = program.workspace_cap_mb
    return None if cap is None else int(round(cap * 1e6))


class Interpreter:
    def __init__(self, program: ir.IrProgram, *, seed: int = 42, dtype=np.float32, mode: str | None = None,
                 ctx: Context | None = None, trace: bool = False):
        self.program = program
        self.name = program.name
        self.batch = program.data.batch
        self.ctx = ctx or Context(mode or program.mode, dtype, workspace_bytes(program), seed)
        dt = self.ctx.dtype
        self.params = {p.name: init_param(p.name, p.shape, p.init, self.ctx.seed, dt) for p in program.params}
        self.velocities = {v: np.zeros(shape, dt) for v, shape in program.velocities}
        self.trace = trace
        self.live_trace: list[int] = []
        self.printed: list[float] = []
        self.env: dict[str, object] = {}

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.velocities}

    # -- driver protocol

    def train_step(self, X, Y) -> float:
        return self.run(self.program.train, X, Y)[0]

    def test_step(self, X, Y) -> float:
        return self.run(self.program.test, X, Y)[0]

    # -- execution

    def run(self, stmts: list, X=None, Y=None, env: dict | None = None) -> list[float]:
        """Execute ``stmts``; returns the printed values."""
        self.env = dict(env or {})
        self.inputs = {"X": X, "Y": Y}
        self.printed = []
        self.live_trace = []
        for s in stmts:
            self.exec(s)
            if self.trace:
                self.live_trace.append(self.ctx.pool.live_bytes)
        return self.printed

    def exec(self, s) -> None:
        if isinstance(s, ir.Let):
            out = None if s.inplace is None else self.env[s.inplace]
            value = self.tensor(s.rhs, out)
            if s.inplace is not None:
                del self.env[s.inplace]
            self.env[s.var] = value
        elif isinstance(s, ir.Dealloc):
            t = self.env.pop(s.var)
            if isinstance(t, DeviceTensor):
                ops.release(self.ctx, t)
        elif isinstance(s, ir.Update):
            target = self.params.get(s.target)
            if target is None:
                target = self.velocities[s.target]
            g = self.atom(s.rhs) if ir.is_atom(s.rhs) else self.tensor(s.rhs, SCRATCH)
            decay_of = None if s.decay_of is None else self.params[s.decay_of]
            scale = None if s.scale is None else self.env[s.scale]
            ops.update(target, g, s.alpha, s.beta, s.decay, decay_of, scale)
        elif isinstance(s, ir.Print):
            self.printed.append(float(self.scalar(s.rhs, {}, {}, 0)))
        elif isinstance(s, ir.Save):
            pass
        else:
            raise TypeError(f"cannot execute {s!r}")

    # -- operands

    def atom(self, e: E.Expr):
        t = type(e)
        if t is E.Var:
            return self.env[e.name]
        if t is E.Param:
            if e.name in self.params:
                return self.params[e.name]
            return self.velocities[e.name]
        if t is E.Input:
            return self.inputs[e.name]
        if t is E.Flatten:
            return ops.flatten(self.atom(e.operand), e.axis)
        if t is E.Reshape:
            return ops.reshape(self.atom(e.operand), e.rshape)
        if t is E.Indicator:
            return ops.indicator(self.atom(e.operand), e.classes, self.ctx.dtype)
        if t is E.Copy:
            return self.atom(e.operand)
        raise TypeError(f"{E.show(e)} is not an operand")

    def tensor(self, e: E.Expr, out=None):
        ctx = self.ctx
        t = type(e)
        if t is E.ToDevice:
            return ops.to_device(ctx, self.atom(e.operand))
        if t is E.Prim:
            return self.prim(e, out)
        if t is E.GradPrim:
            return self.grad_prim(e, out)
        if t is E.MatMul:
            return ops.matmul(ctx, self.atom(e.a), self.atom(e.b), e.a_axis, e.b_axis, out=out)
        if t is E.BiasAdd:
            return ops.bias_add(ctx, self.atom(e.a), self.atom(e.bias), out=out)
        if t is E.LogT:
            return ops.log(ctx, self.atom(e.operand), out=out)
        if t is E.RecipT:
            return ops.recip(ctx, self.atom(e.operand), out=out)
        if t is E.ScaleT:
            return ops.scale(ctx, self.atom(e.operand), float(self.scalar(e.factor, {}, {}, 0)), out=out)
        if t is E.AddT:
            return ops.add(ctx, self.atom(e.a), self.atom(e.b), out=out)
        if t is E.IndexAbs:
            pos = {v: k for k, v in enumerate(e.indices)}
            ext = dict(zip(e.indices, e.extents))
            return ops.tensor(ctx, e.shape, self.scalar(e.body, pos, ext, len(e.indices)), out=out)
        if t is E.ScalarT:
            return ops.tensor(ctx, (), self.scalar(e.expr, {}, {}, 0), out=out)
        if ir.is_atom(e):
            return self.atom(e)
        raise TypeError(f"no runtime operation for {E.show(e)}")

    def prim(self, e: E.Prim, out):
        ctx = self.ctx
        a = [self.atom(o) for o in e.operands]
        h = e.hyper
        k = e.kind
        if k == "Convolv":
            return ops.conv(ctx, a[0], a[1], a[2], h[0], h[1], out=out)
        if k == "Pooling":
            return ops.pool(ctx, a[0], h[0], h[1], h[2], bool(h[3]), len(h) > 4 and bool(h[4]), out=out)
        if k == "ReLU":
            return ops.relu(ctx, a[0], out=out)
        if k == "Softmax":
            return ops.softmax(ctx, a[0], out=out)
        if k == "DropoutMask":
            return ops.dropout_mask(ctx, e.shape, h[0], h[1], out=out)
        if k == "Dropout":
            return ops.dropout(ctx, a[0], a[1], out=out)
        if k == "Concat":
            return ops.concat(ctx, *a, out=out)
        if k == "ClipScale":
            return ops.clip_scale(ctx, h[0], h[1], *a, out=out)
        if k == "LRN":
            return ops.lrn(ctx, a[0], *h, out=out)
        raise TypeError(f"no runtime kernel for primitive {k}")

    def grad_prim(self, e: E.GradPrim, out):
        ctx = self.ctx
        up = self.atom(e.upstream)
        sv = [self.atom(o) for o in e.saved]
        h = e.hyper
        k = e.kind
        if k == "Convolv":
            if e.slot == 0:
                return ops.conv_grad_data(ctx, up, sv[0], e.gshape, h[0], h[1], out=out)
            if e.slot == 1:
                return ops.conv_grad_filter(ctx, up, sv[0], e.gshape, h[0], h[1], out=out)
            return ops.conv_grad_bias(ctx, up, out=out)
        if k == "Pooling":
            return ops.pool_grad(ctx, up, sv[0], sv[1], h[0], h[1], h[2], bool(h[3]), len(h) > 4 and bool(h[4]),
                                 out=out)
        if k == "ReLU":
            return ops.relu_grad(ctx, up, sv[0], out=out)
        if k == "Softmax":
            return ops.softmax_grad(ctx, up, sv[0], out=out)
        if k == "Dropout":
            return ops.dropout_grad(ctx, up, sv[0], out=out)
        if k == "Concat":
            return ops.concat_grad(ctx, up, h[0], h[1], out=out)
        raise TypeError(f"no runtime kernel for the gradient of {k}")

    # -- indexed scalar expressions on an index grid

    def scalar(self, e: E.Expr, pos: dict, ext: dict, ndim: int):
        t = type(e)
        if t in E.CONSTS:
            return float(e.value)
        if t is E.Elem:
            return K.bc(ops.arr(self.atom(e.tensor)), tuple(pos[i] for i in e.indices), ndim)
        if t is E.Add:
            return self.scalar(e.a, pos, ext, ndim) + self.scalar(e.b, pos, ext, ndim)
        if t is E.Mul:
            return self.scalar(e.a, pos, ext, ndim) * self.scalar(e.b, pos, ext, ndim)
        if t is E.Div:
            return self.scalar(e.a, pos, ext, ndim) / self.scalar(e.b, pos, ext, ndim)
        if t is E.Neg:
            return -self.scalar(e.a, pos, ext, ndim)
        if t is E.Log:
            return K.safe_log(self.scalar(e.a, pos, ext, ndim))
        if t is E.Exp:
            return np.exp(self.scalar(e.a, pos, ext, ndim))
        if t is E.Max:
            return np.maximum(self.scalar(e.a, pos, ext, ndim), self.scalar(e.b, pos, ext, ndim))
        if t is E.Gt:
            return K.gt(self.scalar(e.a, pos, ext, ndim), self.scalar(e.b, pos, ext, ndim))
        if t is E.Sum:
            body = self.scalar(e.body, {**pos, e.index: ndim}, {**ext, e.index: e.extent}, ndim + 1)
            return K.gsum(body, e.extent, ndim)
        if t is E.Delta:
            return K.delta(pos[e.i], pos[e.j], ext[e.i], ext[e.j], ndim, self.ctx.dtype)
        if t is E.Dot:
            return ops.dot(self.atom(e.a), self.atom(e.b))
        if t is E.Precision:
            return ops.precision(self.atom(e.pred), self.atom(e.labels))
        raise TypeError(f"cannot evaluate {E.show(e)}")
