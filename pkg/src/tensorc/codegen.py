"""Emission of a standalone Python training program.

One pass over a verified ``IrProgram`` produces a single module that
imports only numpy and :mod:`tensorc.runtime`.  It declares one class with
the parameters as fields, a ``train_step`` and (when the network has an
accuracy expression) a ``test_step``, snapshot ``save``/``load`` and a
``main`` entry point.  Each IR statement becomes one runtime call preceded
by the statement itself as a comment::

    # val X9 = Pooling(2,2,0,true)(X8)
    t9 = rt.pool(ctx, t8, 2, 2, 0, True, False)

Local names (``t1``, ``t2``, ...) are numbered per procedure in order of
definition and are unrelated to the IR names in the comments.  The memory
mode is one constant near the top of the file.
"""

from __future__ import annotations

import os

from . import expr as E
from . import ir


def _f(x: float) -> str:
    return repr(float(x))


def class_name(name: str) -> str:
    parts = [p for p in name.replace("-", "_").split("_") if p]
    out = "".join(p[:1].upper() + p[1:] for p in parts) or "Net"
    return out if out[0].isalpha() else "Net" + out


class _Body:
    """Emits one procedure (``train_step`` or ``test_step``)."""

    def __init__(self, params: set[str]):
        self.params = params
        self.locals: dict[str, str] = {}
        self.lines: list[str] = []

    def local(self, var: str) -> str:
        name = self.locals.get(var)
        if name is None:
            name = f"t{len(self.locals) + 1}"
            self.locals[var] = name
        return name

    # -- operands

    def atom(self, e: E.Expr) -> str:
        t = type(e)
        if t is E.Var:
            return self.locals[e.name]
        if t is E.Param:
            return f"self.{e.name}"
        if t is E.Input:
            return e.name
        if t is E.Flatten:
            return f"rt.flatten({self.atom(e.operand)}, {e.axis})"
        if t is E.Reshape:
            return f"rt.reshape({self.atom(e.operand)}, {tuple(e.rshape)})"
        if t is E.Indicator:
            return f"rt.indicator({self.atom(e.operand)}, {e.classes}, ctx.dtype)"
        if t is E.Copy:
            return self.atom(e.operand)
        raise TypeError(f"{E.show(e)} is not an operand")

    def tensor(self, e: E.Expr, out: str | None) -> str:
        o = "" if out is None else f", out={out}"
        t = type(e)
        a = self.atom
        if t is E.ToDevice:
            return f"rt.to_device(ctx, {a(e.operand)})"
        if t is E.Prim:
            return self.prim(e, o)
        if t is E.GradPrim:
            return self.grad_prim(e, o)
        if t is E.MatMul:
            return f"rt.matmul(ctx, {a(e.a)}, {a(e.b)}, {e.a_axis}, {e.b_axis}{o})"
        if t is E.BiasAdd:
            return f"rt.bias_add(ctx, {a(e.a)}, {a(e.bias)}{o})"
        if t is E.LogT:
            return f"rt.log(ctx, {a(e.operand)}{o})"
        if t is E.RecipT:
            return f"rt.recip(ctx, {a(e.operand)}{o})"
        if t is E.ScaleT:
            return f"rt.scale(ctx, {a(e.operand)}, float({self.scalar(e.factor, {}, {}, 0)}){o})"
        if t is E.AddT:
            return f"rt.add(ctx, {a(e.a)}, {a(e.b)}{o})"
        if t is E.IndexAbs:
            pos = {v: k for k, v in enumerate(e.indices)}
            ext = dict(zip(e.indices, e.extents))
            body = self.scalar(e.body, pos, ext, len(e.indices))
            return f"rt.tensor(ctx, {tuple(e.shape)}, {body}{o})"
        if t is E.ScalarT:
            return f"rt.tensor(ctx, (), {self.scalar(e.expr, {}, {}, 0)}{o})"
        if ir.is_atom(e):
            return a(e)
        raise TypeError(f"no runtime operation for {E.show(e)}")

    def prim(self, e: E.Prim, o: str) -> str:
        args = ", ".join(self.atom(x) for x in e.operands)
        h = e.hyper
        k = e.kind
        if k == "Convolv":
            return f"rt.conv(ctx, {args}, {h[0]}, {h[1]}{o})"
        if k == "Pooling":
            ceil_mode = len(h) > 4 and bool(h[4])
            return f"rt.pool(ctx, {args}, {h[0]}, {h[1]}, {h[2]}, {bool(h[3])}, {ceil_mode}{o})"
        if k == "ReLU":
            return f"rt.relu(ctx, {args}{o})"
        if k == "Softmax":
            return f"rt.softmax(ctx, {args}{o})"
        if k == "DropoutMask":
            return f"rt.dropout_mask(ctx, {tuple(e.shape)}, {_f(h[0])}, {h[1]}{o})"
        if k == "Dropout":
            return f"rt.dropout(ctx, {args}{o})"
        if k == "Concat":
            return f"rt.concat(ctx, {args}{o})"
        if k == "ClipScale":
            lambdas = "(" + "".join(_f(v) + ", " for v in h[1]) + ")"
            return f"rt.clip_scale(ctx, {_f(h[0])}, {lambdas}, {args}{o})"
        if k == "LRN":
            return f"rt.lrn(ctx, {args}, {', '.join(_f(v) for v in h)}{o})"
        raise TypeError(f"no runtime kernel for primitive {k}")

    def grad_prim(self, e: E.GradPrim, o: str) -> str:
        up = self.atom(e.upstream)
        sv = [self.atom(x) for x in e.saved]
        h = e.hyper
        k = e.kind
        if k == "Convolv":
            if e.slot == 0:
                return f"rt.conv_grad_data(ctx, {up}, {sv[0]}, {tuple(e.gshape)}, {h[0]}, {h[1]}{o})"
            if e.slot == 1:
                return f"rt.conv_grad_filter(ctx, {up}, {sv[0]}, {tuple(e.gshape)}, {h[0]}, {h[1]}{o})"
            return f"rt.conv_grad_bias(ctx, {up}{o})"
        if k == "Pooling":
            ceil_mode = len(h) > 4 and bool(h[4])
            return (f"rt.pool_grad(ctx, {up}, {sv[0]}, {sv[1]}, {h[0]}, {h[1]}, {h[2]}, {bool(h[3])}, "
                    f"{ceil_mode}{o})")
        if k == "ReLU":
            return f"rt.relu_grad(ctx, {up}, {sv[0]}{o})"
        if k == "Softmax":
            return f"rt.softmax_grad(ctx, {up}, {sv[0]}{o})"
        if k == "Dropout":
            return f"rt.dropout_grad(ctx, {up}, {sv[0]}{o})"
        if k == "Concat":
            return f"rt.concat_grad(ctx, {up}, {h[0]}, {h[1]}{o})"
        raise TypeError(f"no runtime kernel for the gradient of {k}")

    def scalar(self, e: E.Expr, pos: dict, ext: dict, ndim: int) -> str:
        t = type(e)
        s = self.scalar
        if t in E.CONSTS:
            return _f(e.value)
        if t is E.Elem:
            axes = "(" + "".join(f"{pos[i]}, " for i in e.indices) + ")"
            return f"rt.bc(rt.arr({self.atom(e.tensor)}), {axes}, {ndim})"
        if t is E.Add:
            return f"({s(e.a, pos, ext, ndim)} + {s(e.b, pos, ext, ndim)})"
        if t is E.Mul:
            return f"({s(e.a, pos, ext, ndim)} * {s(e.b, pos, ext, ndim)})"
        if t is E.Div:
            return f"({s(e.a, pos, ext, ndim)} / {s(e.b, pos, ext, ndim)})"
        if t is E.Neg:
            return f"(-{s(e.a, pos, ext, ndim)})"
        if t is E.Log:
            return f"rt.safe_log({s(e.a, pos, ext, ndim)})"
        if t is E.Exp:
            return f"np.exp({s(e.a, pos, ext, ndim)})"
        if t is E.Max:
            return f"np.maximum({s(e.a, pos, ext, ndim)}, {s(e.b, pos, ext, ndim)})"
        if t is E.Gt:
            return f"rt.gt({s(e.a, pos, ext, ndim)}, {s(e.b, pos, ext, ndim)})"
        if t is E.Sum:
            body = s(e.body, {**pos, e.index: ndim}, {**ext, e.index: e.extent}, ndim + 1)
            return f"rt.gsum({body}, {e.extent}, {ndim})"
        if t is E.Delta:
            return f"rt.delta({pos[e.i]}, {pos[e.j]}, {ext[e.i]}, {ext[e.j]}, {ndim}, ctx.dtype)"
        if t is E.Dot:
            return f"rt.dot({self.atom(e.a)}, {self.atom(e.b)})"
        if t is E.Precision:
            return f"rt.precision({self.atom(e.pred)}, {self.atom(e.labels)})"
        raise TypeError(f"cannot emit {E.show(e)}")

    # -- statements

    def stmt(self, s) -> None:
        self.lines.append(f"# {s.text()}")
        if isinstance(s, ir.Let):
            out = None if s.inplace is None else self.locals[s.inplace]
            rhs = self.tensor(s.rhs, out)
            self.lines.append(f"{self.local(s.var)} = {rhs}")
        elif isinstance(s, ir.Dealloc):
            self.lines.append(f"rt.release(ctx, {self.locals[s.var]})")
        elif isinstance(s, ir.Update):
            g = self.atom(s.rhs) if ir.is_atom(s.rhs) else self.tensor(s.rhs, "rt.SCRATCH")
            decay_of = "None" if s.decay_of is None else f"self.{s.decay_of}"
            scale = "None" if s.scale is None else self.locals[s.scale]
            self.lines.append(f"rt.update(self.{s.target}, {g}, {_f(s.alpha)}, {_f(s.beta)}, {_f(s.decay)}, "
                              f"{decay_of}, {scale})")
        elif isinstance(s, ir.Print):
            self.lines.append(f"printed.append(float({self.scalar(s.rhs, {}, {}, 0)}))")
        elif isinstance(s, ir.Save):
            self.lines.append("self.save(SNAPSHOT_DIR)")
        else:
            raise TypeError(f"cannot emit {s!r}")


def _procedure(name: str, stmts: list, params: set[str], doc: str) -> list[str]:
    body = _Body(params)
    for s in stmts:
        body.stmt(s)
    lines = [f"    def {name}(self, X, Y):", f'        """{doc}"""', "        ctx = self.ctx",
             "        printed = []"]
    lines += ["        " + ln for ln in body.lines]
    lines.append("        return printed[0]")
    return lines


def emit(p: ir.IrProgram, mode: str | None = None, source_file: str | None = None) -> str:
    """Source text of the generated program (deterministic for a given program)."""
    mode = mode or p.mode
    cls = class_name(p.name)
    params = [q.name for q in p.params]
    velocities = [v for v, _ in p.velocities]
    ws = "None" if p.workspace_cap_mb is None else str(int(round(p.workspace_cap_mb * 1e6)))
    d, s = p.data, p.solver
    origin = f" from {source_file}" if source_file else ""
    out = [
        f'"""Training program for network {p.name!r}, generated{origin}.',
        "",
        "Each runtime call is preceded by the IR statement it implements.",
        "Run with ``python <file> --iters N [--data SOURCE] [--snapshot DIR]``.",
        '"""',
        "",
        "from __future__ import annotations",
        "",
        "import argparse",
        "import os",
        "import sys",
        "",
        "import numpy as np",
        "",
        "from tensorc import runtime as rt",
        "",
        "# Memory mode: \"dealloc\" frees every temporary at its last use;",
        "# \"reuse\" keeps released blocks in a pool for later allocations.",
        f"MODE = {mode!r}",
        "",
        f"WORKSPACE_BYTES = {ws}",
        f"DATA_SOURCE = {d.source!r}",
        f"BATCH = {d.batch}",
        f"SHAPE = {tuple(d.shape)}",
        f"CLASSES = {d.classes}",
        f"LIMIT = {d.limit}",
        f"TRAIN_ITERS = {s.train_iters}",
        f"TEST_ITERS = {s.test_iters}",
        f"SNAPSHOT_EVERY = {s.snapshot_every}",
        "SNAPSHOT_DIR = None",
        "",
        "",
        f"class {cls}:",
        f"    name = {p.name!r}",
        "    batch = BATCH",
        f"    PARAMS = {tuple(params)!r}",
        f"    VELOCITIES = {tuple(velocities)!r}",
        "",
        "    def __init__(self, seed=42, dtype=np.float32, mode=MODE, workspace_bytes=WORKSPACE_BYTES):",
        "        self.ctx = rt.Context(mode, dtype, workspace_bytes, seed)",
    ]
    for q in p.params:
        out.append(f"        self.{q.name} = rt.init_param({q.name!r}, {tuple(q.shape)}, {tuple(q.init)!r}, seed, dtype)")
    for v, shape in p.velocities:
        out.append(f"        self.{v} = np.zeros({tuple(shape)}, dtype)")
    out += [
        "",
        "    def state(self):",
        "        return {n: getattr(self, n) for n in self.PARAMS + self.VELOCITIES}",
        "",
        "    def save(self, directory, iteration=0):",
        "        rt.save(self, directory, iteration)",
        "",
        "    def load(self, directory):",
        "        return rt.resume(self, directory)",
        "",
    ]
    out += _procedure("train_step", p.train, set(params), "One training iteration; returns the printed loss.")
    if p.test:
        out.append("")
        out += _procedure("test_step", p.test, set(params), "One test batch; returns the printed precision.")
    out += [
        "",
        "",
        "def main(argv=None):",
        f"    ap = argparse.ArgumentParser(description={('train ' + p.name)!r})",
        "    ap.add_argument(\"--iters\", type=int, default=TRAIN_ITERS)",
        "    ap.add_argument(\"--data\", default=DATA_SOURCE)",
        "    ap.add_argument(\"--snapshot\", default=None)",
        "    ap.add_argument(\"--mode\", choices=(\"dealloc\", \"reuse\"), default=MODE)",
        "    ap.add_argument(\"--f64\", action=\"store_true\")",
        "    ap.add_argument(\"--seed\", type=int, default=int(os.environ.get(\"TENSORC_SEED\", 42)))",
        "    ap.add_argument(\"--loss-csv\", default=f\"{" + cls + ".name}.loss.csv\")",
        "    args = ap.parse_args(argv)",
        f"    net = {cls}(args.seed, np.float64 if args.f64 else np.float32, args.mode)",
        "    start = net.load(args.snapshot) if args.snapshot else 0",
        "    data = rt.open_source(args.data, SHAPE, CLASSES, LIMIT or None)",
        "    rt.train(net, data, args.iters, start=start, snapshot_dir=args.snapshot, snapshot_every=SNAPSHOT_EVERY,",
        "             loss_csv=args.loss_csv)",
    ]
    if p.test:
        out += [
            "    test = rt.open_source(args.data, SHAPE, CLASSES, LIMIT or None, split=\"test\")",
            "    print(f\"test precision {rt.test(net, test, TEST_ITERS):.4f}\")",
        ]
    out += [
        "    return 0",
        "",
        "",
        'if __name__ == "__main__":',
        "    sys.exit(main())",
        "",
    ]
    return "\n".join(out)


def output_path(p: ir.IrProgram, directory: str = ".") -> str:
    return os.path.join(directory, f"{p.name}.gen.py")
