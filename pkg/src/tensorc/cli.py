"""``tensorc`` command line: check, analyze, compile, train and test a network file.

Exit status is 0 on success, 1 for a compile-time diagnostic (printed as
``file:line:col: Kind: message``) and 2 for an input/output failure.
``TENSORC_SEED`` sets the seed for initialization and dropout (default 42).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import codegen, compiler, ir, memplan, opt
from . import expr as E
from .errors import CompileError
from .interp import Interpreter
from .netspec import NetworkProgram, parse_netspec
from .runtime import driver
from .runtime.data import open_source
from .runtime.snapshot import FormatError, has_snapshot


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("TENSORC_SEED", "42"))


def _load(path: str) -> NetworkProgram:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise _Exit(2, f"{path}: cannot read: {e.strerror or e}") from None
    try:
        return parse_netspec(text, path)
    except ValueError as e:  # configuration values rejected while building the program
        raise _Exit(1, f"{path}: error: {e}") from None


def _compile(prog: NetworkProgram, args) -> compiler.Compilation:
    return compiler.compile_network(prog, mode=getattr(args, "mode", None) or "dealloc",
                                    workspace_cap_mb=getattr(args, "workspace_cap", None))


# ---------------------------------------------------------------- subcommands


def cmd_check(args) -> int:
    prog = _load(args.spec)
    loss, acc = compiler.check(prog)
    params = E.free_params(loss)
    n = sum(int(np.prod(p.shape)) for p in params)
    print(f"{args.spec}: ok ({len(params)} parameter tensors, {n} weights"
          f"{', with accuracy' if acc is not None else ''})")
    return 0


def cmd_analyze(args) -> int:
    c = _compile(_load(args.spec), args)
    rep = memplan.analyze_program(c.program, args.body)
    if args.format == "csv":
        sys.stdout.write(rep.csv())
    else:
        sys.stdout.write(rep.text())
        print(f"total ({args.mode} mode)       {rep.grand_total_mb(args.mode):.6f} MB")
    return 0


def cmd_compile(args) -> int:
    c = _compile(_load(args.spec), args)
    if args.dump_pass:
        if args.dump_pass == "ssa":
            print(ir.format_stmts(c.ssa))
        else:
            print(c.trace.format(args.dump_pass))
    if args.dump_ir:
        print(ir.format_stmts(c.program.train))
        if c.program.test:
            print("# test")
            print(ir.format_stmts(c.program.test))
    out = args.output or codegen.output_path(c.program)
    src = codegen.emit(c.program, args.mode, args.spec)
    try:
        with open(out, "w", encoding="utf-8") as f:
            f.write(src)
    except OSError as e:
        raise _Exit(2, f"{out}: cannot write: {e.strerror or e}") from None
    print(f"wrote {out}", file=sys.stderr)
    return 0


def _data(prog: NetworkProgram, source: str | None, split: str):
    d = prog.data
    try:
        return open_source(source or d.source, tuple(d.shape), d.classes, d.limit or None, split)
    except OSError as e:
        raise _Exit(2, f"{e.filename or source}: cannot read data: {e.strerror or e}") from None


def cmd_train(args) -> int:
    prog = _load(args.spec)
    c = _compile(prog, args)
    net = Interpreter(c.program, seed=_seed(args), dtype=np.float64 if args.f64 else np.float32)
    start = 0
    if args.snapshot and has_snapshot(args.snapshot):
        start = driver.resume(net, args.snapshot)
        print(f"resuming from {args.snapshot} at iteration {start}", file=sys.stderr)
    elif args.resume:
        print(f"no snapshot in {args.snapshot}; starting fresh", file=sys.stderr)
    data = _data(prog, args.data, "train")
    iters = args.iters if args.iters is not None else prog.solver.train_iters
    loss_csv = args.loss_csv or f"{c.program.name}.loss.csv"
    test_data = _data(prog, args.data, "test") if c.program.test else None
    driver.train(net, data, iters, start=start, snapshot_dir=args.snapshot,
                 snapshot_every=prog.solver.snapshot_every, loss_csv=loss_csv, test_data=test_data,
                 test_iters=prog.solver.test_iters)
    if test_data is not None:
        print(f"test precision {driver.test(net, test_data, prog.solver.test_iters):.4f}")
    return 0


def cmd_test(args) -> int:
    prog = _load(args.spec)
    c = _compile(prog, args)
    if not c.program.test:
        raise _Exit(1, f"{args.spec}: error: the network declares no accuracy")
    net = Interpreter(c.program, seed=_seed(args))
    if not has_snapshot(args.snapshot):
        raise _Exit(2, f"{args.snapshot}: no snapshot files")
    driver.resume(net, args.snapshot)
    data = _data(prog, args.data, "test")
    iters = args.iters if args.iters is not None else prog.solver.test_iters
    print(f"test precision {driver.test(net, data, iters):.4f}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tensorc", description="Compile and run deep network descriptions.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="parse and shape-check a network file")
    p.add_argument("spec")
    p.set_defaults(func=cmd_check)

    def common(p):
        p.add_argument("spec")
        p.add_argument("--mode", choices=("dealloc", "reuse"), default="dealloc")
        p.add_argument("--workspace-cap", type=float, default=None, metavar="MB",
                       help="convolution workspace limit; larger convolutions run direct")

    p = sub.add_parser("analyze", help="print the static memory table")
    common(p)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--body", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compile", help="generate a standalone training program")
    common(p)
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--dump-ir", action="store_true")
    p.add_argument("--dump-pass", choices=(*opt.PASSES, "ssa"), default=None)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("train", help="train with the in-process interpreter")
    common(p)
    p.add_argument("--data", default=None, help="IDX directory, 'mnist' or synthetic:SEED")
    p.add_argument("--snapshot", default=None, metavar="DIR")
    p.add_argument("--resume", action="store_true", help="continue from DIR (automatic when it holds a snapshot)")
    p.add_argument("--f64", action="store_true")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("test", help="measure precision of a snapshot")
    common(p)
    p.add_argument("--snapshot", required=True, metavar="DIR")
    p.add_argument("--data", default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_test)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Exit as e:
        print(e, file=sys.stderr)
        return e.code
    except CompileError as e:
        print(e, file=sys.stderr)
        return 1
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
