"""Compilation pipeline: network file to verified ``IrProgram``."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import autodiff, ir, opt
from . import expr as E
from .errors import CompileError
from .infer import bind, infer_shapes
from .netspec import NetworkProgram, elaborate, parse_netspec


@dataclass
class Compilation:
    """The program plus intermediate artifacts kept for inspection."""

    program: ir.IrProgram
    loss: E.Scalar
    grads: dict[str, E.Tensor]
    optimized: list[E.Expr]
    trace: opt.RewriteTrace
    accuracy: E.Scalar | None = None
    ssa: list = field(default_factory=list)
    grad_atoms: dict = field(default_factory=dict)  # parameter -> its gradient in ``ssa``


def _convs(root: E.Expr) -> list[ir.ConvInfo]:
    out = []
    for node in E.postorder([root]):
        if isinstance(node, E.Prim) and node.kind == "Convolv":
            x, w = node.operands[0], node.operands[1]
            out.append(ir.ConvInfo(node.site or "conv", x.shape, w.shape, node.shape))
    return out


def locate(err: CompileError, prog: NetworkProgram) -> CompileError:
    """Attach the declaring line to a diagnostic that only names a layer site."""
    site = getattr(err, "site", None)
    if err.loc is None and site:
        err.loc = prog.loc_of(site)
        err.args = (str(err),)
    return err


def check(prog: NetworkProgram) -> tuple[E.Scalar, E.Scalar | None]:
    """Elaborate and shape-check the train loss and the test accuracy."""
    try:
        el = elaborate(prog, train=True)
        loss = bind(el.loss, infer_shapes(el.loss))
        acc = None
        if prog.accuracy_expr is not None:
            elt = elaborate(prog, train=False)
            acc = bind(elt.accuracy, infer_shapes(elt.accuracy))
    except CompileError as err:
        raise locate(err, prog) from None
    return loss, acc


def compile_network(prog: NetworkProgram, mode: str = "dealloc", workspace_cap_mb: float | None = None,
                    passes=opt.PASSES) -> Compilation:
    if mode not in ("dealloc", "reuse"):
        raise ValueError(f"mode must be 'dealloc' or 'reuse', not {mode!r}")
    loss, acc = check(prog)
    el = elaborate(prog, train=True)
    shapes = {p.name: p.pshape for p in E.free_params(loss)}
    params = [ir.ParamInfo(s.name, shapes[s.name], s.init, s.lr_mult, s.decay_mult) for s in el.params]
    names = [p.name for p in params]
    grads = autodiff.grads(loss, names) if names else {}

    trace = opt.RewriteTrace()
    roots = opt.optimize([loss] + [grads[n] for n in names], trace, passes)
    stmts, atoms = ir.to_ssa([("loss", roots[0])], roots[1:])
    stmts = ir.cse(stmts)
    ssa = list(stmts)
    stmts, velocities = ir.form_updates(stmts, params, dict(zip(names, atoms)), prog.solver)
    persistent = set(names) | {v for v, _ in velocities}
    train = _finish(stmts, mode, persistent)

    test: list = []
    if acc is not None:
        (acc_opt,) = opt.optimize([acc], None, passes)
        tstmts, _ = ir.to_ssa([("accuracy", acc_opt)])
        test = _finish(ir.cse(tstmts), mode, persistent)

    program = ir.IrProgram(
        name=prog.solver.name, params=params, velocities=velocities, train=train, test=test,
        solver=prog.solver, data=prog.data, mode=mode, workspace_cap_mb=workspace_cap_mb,
        convs=_convs(loss), inputs={"X": el.x.shape, "Y": el.y.shape},
    )
    return Compilation(program, loss, grads, roots, trace, acc, ssa, dict(zip(names, atoms)))


def _finish(stmts: list, mode: str, persistent: set[str]) -> list:
    stmts = ir.schedule(stmts)
    stmts = ir.inline_inplace(stmts, persistent)
    stmts = ir.insert_dealloc(stmts, mode, persistent)
    ir.verify(stmts, persistent)
    return stmts


def compile_file(path: str, **kw) -> Compilation:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return compile_network(parse_netspec(text, path), **kw)


def compile_text(text: str, file: str = "<input>", **kw) -> Compilation:
    return compile_network(parse_netspec(text, file), **kw)
