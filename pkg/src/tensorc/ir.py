"""Phase 2: single-assignment statements and the passes over them.

A train body is produced by

    to_ssa -> cse -> form_updates -> schedule -> inline_inplace -> insert_dealloc

and checked with :func:`verify`.  Statement operands are *atoms*: SSA
variables (``Var``), parameters, dataset inputs, or one of the cheap
wrappers that never need their own storage (``Flatten``/``Reshape`` views,
``Indicator`` of an input, ``Copy``).  Statements print in the surface
syntax of the memory table: ``val X9 = Pooling(2,2,0,true)(X8)``,
``Dealloc(X18)``, ``cv1_B <~~ X74 * d_Convolv(1,0)()/d_cv1_B``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from typing import Iterable, Union

from . import expr as E
from .errors import CycleDetected, VerifyError
from .shapes import nbytes

# ---------------------------------------------------------------- statements


@dataclass(frozen=True)
class Let:
    var: str
    rhs: E.Expr
    shape: tuple
    inplace: str | None = None  # SSA variable whose storage the result overwrites

    def text(self) -> str:
        return f"val {self.var} = {E.show(self.rhs)}"


@dataclass(frozen=True)
class Dealloc:
    var: str
    pool: bool = False  # runtime-efficient mode: the block goes back to the pool

    def text(self) -> str:
        return f"Dealloc({self.var})"


@dataclass(frozen=True)
class Update:
    """``target = beta * target + alpha * scale * (rhs + decay * decay_of)``."""

    target: str
    rhs: E.Expr
    alpha: float
    beta: float
    decay: float = 0.0
    decay_of: str | None = None
    scale: str | None = None

    def text(self) -> str:
        return f"{self.target} <~~ {E.show(self.rhs)}"


@dataclass(frozen=True)
class Print:
    rhs: E.Scalar
    label: str = "loss"

    def text(self) -> str:
        return f"Print({E.show(self.rhs)})"


@dataclass(frozen=True)
class Save:
    names: tuple[str, ...]

    def text(self) -> str:
        return f"Save({', '.join(self.names)})"


IrStmt = Union[Let, Dealloc, Update, Print, Save]

# ---------------------------------------------------------------- program


@dataclass(frozen=True)
class ParamInfo:
    name: str
    shape: tuple
    init: tuple
    lr_mult: float = 1.0
    decay_mult: float = 1.0


@dataclass(frozen=True)
class ConvInfo:
    site: str
    in_shape: tuple
    w_shape: tuple
    out_shape: tuple

    @property
    def im2col_elems(self) -> int:
        n, c = self.in_shape[0], self.in_shape[1]
        k = self.w_shape[2]
        return n * c * k * k * self.out_shape[2] * self.out_shape[3]


@dataclass
class IrProgram:
    name: str
    params: list[ParamInfo]
    velocities: list[tuple[str, tuple]]
    train: list[IrStmt]
    test: list[IrStmt]
    solver: object
    data: object
    mode: str = "dealloc"
    workspace_cap_mb: float | None = None
    convs: list[ConvInfo] = field(default_factory=list)
    elem_bytes: int = 4
    inputs: dict = field(default_factory=dict)

    def persistent(self) -> set[str]:
        return {p.name for p in self.params} | {v for v, _ in self.velocities}

    def format(self, body: str = "train") -> str:
        return format_stmts(self.train if body == "train" else self.test)


def format_stmts(stmts: Iterable[IrStmt]) -> str:
    return "\n".join(s.text() for s in stmts)


# ---------------------------------------------------------------- atoms and uses


_WRAPPERS = (E.Flatten, E.Reshape, E.Indicator, E.Copy)


def is_atom(e: E.Expr) -> bool:
    if isinstance(e, (E.Var, E.Param, E.Input)):
        return True
    return isinstance(e, _WRAPPERS) and is_atom(e.operand)


def base_var(atom: E.Expr) -> E.Expr:
    while isinstance(atom, _WRAPPERS):
        atom = atom.operand
    return atom


def _ordered_children(node: E.Expr) -> list[E.Expr]:
    if isinstance(node, E.GradPrim):
        return [node.upstream, *node.saved]
    return E.operands(node)


def expr_vars(e: E.Expr) -> list[str]:
    """Names of variables and parameters read by ``e``, in printed order."""
    out: list[str] = []
    seen: set[str] = set()

    def visit(x: E.Expr) -> None:
        if isinstance(x, (E.Var, E.Param)):
            if x.name not in seen:
                seen.add(x.name)
                out.append(x.name)
            return
        for c in _ordered_children(x):
            visit(c)

    visit(e)
    return out


def reads(s: IrStmt) -> list[str]:
    if isinstance(s, (Let, Print)):
        return expr_vars(s.rhs)
    if isinstance(s, Update):
        out = expr_vars(s.rhs)
        for extra in (s.decay_of, s.scale):
            if extra is not None and extra not in out:
                out.append(extra)
        return out
    if isinstance(s, Dealloc):
        return [s.var]
    return []


def writes(s: IrStmt) -> list[str]:
    if isinstance(s, Let):
        return [s.var]
    if isinstance(s, Update):
        return [s.target]
    return []


def _rename(e: E.Expr, names: dict[str, E.Expr]) -> E.Expr:
    if not names:
        return e
    mapping = {}
    for node in E.postorder([e], into_labels=True):
        if isinstance(node, E.Var) and node.name in names:
            mapping[id(node)] = names[node.name]
    return E.substitute(e, mapping)


# ---------------------------------------------------------------- to_ssa


def _heights(roots: list[E.Expr]) -> dict[int, int]:
    h: dict[int, int] = {}
    for node in E.postorder(roots):
        kids = E.operands(node)
        h[id(node)] = 1 + max((h[id(c)] for c in kids), default=0)
    return h


def _tensor_children(node: E.Expr) -> list[E.Expr]:
    return E.tensor_operands(node)


class _SSA:
    def __init__(self, roots: list[E.Expr], start: int):
        self.n = start
        self.stmts: list[IrStmt] = []
        self.memo: dict[int, E.Expr] = {}
        self.height = _heights(roots)
        counts = E.use_counts(roots)
        self.shared = {k for k, v in counts.items() if v > 1}

    def fresh(self) -> str:
        name = f"X{self.n}"
        self.n += 1
        return name

    def order(self, kids: list[E.Expr]) -> list[E.Expr]:
        return sorted(kids, key=lambda k: -self.height.get(id(k), 0))

    def emit(self, node: E.Expr, only_shared: bool) -> E.Expr | None:
        """Atom for tensor ``node``, emitting Lets for it and its dependencies.

        With ``only_shared`` a non-shared node is not emitted itself (its
        shared descendants still are) and ``None`` is returned.
        """
        got = self.memo.get(id(node))
        if got is not None:
            return got
        if isinstance(node, (E.Var, E.Param, E.Input)):
            self.memo[id(node)] = node
            return node
        for k in self.order(_tensor_children(node)):
            self.emit(k, only_shared)
        if isinstance(node, _WRAPPERS):
            inner = self.memo.get(id(node.operand))
            if inner is None:
                return None
            atom = E.map_children(node, lambda c: inner if c is node.operand else c)
            self.memo[id(node)] = atom
            return atom
        if only_shared and id(node) not in self.shared:
            return None
        for k in _tensor_children(node):
            self.emit(k, False)
        rhs = self.rebuild(node)
        name = self.fresh()
        self.stmts.append(Let(name, rhs, tuple(node.shape)))
        atom = E.Var(name, tuple(node.shape))
        self.memo[id(node)] = atom
        return atom

    def rebuild(self, e: E.Expr) -> E.Expr:
        memo: dict[int, E.Expr] = {}

        def go(x: E.Expr, top: bool = False) -> E.Expr:
            if x.is_tensor and not top:
                got = self.memo.get(id(x))
                return got if got is not None else x
            if id(x) in memo:
                return memo[id(x)]
            new_args = []
            for fname, v in zip(x._fields, x._args):
                if fname in x._labels:
                    new_args.append(self.memo.get(id(v), v) if isinstance(v, E.Expr) else v)
                elif isinstance(v, E.Expr):
                    new_args.append(go(v))
                elif isinstance(v, tuple) and any(isinstance(y, E.Expr) for y in v):
                    new_args.append(tuple(go(y) if isinstance(y, E.Expr) else y for y in v))
                else:
                    new_args.append(v)
            out = type(x)(*new_args)
            memo[id(x)] = out
            return out

        return go(e, top=True)


def to_ssa(prints: list[tuple[str, E.Scalar]], outputs: list[E.Tensor] = (), start: int = 1):
    """Break expressions into single-assignment statements.

    ``prints`` are (label, scalar) pairs that become ``Print`` statements;
    ``outputs`` are tensors whose atoms are returned (gradients).  Roots are
    processed in order; within each, values with several consumers are
    named first (deepest operand first), then the rest of that root.  Names
    ``X<start>``, ``X<start+1>``, ... follow emission order.
    """
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 20000))
    try:
        roots = [s for _, s in prints] + list(outputs)
        ssa = _SSA(roots, start)
        for r in roots:
            for only_shared in (True, False):
                if r.is_tensor:
                    ssa.emit(r, only_shared)
                else:
                    for k in ssa.order(_tensor_children(r)):
                        ssa.emit(k, only_shared)
        for label, s in prints:
            ssa.stmts.append(Print(ssa.rebuild(s), label))
        atoms = [ssa.emit(t, False) for t in outputs]
        return ssa.stmts, atoms
    finally:
        sys.setrecursionlimit(old)


# ---------------------------------------------------------------- cse


def _mergeable(rhs: E.Expr) -> bool:
    for node in E.postorder([rhs]):
        if isinstance(node, E.Copy):
            return False
        if isinstance(node, E.Prim) and node.kind == "DropoutMask":
            return False
    return True


def cse(stmts: list[IrStmt]) -> list[IrStmt]:
    """Compute each syntactically identical pure right-hand side once."""
    names: dict[str, E.Expr] = {}
    seen: dict[int, str] = {}
    keep: dict[int, E.Expr] = {}
    out: list[IrStmt] = []
    for s in stmts:
        if isinstance(s, Let):
            rhs = _rename(s.rhs, names)
            if _mergeable(rhs) and id(rhs) in seen:
                names[s.var] = E.Var(seen[id(rhs)], s.shape)
                continue
            seen[id(rhs)] = s.var
            keep[id(rhs)] = rhs
            out.append(replace(s, rhs=rhs))
        elif isinstance(s, (Update, Print)):
            out.append(replace(s, rhs=_rename(s.rhs, names)))
        elif isinstance(s, Dealloc) and s.var in names:
            continue
        else:
            out.append(s)
    return out


# ---------------------------------------------------------------- updates


def velocity_name(p: str) -> str:
    return f"{p}_v"


def form_updates(stmts: list[IrStmt], params: list[ParamInfo], grads: dict[str, E.Expr], solver):
    """Append parameter updates for momentum SGD with weight decay.

    Per parameter with multipliers ``m`` (lr) and ``d`` (decay)::

        v <- momentum * v - lr*m * (g + decay*d * p)
        p <- p + v

    With zero momentum a single ``p <- p - lr*m * (g + decay*d * p)`` is
    emitted.  A gradient used only by its update is computed inside the
    update (no temporary).  With ``clip > 0`` all gradients are scaled by a
    global factor ``min(1, clip / ||g + decay*d*p||)``.
    Returns (statements, velocities).
    """
    stmts = list(stmts)
    uses: dict[str, int] = {}
    for s in stmts:
        for v in reads(s):
            uses[v] = uses.get(v, 0) + 1
    lets = {s.var: i for i, s in enumerate(stmts) if isinstance(s, Let)}
    clip = float(getattr(solver, "clip", 0.0) or 0.0)
    momentum = float(solver.momentum)
    lr = float(solver.lr)
    decay = float(solver.decay)
    drop: set[int] = set()
    scale_var = None
    if clip > 0:
        ops: list[E.Expr] = []
        lambdas = []
        for p in params:
            ops += [grads[p.name], E.Param(p.name, p.shape)]
            lambdas.append(decay * p.decay_mult)
        scale_var = f"X{_next_index(stmts)}"
        stmts.append(Let(scale_var, E.Prim("ClipScale", (clip, tuple(lambdas)), tuple(ops), "clip"), ()))
    updates: list[IrStmt] = []
    velocities: list[tuple[str, tuple]] = []
    for p in params:
        g = grads[p.name]
        rhs = g
        if clip == 0 and isinstance(g, E.Var) and uses.get(g.name, 0) == 0 and g.name in lets:
            drop.add(lets[g.name])
            rhs = stmts[lets[g.name]].rhs
        lam = decay * p.decay_mult
        alpha = -lr * p.lr_mult
        if momentum > 0:
            v = velocity_name(p.name)
            velocities.append((v, p.shape))
            updates.append(Update(v, rhs, alpha, momentum, lam, p.name if lam else None, scale_var))
            updates.append(Update(p.name, E.Param(v, p.shape), 1.0, 1.0))
        else:
            updates.append(Update(p.name, rhs, alpha, 1.0, lam, p.name if lam else None, scale_var))
    body = [s for i, s in enumerate(stmts) if i not in drop]
    return body + updates, velocities


def _next_index(stmts: list[IrStmt]) -> int:
    n = 0
    for s in stmts:
        if isinstance(s, Let) and s.var[1:].isdigit():
            n = max(n, int(s.var[1:]))
    return n + 1


# ---------------------------------------------------------------- schedule


def _deps(stmts: list[IrStmt]) -> list[set[int]]:
    """Dependency sets from reads/writes in program order (RAW, WAR, WAW)."""
    deps: list[set[int]] = [set() for _ in stmts]
    last_write: dict[str, int] = {}
    readers: dict[str, list[int]] = {}
    for i, s in enumerate(stmts):
        for v in reads(s):
            if v in last_write:
                deps[i].add(last_write[v])
            readers.setdefault(v, []).append(i)
        for v in writes(s):
            if v in last_write:
                deps[i].add(last_write[v])
            for r in readers.get(v, []):
                if r != i:
                    deps[i].add(r)
            readers[v] = []
            last_write[v] = i
    return deps


def stmt_bytes(s: IrStmt, elem_bytes: int = 4) -> int:
    if isinstance(s, Let) and s.inplace is None:
        return nbytes(s.shape, elem_bytes)
    return 0


def schedule(stmts: list[IrStmt], elem_bytes: int = 4) -> list[IrStmt]:
    """Greedy topological order that frees memory as early as possible.

    Among ready statements pick the one releasing the most bytes (temporaries
    whose last pending reader it is); ties go to statements that allocate
    nothing, then to the original order.
    """
    n = len(stmts)
    deps = _deps(stmts)
    users: list[list[int]] = [[] for _ in stmts]
    for i, d in enumerate(deps):
        for j in d:
            users[j].append(i)
    temp_bytes = {s.var: nbytes(s.shape, elem_bytes) for s in stmts if isinstance(s, Let)}
    pending_reads: dict[str, int] = {}
    stmt_reads = [[v for v in reads(s) if v in temp_bytes] for s in stmts]
    for rs in stmt_reads:
        for v in rs:
            pending_reads[v] = pending_reads.get(v, 0) + 1
    missing = [len(d) for d in deps]
    ready = {i for i in range(n) if missing[i] == 0}
    done: list[int] = []
    while ready:
        best, best_key = None, None
        for i in ready:
            released = sum(temp_bytes[v] for v in stmt_reads[i] if pending_reads[v] == 1)
            key = (-released, 1 if stmt_bytes(stmts[i], elem_bytes) else 0, i)
            if best_key is None or key < best_key:
                best, best_key = i, key
        ready.remove(best)
        done.append(best)
        for v in stmt_reads[best]:
            pending_reads[v] -= 1
        for u in users[best]:
            missing[u] -= 1
            if missing[u] == 0:
                ready.add(u)
    if len(done) != n:
        raise CycleDetected(f"{n - len(done)} statements on a dependency cycle")
    return [stmts[i] for i in done]


# ---------------------------------------------------------------- in-place


INPLACE_KINDS = (E.LogT, E.RecipT, E.BiasAdd, E.ScaleT, E.AddT)


def _inplace_candidate(rhs: E.Expr) -> bool:
    if isinstance(rhs, INPLACE_KINDS):
        return True
    return isinstance(rhs, E.Prim) and rhs.kind == "ReLU"


def _first_operand(rhs: E.Expr) -> E.Expr:
    if isinstance(rhs, E.Prim):
        return rhs.operands[0]
    if isinstance(rhs, (E.LogT, E.RecipT, E.ScaleT)):
        return rhs.operand
    return rhs.a


def _with_first(rhs: E.Expr, new: E.Expr) -> E.Expr:
    if isinstance(rhs, E.Prim):
        return E.Prim(rhs.kind, rhs.hyper, (new,) + tuple(rhs.operands[1:]), rhs.site)
    if isinstance(rhs, (E.LogT, E.RecipT)):
        return type(rhs)(new)
    if isinstance(rhs, E.ScaleT):
        return E.ScaleT(new, rhs.factor)
    return type(rhs)(new, rhs.b)


def inline_inplace(stmts: list[IrStmt], persistent: Iterable[str] = ()) -> list[IrStmt]:
    """Let in-place operations overwrite a dead operand, or copy it first.

    Ops in the in-place set write into their first operand's storage when
    that operand is an SSA temporary with no later use; otherwise the operand
    is wrapped in ``Copy`` (``Log X19.copy``) so the op writes into a fresh
    buffer.  Parameters and inputs are never overwritten.
    """
    persistent = set(persistent)
    temps = {s.var for s in stmts if isinstance(s, Let)} - persistent
    last_use: dict[str, int] = {}
    for i, s in enumerate(stmts):
        for v in reads(s):
            last_use[v] = i
    out: list[IrStmt] = []
    for i, s in enumerate(stmts):
        if not (isinstance(s, Let) and _inplace_candidate(s.rhs)):
            out.append(s)
            continue
        rhs = s.rhs
        if isinstance(rhs, E.AddT) and not _can_overwrite(rhs.a, rhs, i, temps, last_use, s.shape):
            if _can_overwrite(rhs.b, rhs, i, temps, last_use, s.shape):
                rhs = E.AddT(rhs.b, rhs.a)
        first = _first_operand(rhs)
        if _can_overwrite(first, rhs, i, temps, last_use, s.shape):
            out.append(replace(s, rhs=rhs, inplace=base_var(first).name))
        else:
            out.append(replace(s, rhs=_with_first(rhs, E.Copy(first))))
    return out


def _can_overwrite(atom, rhs, i, temps, last_use, shape) -> bool:
    b = base_var(atom)
    if not isinstance(b, E.Var) or b.name not in temps:
        return False
    if isinstance(atom, (E.Copy, E.Indicator)):
        return False
    if last_use.get(b.name) != i:
        return False
    if expr_vars(rhs).count(b.name) != 1 or _occurrences(rhs, b) != 1:
        return False
    return b.shape is not None and _numel(b.shape) == _numel(shape)


def _occurrences(rhs: E.Expr, v: E.Var) -> int:
    n = 0

    def visit(x):
        nonlocal n
        if x is v:
            n += 1
            return
        for c in _ordered_children(x):
            visit(c)

    visit(rhs)
    return n


def _numel(shape) -> int:
    out = 1
    for d in shape:
        out *= d
    return out


# ---------------------------------------------------------------- dealloc


def insert_dealloc(stmts: list[IrStmt], mode: str = "dealloc", persistent: Iterable[str] = ()) -> list[IrStmt]:
    """Free every temporary right after its last use.

    A temporary overwritten in place hands its storage to the new variable
    and is not freed itself.  In ``reuse`` mode the markers are tagged as
    pool releases.
    """
    persistent = set(persistent)
    temps = [s.var for s in stmts if isinstance(s, Let) and s.var not in persistent]
    last_use: dict[str, int] = {}
    defined: dict[str, int] = {}
    for i, s in enumerate(stmts):
        if isinstance(s, Let):
            defined[s.var] = i
        for v in reads(s):
            last_use[v] = i
    consumed = {s.inplace for s in stmts if isinstance(s, Let) and s.inplace}
    after: dict[int, list[str]] = {}
    for v in temps:
        if v in consumed:
            continue
        at = last_use.get(v, defined[v])
        after.setdefault(at, []).append(v)
    out: list[IrStmt] = []
    for i, s in enumerate(stmts):
        out.append(s)
        names = after.get(i, [])
        if names:
            order = {v: k for k, v in enumerate(reads(s))}
            for v in sorted(names, key=lambda x: order.get(x, -1)):
                out.append(Dealloc(v, pool=(mode == "reuse")))
    return out


# ---------------------------------------------------------------- verify


def verify(stmts: list[IrStmt], persistent: Iterable[str] = (), inputs: Iterable[str] = (),
           require_dealloc: bool = True) -> None:
    """Check SSA form, def-before-use and dealloc placement; raise VerifyError."""
    persistent = set(persistent) | set(inputs)
    defined: dict[str, int] = {}
    freed: dict[str, int] = {}
    consumed: dict[str, int] = {}
    last_use: dict[str, int] = {}
    for i, s in enumerate(stmts):
        for v in reads(s) if not isinstance(s, Dealloc) else []:
            if v in persistent:
                continue
            if v not in defined:
                raise VerifyError(f"statement {i} ({s.text()}) reads {v} before its definition")
            if v in freed:
                raise VerifyError(f"statement {i} ({s.text()}) reads {v} after Dealloc")
            if v in consumed and consumed[v] < i:
                raise VerifyError(f"statement {i} reads {v} after it was overwritten in place")
            last_use[v] = i
        if isinstance(s, Let):
            if s.var in defined or s.var in persistent:
                raise VerifyError(f"{s.var} assigned twice")
            defined[s.var] = i
            if s.inplace:
                consumed[s.inplace] = i
        elif isinstance(s, Dealloc):
            if s.var in persistent:
                raise VerifyError(f"Dealloc of persistent {s.var}")
            if s.var not in defined:
                raise VerifyError(f"Dealloc of undefined {s.var}")
            if s.var in freed:
                raise VerifyError(f"{s.var} deallocated twice")
            if s.var in consumed:
                raise VerifyError(f"Dealloc of {s.var} whose storage was taken over in place")
            freed[s.var] = i
        elif isinstance(s, Update):
            if s.target not in persistent:
                raise VerifyError(f"Update of non-persistent {s.target}")
    if require_dealloc:
        for v, i in defined.items():
            if v in consumed:
                continue
            if v not in freed:
                raise VerifyError(f"{v} is never deallocated")
            anchor = last_use.get(v, i)
            j = freed[v]
            if j < anchor:
                raise VerifyError(f"Dealloc({v}) precedes a use")
            if any(not isinstance(stmts[k], Dealloc) for k in range(anchor + 1, j)):
                raise VerifyError(f"Dealloc({v}) is not immediately after its last use")


def verify_topological(original: list[IrStmt], scheduled: list[IrStmt]) -> None:
    """``scheduled`` is a permutation of ``original`` respecting its dependencies."""
    if sorted(map(id, original)) != sorted(map(id, scheduled)):
        raise VerifyError("schedule is not a permutation of its input")
    pos = {id(s): k for k, s in enumerate(scheduled)}
    for i, d in enumerate(_deps(original)):
        for j in d:
            if pos[id(original[j])] > pos[id(original[i])]:
                raise VerifyError(f"schedule places {original[i].text()} before its dependency {original[j].text()}")
