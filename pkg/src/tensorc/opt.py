"""Phase-1 expression optimizations.

Four passes run in a fixed order over the whole program DAG (loss, gradients
and test expressions together, so sharing across them is respected):

``simplify``
    algebraic identities, constant folding, index-free sums, eta reduction.
``merge_loops``
    inline a single-use, reduction-free ``IndexAbs`` into the one element
    access that reads it (fusing adjacent elementwise loops).
``code_motion``
    pull binder-independent factors out of sums and hoist reductions that do
    not depend on every index of their enclosing ``IndexAbs``.
``vectorize``
    rewrite recognized indexed patterns into tensor operations (matrix
    product, bias add, ReLU, log, reciprocal, scaling, addition).  Anything
    left over stays an ``IndexAbs`` and runs on the generic elementwise
    kernel.

Every pass iterates to a fixed point, capped at ``FIXPOINT_CAP`` rounds; a
breach raises :class:`FixpointExceeded`.  Rewrites are recorded in a
:class:`RewriteTrace`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from . import expr as E
from .errors import FixpointExceeded

FIXPOINT_CAP = 100

PASSES = ("simplify", "merge_loops", "code_motion", "vectorize")


@dataclass
class RewriteTrace:
    """Ordered (pass, rule, before, after) records."""

    records: list[tuple[str, str, E.Expr, E.Expr]] = field(default_factory=list)

    def add(self, pass_name: str, rule: str, before: E.Expr, after: E.Expr) -> None:
        self.records.append((pass_name, rule, before, after))

    def for_pass(self, name: str) -> list:
        return [r for r in self.records if r[0] == name]

    def replay(self, roots: list[E.Expr], pass_name: str | None = None) -> list[E.Expr]:
        """Apply the recorded rewrites, in order, to ``roots``."""
        for p, _rule, before, after in self.records:
            if pass_name is not None and p != pass_name:
                continue
            roots = [E.substitute(r, {id(before): after}) for r in roots]
        return roots

    def format(self, pass_name: str | None = None, width: int = 100) -> str:
        lines = []
        for p, rule, before, after in self.records:
            if pass_name is not None and p != pass_name:
                continue
            b, a = E.show(before), E.show(after)
            if len(b) > width:
                b = b[: width - 3] + "..."
            if len(a) > width:
                a = a[: width - 3] + "..."
            lines.append(f"[{p}] {rule}: {b}  ==>  {a}")
        return "\n".join(lines)

    def __len__(self) -> int:
        return len(self.records)


Rule = Callable[[E.Expr], "tuple[str, E.Expr] | None"]


def _run(roots, pass_name: str, rule_for: Callable[[list[E.Expr]], Rule], trace: RewriteTrace | None):
    single = isinstance(roots, E.Expr)
    cur = [roots] if single else list(roots)
    for _ in range(FIXPOINT_CAP):
        rule = rule_for(cur)

        def step(node: E.Expr) -> E.Expr:
            for _ in range(FIXPOINT_CAP):
                hit = rule(node)
                if hit is None:
                    return node
                name, new = hit
                if trace is not None:
                    trace.add(pass_name, name, node, new)
                node = new
            raise FixpointExceeded(f"{pass_name}: local rewrite did not settle at {E.show(node)[:80]}")

        new = E.transform(cur, step)
        if all(a is b for a, b in zip(new, cur)):
            return new[0] if single else new
        cur = new
    raise FixpointExceeded(f"{pass_name} did not reach a fixed point in {FIXPOINT_CAP} rounds")


# ---------------------------------------------------------------- simplify


def _plain(e: E.Expr) -> bool:
    return type(e) is E.Const


def _is_zero(e: E.Expr) -> bool:
    return _plain(e) and e.value == 0.0


def _is_one(e: E.Expr) -> bool:
    return _plain(e) and e.value == 1.0


def is_zero_tensor(t: E.Expr) -> bool:
    return isinstance(t, E.IndexAbs) and _is_zero(t.body)


def zero_tensor(shape) -> E.IndexAbs:
    shape = tuple(shape)
    return E.IndexAbs(tuple(f"z{i}" for i in range(len(shape))), E.ZERO, shape, None)


_FOLD = {
    E.Add: lambda a, b: a + b,
    E.Mul: lambda a, b: a * b,
    E.Div: lambda a, b: a / b if b != 0 else None,
    E.Max: max,
    E.Gt: lambda a, b: 1.0 if a > b else 0.0,
}


def _simplify_rule(node: E.Expr):
    t = type(node)
    if t in _FOLD:
        a, b = node.a, node.b
        if _plain(a) and _plain(b):
            v = _FOLD[t](a.value, b.value)
            if v is not None:
                return "fold", E.Const(float(v))
    if t is E.Add:
        if _is_zero(node.b):
            return "add-zero", node.a
        if _is_zero(node.a):
            return "add-zero", node.b
    elif t is E.Mul:
        if _is_zero(node.a) or _is_zero(node.b):
            return "mul-zero", E.ZERO
        if _is_one(node.b):
            return "mul-one", node.a
        if _is_one(node.a):
            return "mul-one", node.b
    elif t is E.Div:
        if _is_one(node.b):
            return "div-one", node.a
        if _is_zero(node.a):
            return "zero-div", E.ZERO
    elif t is E.Neg:
        if type(node.a) is E.Neg:
            return "neg-neg", node.a.a
        if _plain(node.a):
            return "fold", E.Const(-node.a.value)
    elif t is E.Log:
        if type(node.a) is E.Exp:
            return "log-exp", node.a.a
        if _plain(node.a) and node.a.value > 0:
            return "fold", E.Const(math.log(node.a.value))
    elif t is E.Exp:
        if _plain(node.a):
            return "fold", E.Const(math.exp(node.a.value))
    elif t is E.Delta:
        if node.i == node.j:
            return "delta-same", E.ONE
    elif t is E.Sum:
        if node.index not in E.free_indices(node.body):
            return "sum-invariant", E.Mul(node.body, E.Const(float(node.extent)))
    elif t is E.Elem:
        T = node.tensor
        if isinstance(T, E.IndexAbs) and E.is_const(T.body):
            return "elem-const", T.body
    elif t is E.IndexAbs:
        b = node.body
        if isinstance(b, E.Elem) and b.indices == node.indices and b.tensor.shape == node.shape:
            return "eta", b.tensor
    elif t is E.AddT:
        if is_zero_tensor(node.b):
            return "add-zero", node.a
        if is_zero_tensor(node.a):
            return "add-zero", node.b
    elif t is E.GradPrim:
        if is_zero_tensor(node.upstream):
            return "zero-upstream", zero_tensor(node.gshape)
    return None


def simplify(roots, trace: RewriteTrace | None = None):
    """Algebraic simplification to a fixed point."""
    return _run(roots, "simplify", lambda cur: _simplify_rule, trace)


def simplify_scalar(e: E.Scalar) -> E.Scalar:
    return simplify(e)


# ---------------------------------------------------------------- merge_loops


def _has_reduction(e: E.Expr) -> bool:
    if isinstance(e, (E.Sum, E.Dot, E.Precision)):
        return True
    if e.is_tensor:
        return False
    return any(_has_reduction(c) for c in E.operands(e) if not c.is_tensor)


def _merge_rule_for(cur: list[E.Expr]) -> Rule:
    counts = E.use_counts(cur)
    fusable: set[int] = set()
    for node in E.postorder(cur):
        if isinstance(node, E.Elem):
            T = node.tensor
            if (isinstance(T, E.IndexAbs) and counts.get(id(T)) == 1 and counts.get(id(node)) == 1
                    and not _has_reduction(T.body)):
                fusable.add(id(node))

    # Elem nodes are rebuilt when their tensor changes, so key on the tensor.
    fusable_tensors = {id(n.tensor) for n in E.postorder(cur) if id(n) in fusable}

    def rule(node: E.Expr):
        if isinstance(node, E.Elem) and id(node.tensor) in fusable_tensors:
            T = node.tensor
            body = E.rename_indices(T.body, dict(zip(T.indices, node.indices)))
            return "fuse", body
        return None

    return rule


def merge_loops(roots, trace: RewriteTrace | None = None):
    """Fuse single-use elementwise ``IndexAbs`` producers into their consumer."""
    return _run(roots, "merge_loops", _merge_rule_for, trace)


# ---------------------------------------------------------------- code_motion


def _motion_rule(node: E.Expr):
    if isinstance(node, E.Sum) and isinstance(node.body, E.Mul):
        k, x, y = node.index, node.body.a, node.body.b
        if k not in E.free_indices(x):
            return "sum-factor", E.Mul(x, E.Sum(k, node.extent, y))
        if k not in E.free_indices(y):
            return "sum-factor", E.Mul(E.Sum(k, node.extent, x), y)
    if isinstance(node, E.IndexAbs):
        env = dict(zip(node.indices, node.extents))
        hoisted: dict[int, E.Expr] = {}

        def find(e: E.Expr) -> None:
            if e.is_tensor:
                return
            free = E.free_indices(e)
            if (isinstance(e, (E.Sum, E.Dot)) and free < set(node.indices)):
                keep = tuple(i for i in node.indices if i in free)
                if keep:
                    t = E.IndexAbs(keep, e, tuple(env[i] for i in keep), node.site)
                else:
                    t = E.ScalarT(e)
                hoisted[id(e)] = E.Elem(t, keep)
                return
            for c in E.operands(e):
                find(c)

        if isinstance(node.body, (E.Sum, E.Dot)) and E.free_indices(node.body) == set(node.indices):
            for c in E.operands(node.body):
                find(c)
        else:
            find(node.body)
        if hoisted:
            return "hoist", E.IndexAbs(node.indices, E.substitute(node.body, hoisted), node.extents, node.site)
    return None


def code_motion(roots, trace: RewriteTrace | None = None):
    """Hoist loop-invariant reductions and factors out of their binders."""
    return _run(roots, "code_motion", lambda cur: _motion_rule, trace)


# ---------------------------------------------------------------- vectorize


def _whole(e: E.Expr, node: E.IndexAbs) -> E.Tensor | None:
    """Tensor ``A`` if ``e`` is ``A[indices]`` over exactly the node's indices."""
    if isinstance(e, E.Elem) and e.indices == node.indices and e.tensor.shape == node.shape:
        return e.tensor
    return None


def _matmul(node: E.IndexAbs):
    body = node.body
    if len(node.indices) != 2 or not isinstance(body, E.Sum) or not isinstance(body.body, E.Mul):
        return None
    c = body.index
    x, y = body.body.a, body.body.b
    if not (isinstance(x, E.Elem) and isinstance(y, E.Elem)):
        return None
    if len(x.indices) != 2 or len(y.indices) != 2:
        return None
    if x.indices.count(c) != 1 or y.indices.count(c) != 1:
        return None
    ox = x.indices[1 - x.indices.index(c)]
    oy = y.indices[1 - y.indices.index(c)]
    p, q = node.indices
    if p == q or c in (p, q):
        return None
    if (ox, oy) == (p, q):
        mm = E.MatMul(x.tensor, y.tensor, x.indices.index(c), y.indices.index(c))
    elif (ox, oy) == (q, p):
        mm = E.MatMul(y.tensor, x.tensor, y.indices.index(c), x.indices.index(c))
    else:
        return None
    return mm if mm.shape == node.shape else None


def _lift_elementwise(e: E.Expr):
    """Rewrite log / reciprocal of a whole-tensor access into tensor ops."""
    if isinstance(e, E.Log) and isinstance(e.a, E.Elem) and _full_access(e.a):
        return E.Elem(E.LogT(e.a.tensor), e.a.indices)
    if (isinstance(e, E.Div) and _is_one(e.a) and isinstance(e.b, E.Elem) and _full_access(e.b)):
        return E.Elem(E.RecipT(e.b.tensor), e.b.indices)
    return None


def _full_access(el: E.Elem) -> bool:
    return len(set(el.indices)) == len(el.indices) == len(el.tensor.shape or ())


def _vector_rule(node: E.Expr):
    if not isinstance(node, E.IndexAbs):
        return None
    b = node.body
    A = _whole(b, node)
    if A is not None:
        return "eta", A
    mm = _matmul(node)
    if mm is not None:
        return "matmul", mm
    t = type(b)
    if t is E.Add:
        for x, y in ((b.a, b.b), (b.b, b.a)):
            A = _whole(x, node)
            if (A is not None and isinstance(y, E.Elem) and y.indices == node.indices[-1:]
                    and y.tensor.shape == node.shape[-1:]):
                return "bias-add", E.BiasAdd(A, y.tensor)
        A, B = _whole(b.a, node), _whole(b.b, node)
        if A is not None and B is not None:
            return "add", E.AddT(A, B)
    if t is E.Max:
        for x, y in ((b.a, b.b), (b.b, b.a)):
            A = _whole(y, node)
            if _is_zero(x) and A is not None:
                return "relu", E.Prim("ReLU", (0,), (A,), node.site)
    if t is E.Log:
        A = _whole(b.a, node)
        if A is not None:
            return "log", E.LogT(A)
    if t is E.Div and _is_one(b.a):
        A = _whole(b.b, node)
        if A is not None:
            return "reciprocal", E.RecipT(A)
    if t is E.Mul:
        for x, y in ((b.a, b.b), (b.b, b.a)):
            A = _whole(y, node)
            if A is not None and not E.free_indices(x):
                return "scale", E.ScaleT(A, x)
    lifted: dict[int, E.Expr] = {}

    def find(e: E.Expr) -> None:
        if e.is_tensor:
            return
        new = _lift_elementwise(e)
        if new is not None:
            lifted[id(e)] = new
            return
        for c in E.operands(e):
            find(c)

    find(b)
    if lifted:
        return "lift", E.IndexAbs(node.indices, E.substitute(b, lifted), node.extents, node.site)
    return None


def vectorize(roots, trace: RewriteTrace | None = None):
    """Turn recognized indexed patterns into tensor-level operations."""
    return _run(roots, "vectorize", lambda cur: _vector_rule, trace)


PASS_FUNCS = {
    "simplify": simplify,
    "merge_loops": merge_loops,
    "code_motion": code_motion,
    "vectorize": vectorize,
}


def optimize(roots, trace: RewriteTrace | None = None, passes=PASSES):
    """Run the phase-1 passes in their fixed order."""
    for name in passes:
        roots = PASS_FUNCS[name](roots, trace)
    return roots
