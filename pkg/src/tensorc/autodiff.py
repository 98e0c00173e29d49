"""Symbolic reverse-mode differentiation.

``grads`` threads adjoints backwards through the expression DAG.  Indexed
scalar bodies are differentiated with scalar rules; each ``Elem(T, idx)``
reached with adjoint ``a`` contributes the tensor ``IndexAbs(idx, Σ a)`` to
``T``, summing over whatever context indices ``a`` still mentions.
Primitives contribute ``GradPrim`` backward forms from ``GRAD_RULES``.
Several contributions to one node are accumulated with ``AddT``.

``diff_scalar`` is the forward-style scalar derivative used for unit checks
of the individual rules.
"""

from __future__ import annotations

from typing import Callable

from . import expr as E
from .errors import InvalidSlot, NotDifferentiable

# Saved operands for each backward slot, as functions of the forward node.
# Each entry maps slot -> (forward Prim node) -> tuple of saved tensors.
Saved = Callable[[E.Prim], tuple]

GRAD_RULES: dict[str, dict[int, Saved]] = {
    "Convolv": {
        0: lambda n: (n.operands[1],),  # data gradient reads the filter
        1: lambda n: (n.operands[0],),  # filter gradient reads the input
        2: lambda n: (),                # bias gradient reads only upstream
    },
    "Pooling": {0: lambda n: (n, n.operands[0])},
    # The output suffices for the mask (out > 0 iff in > 0) and lets the
    # forward ReLU overwrite its input in place.
    "ReLU": {0: lambda n: (n,)},
    "Softmax": {0: lambda n: (n,)},
    "Dropout": {0: lambda n: (n.operands[1],)},
    "LRN": {0: lambda n: (n.operands[0], n)},
}


def has_rule(kind: str, slot: int, arity: int = 0) -> bool:
    if kind == "Concat":
        return 0 <= slot < arity
    return slot in GRAD_RULES.get(kind, {})


def prim_backward(node: E.Prim, slot: int, upstream: E.Tensor) -> E.GradPrim:
    """Backward form of primitive ``node`` with respect to operand ``slot``."""
    ops = node.operands
    if not 0 <= slot < len(ops):
        raise InvalidSlot(f"{node.kind} has no operand slot {slot}")
    wrt = ops[slot]
    if node.kind == "Concat":
        start = sum(o.shape[1] for o in ops[:slot])
        hyper = (start, start + wrt.shape[1])
        return E.GradPrim("Concat", hyper, slot, (), upstream, wrt, wrt.shape)
    rules = GRAD_RULES.get(node.kind)
    if rules is None:
        raise NotDifferentiable(f"no gradient rule for {node.kind}")
    if slot not in rules:
        raise InvalidSlot(f"{node.kind} operand {slot} is not differentiable")
    hyper = node.hyper
    if node.kind == "Dropout":
        hyper = (node.hyper[0],)
    elif node.kind == "ReLU":
        hyper = ()
    return E.GradPrim(node.kind, hyper, slot, rules[slot](node), upstream, wrt, wrt.shape)


def _accumulate(parts: list[E.Tensor]) -> E.Tensor:
    acc = parts[0]
    for p in parts[1:]:
        acc = E.AddT(acc, p)
    return acc


class _Reverse:
    def __init__(self, roots: list[E.Expr], targets: set[str]):
        self.namer = E.IndexNamer("g")
        self.contrib: dict[int, list[E.Tensor]] = {}
        self.needs: dict[int, bool] = {}
        for node in E.postorder(roots):
            if isinstance(node, E.Param):
                need = node.name in targets
            elif isinstance(node, E.Prim) and node.kind == "DropoutMask":
                need = False
            else:
                need = any(self.needs[id(c)] for c in E.operands(node))
            self.needs[id(node)] = need

    def need(self, e: E.Expr) -> bool:
        got = self.needs.get(id(e))
        if got is None:
            got = any(self.need(c) for c in E.operands(e))
            self.needs[id(e)] = got
        return got

    def add(self, t: E.Tensor, part: E.Tensor) -> None:
        self.contrib.setdefault(id(t), []).append(part)

    def scalar(self, e: E.Expr, a: E.Scalar, env: dict[str, int]) -> None:
        """Propagate scalar adjoint ``a`` into ``e`` (one occurrence)."""
        if not self.need(e):
            return
        t = type(e)
        if t is E.Add:
            self.scalar(e.a, a, env)
            self.scalar(e.b, a, env)
        elif t is E.Mul:
            self.scalar(e.a, E.Mul(a, e.b), env)
            self.scalar(e.b, E.Mul(a, e.a), env)
        elif t is E.Div:
            self.scalar(e.a, E.Div(a, e.b), env)
            self.scalar(e.b, E.Neg(E.Div(E.Mul(a, e.a), E.Mul(e.b, e.b))), env)
        elif t is E.Neg:
            self.scalar(e.a, E.Neg(a), env)
        elif t is E.Log:
            self.scalar(e.a, E.Mul(a, E.Div(E.ONE, e.a)), env)
        elif t is E.Exp:
            self.scalar(e.a, E.Mul(a, e), env)
        elif t is E.Max:
            gt = E.Gt(e.a, e.b)
            self.scalar(e.a, E.Mul(a, gt), env)
            self.scalar(e.b, E.Mul(a, E.Add(E.ONE, E.Neg(gt))), env)
        elif t is E.Sum:
            body, index = e.body, e.index
            if index in env:
                fresh = self.namer()
                body, index = E.rename_indices(body, {index: fresh}), fresh
            self.scalar(body, a, {**env, index: e.extent})
        elif t is E.Elem:
            self.elem(e.tensor, e.indices, a, env)
        elif t is E.Dot:
            for u, v in ((e.a, e.b), (e.b, e.a)):
                if self.need(u):
                    idx = tuple(self.namer() for _ in u.shape)
                    self.elem(u, idx, E.Mul(a, E.Elem(v, idx)), env)
        elif t is E.Precision:
            raise NotDifferentiable("precision (argmax) inside a differentiated expression")
        elif t in (E.Gt, E.Delta) or E.is_const(e):
            return
        else:
            raise NotDifferentiable(f"no scalar rule for {t.__name__}")

    def elem(self, T: E.Tensor, idx: tuple, a: E.Scalar, env: dict[str, int]) -> None:
        if not self.need(T):
            return
        if len(set(idx)) != len(idx):
            raise NotDifferentiable(f"diagonal access {E.show(T)}[{','.join(idx)}]")
        body = a
        rest = [v for v in env if v in E.free_indices(a) and v not in idx]
        for v in reversed(rest):
            body = E.Sum(v, env[v], body)
        self.add(T, E.IndexAbs(tuple(idx), body, tuple(T.shape), None))

    def run(self, loss: E.Scalar) -> dict[str, E.Tensor]:
        self.scalar(loss, E.ONE, {})
        out: dict[str, E.Tensor] = {}
        order = [n for n in E.postorder([loss]) if n.is_tensor]
        for node in reversed(order):
            parts = self.contrib.get(id(node))
            if not parts or not self.needs.get(id(node)):
                continue
            A = _accumulate(parts)
            t = type(node)
            if t is E.Param:
                out[node.name] = A
            elif t is E.IndexAbs:
                env = dict(zip(node.indices, node.extents))
                self.scalar(node.body, E.Elem(A, node.indices), env)
            elif t is E.Prim:
                for slot, op in enumerate(node.operands):
                    if self.needs.get(id(op)):
                        self.add(op, prim_backward(node, slot, A))
            elif t in (E.Flatten, E.Reshape):
                self.add(node.operand, E.Reshape(A, node.operand.shape))
            elif t in (E.Copy, E.ToDevice):
                self.add(node.operand, A)
            elif t is E.ScalarT:
                self.scalar(node.expr, E.Elem(A, ()), {})
            else:
                raise NotDifferentiable(f"no gradient rule for {t.__name__}")
        return out


def grads(loss: E.Scalar, params) -> dict[str, E.Tensor]:
    """Gradients of ``loss`` for each parameter (by name), sharing one sweep.

    ``loss`` must be shape-bound (see :func:`tensorc.infer.bind`).
    """
    params = list(params)
    names = [p if isinstance(p, str) else p.name for p in params]
    out = _Reverse([loss], set(names)).run(loss)
    missing = [n for n in names if n not in out]
    if missing:
        raise NotDifferentiable(f"loss does not depend on {', '.join(missing)}")
    return {n: out[n] for n in names}


def grad(loss: E.Scalar, p) -> E.Tensor:
    name = p if isinstance(p, str) else p.name
    return grads(loss, [name])[name]


# ---------------------------------------------------------------- scalar rules


def diff_scalar(e: E.Expr, wrt) -> E.Scalar:
    """Derivative of scalar ``e`` with respect to one element ``wrt``.

    ``wrt`` is ``Elem(U, idx)`` (the derivative then mentions ``idx`` free) or
    a rank-0 ``Param``.  Sums whose binder meets a Kronecker delta against a
    ``wrt`` index are collapsed.
    """
    from .opt import simplify_scalar

    if isinstance(wrt, E.Param):
        wrt = E.Elem(wrt, tuple(f"w{i}" for i in range(len(wrt.shape or ()))))
    if not isinstance(wrt, E.Elem):
        raise TypeError("diff_scalar differentiates with respect to an Elem or Param")
    return simplify_scalar(_Forward(wrt).d(e))


class _Forward:
    def __init__(self, wrt: E.Elem):
        self.U = wrt.tensor
        self.widx = wrt.indices
        self.namer = E.IndexNamer("f")

    def contains(self, T: E.Expr) -> bool:
        return any(n is self.U for n in E.postorder([T]))

    def d(self, e: E.Expr) -> E.Scalar:
        t = type(e)
        if E.is_const(e) or t in (E.Gt, E.Delta):
            return E.ZERO
        if t is E.Add:
            return E.Add(self.d(e.a), self.d(e.b))
        if t is E.Mul:
            return E.Add(E.Mul(self.d(e.a), e.b), E.Mul(e.a, self.d(e.b)))
        if t is E.Div:
            num = E.Add(E.Mul(self.d(e.a), e.b), E.Neg(E.Mul(e.a, self.d(e.b))))
            return E.Div(num, E.Mul(e.b, e.b))
        if t is E.Neg:
            return E.Neg(self.d(e.a))
        if t is E.Log:
            return E.Div(self.d(e.a), e.a)
        if t is E.Exp:
            return E.Mul(e, self.d(e.a))
        if t is E.Max:
            gt = E.Gt(e.a, e.b)
            return E.Add(E.Mul(gt, self.d(e.a)), E.Mul(E.Add(E.ONE, E.Neg(gt)), self.d(e.b)))
        if t is E.Sum:
            body, k = e.body, e.index
            if k in self.widx:
                fresh = self.namer()
                body, k = E.rename_indices(body, {k: fresh}), fresh
            return collapse_sum(k, e.extent, self.d(body))
        if t is E.Elem:
            T = e.tensor
            if T is self.U:
                out: E.Scalar = E.ONE
                for a, b in zip(e.indices, self.widx):
                    if a != b:
                        out = E.Mul(out, E.Delta(a, b))
                return out
            if isinstance(T, E.IndexAbs):
                return self.d(E.rename_indices(T.body, dict(zip(T.indices, e.indices))))
            if self.contains(T):
                raise NotDifferentiable(f"scalar derivative through {type(T).__name__}")
            return E.ZERO
        if t is E.Dot:
            shape = e.a.shape
            idx = tuple(self.namer() for _ in shape)
            body: E.Scalar = E.Mul(E.Elem(e.a, idx), E.Elem(e.b, idx))
            for ix, n in reversed(list(zip(idx, shape))):
                body = E.Sum(ix, n, body)
            return self.d(body)
        if t is E.Precision:
            raise NotDifferentiable("precision is not differentiable")
        raise NotDifferentiable(f"no scalar rule for {t.__name__}")


def _find_delta(e: E.Expr, k: str):
    """A Delta mentioning ``k`` on the multiplicative spine of ``e``."""
    if isinstance(e, E.Delta) and k in (e.i, e.j) and e.i != e.j:
        return e
    if isinstance(e, E.Mul):
        return _find_delta(e.a, k) or _find_delta(e.b, k)
    if isinstance(e, E.Neg):
        return _find_delta(e.a, k)
    if isinstance(e, E.Div):
        return _find_delta(e.a, k)
    return None


def _drop_delta(e: E.Expr, delta: E.Delta) -> E.Expr:
    if e is delta:
        return E.ONE
    if isinstance(e, E.Mul):
        return E.Mul(_drop_delta(e.a, delta), _drop_delta(e.b, delta))
    if isinstance(e, E.Neg):
        return E.Neg(_drop_delta(e.a, delta))
    if isinstance(e, E.Div):
        return E.Div(_drop_delta(e.a, delta), e.b)
    return e


def collapse_sum(k: str, extent: int, body: E.Scalar) -> E.Scalar:
    """``Σ_k body`` with Kronecker deltas on ``k`` eliminated."""
    if isinstance(body, E.Add):
        return E.Add(collapse_sum(k, extent, body.a), collapse_sum(k, extent, body.b))
    delta = _find_delta(body, k)
    if delta is not None:
        other = delta.j if delta.i == k else delta.i
        return E.rename_indices(_drop_delta(body, delta), {k: other})
    if k not in E.free_indices(body):
        return E.Mul(body, E.Const(float(extent)))
    return E.Sum(k, extent, body)
