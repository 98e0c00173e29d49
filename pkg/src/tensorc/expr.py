"""Scalar and tensor expression trees.

A tensor is either an opaque leaf (input, parameter, variable), a primitive
layer application, or an *indexed scalar expression*: ``IndexAbs(indices,
body)`` denotes the tensor whose element at ``indices`` is the scalar
``body``.  Fully connected layers, the log loss and every gradient that is
not a bundled primitive backward form are written this way.

Nodes are immutable and hash-consed: constructing a node that is
structurally equal to a live one returns the same object.  Identity is
therefore structural equality, which keeps DAG sharing explicit (common
subterms are literally shared) and makes equality and hashing O(1).
"""

from __future__ import annotations

import itertools
import weakref
from typing import Callable, Iterable, Iterator

from . import shapes
from .errors import ShapeMismatch

_TABLE: "weakref.WeakValueDictionary[tuple, Expr]" = weakref.WeakValueDictionary()


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    if isinstance(v, tuple):
        return tuple(_freeze(x) for x in v)
    return v


class Expr:
    __slots__ = ("_args", "shape", "__weakref__")
    _fields: tuple[str, ...] = ()
    _defaults: dict = {}
    _labels: tuple[str, ...] = ()
    is_tensor = False

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        for i, name in enumerate(cls._fields):
            setattr(cls, name, property(lambda self, i=i: self._args[i]))

    def __new__(cls, *args, **kwargs):
        fields = cls._fields
        if len(args) < len(fields):
            rest = []
            for name in fields[len(args):]:
                if name in kwargs:
                    rest.append(kwargs.pop(name))
                elif name in cls._defaults:
                    rest.append(cls._defaults[name])
                else:
                    raise TypeError(f"{cls.__name__} missing field {name!r}")
            args = args + tuple(rest)
        if kwargs or len(args) != len(fields):
            raise TypeError(f"bad arguments for {cls.__name__}: {args} {kwargs}")
        args = tuple(_freeze(a) for a in args)
        key = (cls, args)
        node = _TABLE.get(key)
        if node is None:
            node = object.__new__(cls)
            node._args = args
            node.shape = None
            node.shape = node._infer_shape()
            _TABLE[key] = node
        return node

    def __init__(self, *args, **kwargs):
        pass

    def __reduce__(self):
        return (type(self), self._args)

    def _infer_shape(self):
        return None

    @property
    def args(self) -> tuple:
        return self._args

    def replace(self, **changes) -> "Expr":
        vals = dict(zip(self._fields, self._args))
        vals.update(changes)
        return type(self)(*(vals[f] for f in self._fields))

    def __repr__(self) -> str:
        return show(self)


def _nodes_in(v) -> Iterator[Expr]:
    if isinstance(v, Expr):
        yield v
    elif isinstance(v, tuple):
        for x in v:
            if isinstance(x, Expr):
                yield x


def operands(node: Expr) -> list[Expr]:
    """Child nodes whose values ``node`` reads (label-only fields excluded)."""
    out: list[Expr] = []
    for name, v in zip(node._fields, node._args):
        if name in node._labels:
            continue
        out.extend(_nodes_in(v))
    return out


def tensor_operands(node: Expr) -> list[Expr]:
    """Tensors read by ``node``, looking through scalar bodies."""
    out: list[Expr] = []
    seen: set[int] = set()

    def visit(e: Expr) -> None:
        for c in operands(e):
            if c.is_tensor:
                if id(c) not in seen:
                    seen.add(id(c))
                    out.append(c)
            else:
                visit(c)

    visit(node)
    return out


def map_children(node: Expr, fn: Callable[[Expr], Expr]) -> Expr:
    new = []
    changed = False
    for v in node._args:
        if isinstance(v, Expr):
            nv = fn(v)
            changed |= nv is not v
        elif isinstance(v, tuple) and any(isinstance(x, Expr) for x in v):
            nv = tuple(fn(x) if isinstance(x, Expr) else x for x in v)
            changed |= any(a is not b for a, b in zip(nv, v))
        else:
            nv = v
        new.append(nv)
    return type(node)(*new) if changed else node


# ---------------------------------------------------------------- tensors


class Tensor(Expr):
    __slots__ = ()
    is_tensor = True

    @property
    def rank(self) -> int | None:
        return None if self.shape is None else len(self.shape)


def _all_known(*ss) -> bool:
    return all(s is not None for s in ss)


class Var(Tensor):
    """A tensor variable: function binder or an SSA name in the IR."""

    __slots__ = ()
    _fields = ("name", "vshape")
    _defaults = {"vshape": None}

    def _infer_shape(self):
        return self.vshape


class Input(Tensor):
    """A dataset slot: ``X`` (images, float) or ``Y`` (labels, integer)."""

    __slots__ = ()
    _fields = ("name", "ishape", "kind")
    _defaults = {"kind": "image"}

    def _infer_shape(self):
        return self.ishape


class Param(Tensor):
    """A trainable parameter.

    ``hint`` is a partial shape (``None`` for unknown extents) supplied by the
    declaring layer; inference fills the gaps from the first constraining use.
    """

    __slots__ = ()
    _fields = ("name", "pshape", "hint")
    _defaults = {"pshape": None, "hint": None}

    def _infer_shape(self):
        return self.pshape


class ToDevice(Tensor):
    """Host-to-device load of a batch (printed ``Cuda(X)`` as in the IR listings)."""

    __slots__ = ()
    _fields = ("operand",)

    def _infer_shape(self):
        return self.operand.shape


class Indicator(Tensor):
    """One-hot encoding of integer labels over ``classes``."""

    __slots__ = ()
    _fields = ("operand", "classes")

    def _infer_shape(self):
        s = self.operand.shape
        return None if s is None else s + (self.classes,)


class Prim(Tensor):
    """Application of a primitive layer kernel."""

    __slots__ = ()
    _fields = ("kind", "hyper", "operands", "site")
    _defaults = {"site": None}
    _labels = ()

    def _infer_shape(self):
        ins = [o.shape for o in self.operands]
        if not _all_known(*ins):
            return None
        return shapes.shape_rule(self.kind, self.hyper, ins, self.site)


class Flatten(Tensor):
    """Collapse axes ``axis..rank-1`` of a rank-``rank`` tensor into one."""

    __slots__ = ()
    _fields = ("operand", "frank", "axis", "site")
    _defaults = {"site": None}

    def _infer_shape(self):
        s = self.operand.shape
        if s is None:
            return None
        return shapes.shape_rule("Flatten", (self.frank, self.axis), [s], self.site or "flatten")


class Reshape(Tensor):
    __slots__ = ()
    _fields = ("operand", "rshape")

    def _infer_shape(self):
        s = self.operand.shape
        if s is not None and shapes.numel(s) != shapes.numel(self.rshape):
            raise ShapeMismatch("reshape", shapes.numel(self.rshape), shapes.numel(s))
        return self.rshape


class Copy(Tensor):
    __slots__ = ()
    _fields = ("operand",)

    def _infer_shape(self):
        return self.operand.shape


class IndexAbs(Tensor):
    """Tensor whose element at ``indices`` is the scalar ``body``."""

    __slots__ = ()
    _fields = ("indices", "body", "extents", "site")
    _defaults = {"extents": None, "site": None}

    def _infer_shape(self):
        ext = self.extents
        if ext is None or any(e is None for e in ext):
            return None
        if len(ext) != len(self.indices):
            raise ShapeMismatch(self.site or "index abstraction", len(self.indices), len(ext))
        return tuple(ext)


class ScalarT(Tensor):
    """A rank-0 tensor holding a scalar expression (hoisted invariant)."""

    __slots__ = ()
    _fields = ("expr",)

    def _infer_shape(self):
        return ()


class GradPrim(Tensor):
    """Backward form of a primitive for one operand slot.

    ``saved`` are the forward values the backward kernel reads; ``wrt`` is the
    forward operand being differentiated, kept only for printing (it is not a
    use of that value).
    """

    __slots__ = ()
    _fields = ("kind", "hyper", "slot", "saved", "upstream", "wrt", "gshape")
    _labels = ("wrt",)

    def _infer_shape(self):
        return self.gshape


class MatMul(Tensor):
    """Contraction of axis ``a_axis`` of ``a`` with axis ``b_axis`` of ``b`` (both rank 2)."""

    __slots__ = ()
    _fields = ("a", "b", "a_axis", "b_axis")

    def _infer_shape(self):
        sa, sb = self.a.shape, self.b.shape
        if not _all_known(sa, sb):
            return None
        if len(sa) != 2 or len(sb) != 2 or sa[self.a_axis] != sb[self.b_axis]:
            raise ShapeMismatch("matmul", f"contraction over {sa}[{self.a_axis}]", f"{sb}[{self.b_axis}]")
        return (sa[1 - self.a_axis], sb[1 - self.b_axis])


class BiasAdd(Tensor):
    """Add a vector along the trailing axis."""

    __slots__ = ()
    _fields = ("a", "bias")

    def _infer_shape(self):
        sa, sb = self.a.shape, self.bias.shape
        if not _all_known(sa, sb):
            return None
        if sb != sa[-1:]:
            raise ShapeMismatch("bias add", sa[-1:], sb)
        return sa


class LogT(Tensor):
    __slots__ = ()
    _fields = ("operand",)

    def _infer_shape(self):
        return self.operand.shape


class RecipT(Tensor):
    __slots__ = ()
    _fields = ("operand",)

    def _infer_shape(self):
        return self.operand.shape


class ScaleT(Tensor):
    """Elementwise product of a tensor with an index-free scalar."""

    __slots__ = ()
    _fields = ("operand", "factor")

    def _infer_shape(self):
        return self.operand.shape


class AddT(Tensor):
    """Elementwise sum; the lowering of adjoint accumulation."""

    __slots__ = ()
    _fields = ("a", "b")

    def _infer_shape(self):
        sa, sb = self.a.shape, self.b.shape
        if _all_known(sa, sb) and sa != sb:
            raise ShapeMismatch("elementwise add", sa, sb)
        return sa


# ---------------------------------------------------------------- scalars


class Scalar(Expr):
    __slots__ = ()

    def __add__(self, o):
        return Add(self, _lift(o))

    def __radd__(self, o):
        return Add(_lift(o), self)

    def __mul__(self, o):
        return Mul(self, _lift(o))

    def __rmul__(self, o):
        return Mul(_lift(o), self)

    def __truediv__(self, o):
        return Div(self, _lift(o))

    def __neg__(self):
        return Neg(self)


def _lift(v) -> Scalar:
    return v if isinstance(v, Scalar) else Const(float(v))


class Const(Scalar):
    __slots__ = ()
    _fields = ("value",)


class NamedConst(Scalar):
    """A constant printed by name (e.g. a branch loss weight)."""

    __slots__ = ()
    _fields = ("value", "name")


class Card(Scalar):
    """Cardinality constant ``|n|`` (the batch size in the mean loss)."""

    __slots__ = ()
    _fields = ("value",)


class Elem(Scalar):
    """Element of ``tensor`` at bound index variables ``indices``."""

    __slots__ = ()
    _fields = ("tensor", "indices")

    def _infer_shape(self):
        s = self.tensor.shape
        if s is not None and len(s) != len(self.indices):
            raise ShapeMismatch(show(self.tensor), f"rank {len(self.indices)}", f"rank {len(s)} {s}")
        return None


class Add(Scalar):
    __slots__ = ()
    _fields = ("a", "b")


class Mul(Scalar):
    __slots__ = ()
    _fields = ("a", "b")


class Div(Scalar):
    __slots__ = ()
    _fields = ("a", "b")


class Neg(Scalar):
    __slots__ = ()
    _fields = ("a",)


class Log(Scalar):
    __slots__ = ()
    _fields = ("a",)


class Exp(Scalar):
    __slots__ = ()
    _fields = ("a",)


class Max(Scalar):
    __slots__ = ()
    _fields = ("a", "b")


class Gt(Scalar):
    """1 where ``a > b`` else 0; derivative zero."""

    __slots__ = ()
    _fields = ("a", "b")


class Sum(Scalar):
    __slots__ = ()
    _fields = ("index", "extent", "body")


class Delta(Scalar):
    """Kronecker delta of two index variables (1 where they coincide)."""

    __slots__ = ()
    _fields = ("i", "j")


class Dot(Scalar):
    """Full contraction of two equally shaped tensors."""

    __slots__ = ()
    _fields = ("a", "b")

    def _infer_shape(self):
        sa, sb = self.a.shape, self.b.shape
        if _all_known(sa, sb) and sa != sb:
            raise ShapeMismatch("dot", sa, sb)
        return None


class Precision(Scalar):
    """Fraction of rows whose argmax agrees between ``pred`` and one-hot ``labels``."""

    __slots__ = ()
    _fields = ("pred", "labels")

    def _infer_shape(self):
        sa, sb = self.pred.shape, self.labels.shape
        if _all_known(sa, sb) and sa != sb:
            raise ShapeMismatch("precision", sb, sa)
        return None


ZERO = Const(0.0)
ONE = Const(1.0)

CONSTS = (Const, NamedConst, Card)


def is_const(e: Expr) -> bool:
    return isinstance(e, CONSTS)


def const_value(e: Expr) -> float:
    return float(e.value)


# ---------------------------------------------------------------- traversal


def postorder(roots: Iterable[Expr], into_labels: bool = False) -> list[Expr]:
    """Every node reachable from ``roots`` once, children before parents."""
    out: list[Expr] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                out.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            kids = list(_all_children(node)) if into_labels else operands(node)
            for c in reversed(kids):
                if id(c) not in seen:
                    stack.append((c, False))
    return out


def _all_children(node: Expr) -> Iterator[Expr]:
    for v in node._args:
        yield from _nodes_in(v)


def transform(roots: list[Expr], fn: Callable[[Expr], Expr]) -> list[Expr]:
    """Rebuild ``roots`` bottom-up applying ``fn`` to every rebuilt node.

    Sharing is preserved: each distinct node is rewritten once.
    """
    memo: dict[int, Expr] = {}
    for node in postorder(roots, into_labels=True):
        new = map_children(node, lambda c: memo[id(c)])
        memo[id(node)] = fn(new)
    return [memo[id(r)] for r in roots]


def use_counts(roots: Iterable[Expr]) -> dict[int, int]:
    """Number of references to each node from distinct parent slots."""
    counts: dict[int, int] = {}
    for node in postorder(roots):
        for c in operands(node):
            counts[id(c)] = counts.get(id(c), 0) + 1
    for r in roots:
        counts[id(r)] = counts.get(id(r), 0) + 1
    return counts


def free_indices(e: Expr) -> frozenset[str]:
    """Index variables referenced by scalar ``e`` and not bound inside it.

    Tensors are closed terms, so the walk does not descend into them.
    """
    if isinstance(e, Elem):
        return frozenset(e.indices)
    if isinstance(e, Delta):
        return frozenset((e.i, e.j))
    if isinstance(e, Sum):
        return free_indices(e.body) - {e.index}
    if e.is_tensor:
        return frozenset()
    acc: frozenset[str] = frozenset()
    for c in operands(e):
        if not c.is_tensor:
            acc |= free_indices(c)
    return acc


def bound_indices(e: Expr) -> set[str]:
    if isinstance(e, Sum):
        return {e.index} | bound_indices(e.body)
    if e.is_tensor:
        return set()
    acc: set[str] = set()
    for c in operands(e):
        if not c.is_tensor:
            acc |= bound_indices(c)
    return acc


_fresh_counter = itertools.count()


class IndexNamer:
    """Deterministic fresh index names (``prefix`` + counter)."""

    def __init__(self, prefix: str = "i", start: int = 1):
        self.prefix = prefix
        self._n = itertools.count(start)

    def __call__(self) -> str:
        return f"{self.prefix}{next(self._n)}"


def rename_indices(e: Scalar, mapping: dict[str, str]) -> Scalar:
    """Capture-avoiding renaming of free index variables in a scalar body."""
    if not mapping:
        return e
    if isinstance(e, Elem):
        return Elem(e.tensor, tuple(mapping.get(i, i) for i in e.indices))
    if isinstance(e, Delta):
        return Delta(mapping.get(e.i, e.i), mapping.get(e.j, e.j))
    if isinstance(e, Sum):
        inner = {k: v for k, v in mapping.items() if k != e.index}
        index = e.index
        if index in inner.values():
            taken = set(inner.values()) | free_indices(e.body) | set(inner)
            n = 0
            while f"{index}_{n}" in taken:
                n += 1
            new_index = f"{index}_{n}"
            inner = dict(inner)
            inner[index] = new_index
            index = new_index
        return Sum(index, e.extent, rename_indices(e.body, inner))
    if e.is_tensor:
        return e
    return map_children(e, lambda c: c if c.is_tensor else rename_indices(c, mapping))


def substitute(e: Expr, mapping: dict[int, Expr]) -> Expr:
    """Replace nodes by identity (``id(old) -> new``) throughout ``e``."""
    if not mapping:
        return e
    return _subst(e, mapping)


def _subst(e: Expr, mapping: dict[int, Expr]) -> Expr:
    memo: dict[int, Expr] = {}
    for node in postorder([e], into_labels=True):
        if id(node) in mapping:
            memo[id(node)] = mapping[id(node)]
        else:
            memo[id(node)] = map_children(node, lambda c: memo[id(c)])
    return memo[id(e)]


# ---------------------------------------------------------------- functions


class TensorFun:
    """A function tensor -> tensor (``VecFun``): a bound variable and a body."""

    _ids = itertools.count()

    def __init__(self, var: Var, body: Tensor):
        self.var = var
        self.body = body

    @classmethod
    def of(cls, build: Callable[[Tensor], Tensor], rank: int | None = None) -> "TensorFun":
        v = Var(f"_p{next(cls._ids)}", None)
        return cls(v, build(v))

    def __call__(self, x: Tensor) -> Tensor:
        return substitute(self.body, {id(self.var): x})

    def __repr__(self) -> str:
        return f"TensorFun({self.var.name} => {show(self.body)})"


class ScalarFun:
    """A function tensor -> scalar (``Vec2ScalarFun``)."""

    def __init__(self, var: Var, body: Scalar):
        self.var = var
        self.body = body

    @classmethod
    def of(cls, build: Callable[[Tensor], Scalar]) -> "ScalarFun":
        v = Var(f"_p{next(TensorFun._ids)}", None)
        return cls(v, build(v))

    def __call__(self, x: Tensor) -> Scalar:
        return substitute(self.body, {id(self.var): x})


IDENTITY = TensorFun.of(lambda p: p)


def compose(f, g: TensorFun):
    """``f o g``: apply ``g`` first.  ``f`` may be a tensor or scalar function."""
    if isinstance(f, ScalarFun):
        return ScalarFun.of(lambda p: f(g(p)))
    return TensorFun.of(lambda p: f(g(p)))


def free_params(e: Expr | Iterable[Expr]) -> list[Param]:
    """Parameters of ``e`` in deterministic first-use (left-to-right) order."""
    roots = [e] if isinstance(e, Expr) else list(e)
    out: list[Param] = []
    seen: set[str] = set()
    for node in postorder(roots):
        if isinstance(node, Param) and node.name not in seen:
            seen.add(node.name)
            out.append(node)
    return out


# ---------------------------------------------------------------- printing


def _num(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return f"{v:g}"


def _hyper(h) -> str:
    parts = []
    for x in h:
        if isinstance(x, bool):
            parts.append("true" if x else "false")
        elif isinstance(x, float):
            parts.append(_num(x))
        else:
            parts.append(str(x))
    return ",".join(parts)


def show(e: Expr, name: Callable[[Expr], str | None] | None = None) -> str:
    """Render ``e`` in the IR surface syntax used by the memory table.

    ``name`` optionally maps a node to an SSA name, which is printed instead
    of the node's structure.
    """

    def s(x: Expr) -> str:
        if name is not None:
            n = name(x)
            if n is not None:
                return n
        return _show1(x, s)

    return s(e)


_RANK_ONLY = {"ReLU"}  # hyperparameter is a rank check only, not printed


def _show1(e: Expr, s) -> str:
    t = type(e)
    if t in (Var, Input, Param):
        return e.name
    if t is ToDevice:
        return f"Cuda({s(e.operand)})"
    if t is Indicator:
        return f"Indicator({s(e.operand)}, {e.classes})"
    if t is Prim:
        if e.kind in _RANK_ONLY:
            return f"{e.kind}()({','.join(s(o) for o in e.operands)})"
        return f"{e.kind}({_hyper(e.hyper)})({','.join(s(o) for o in e.operands)})"
    if t is Flatten:
        return f"{_paren(s(e.operand))}[{e.axis}><{e.frank - 1}]"
    if t is Reshape:
        return f"{_paren(s(e.operand))}.reshape({','.join(map(str, e.rshape))})"
    if t is Copy:
        return f"{_paren(s(e.operand))}.copy"
    if t is IndexAbs:
        return f"({','.join(e.indices)}) => {s(e.body)}"
    if t is ScalarT:
        return s(e.expr)
    if t is GradPrim:
        saved = ",".join(s(x) for x in e.saved)
        return f"{s(e.upstream)} * d_{e.kind}({_hyper(e.hyper)})({saved})/d_{s(e.wrt)}"
    if t is MatMul:
        la = ["@", "@"]
        la[1 - e.a_axis] = "i"
        lb = ["@", "@"]
        lb[1 - e.b_axis] = "j"
        return f"({s(e.a)})({' | '.join(la)}) * ({s(e.b)})({' | '.join(lb)})"
    if t is BiasAdd:
        return f"({s(e.a)} + (i) => {s(e.bias)})"
    if t is LogT:
        return f"Log {s(e.operand)}"
    if t is RecipT:
        return f"1/({s(e.operand)})"
    if t is ScaleT:
        return f"({s(e.factor)} * {s(e.operand)})"
    if t is AddT:
        return f"({s(e.a)} + {s(e.b)})"
    if t is Const:
        return _num(e.value)
    if t is NamedConst:
        return e.name
    if t is Card:
        return f"|{e.value}|"
    if t is Elem:
        return f"{_paren(s(e.tensor))}[{','.join(e.indices)}]"
    if t is Add:
        return f"({s(e.a)} + {s(e.b)})"
    if t is Mul:
        return f"({s(e.a)} * {s(e.b)})"
    if t is Div:
        return f"({s(e.a)} / {s(e.b)})"
    if t is Neg:
        return f"(0 - {s(e.a)})"
    if t is Log:
        return f"log({s(e.a)})"
    if t is Exp:
        return f"exp({s(e.a)})"
    if t is Max:
        return f"max({s(e.a)}, {s(e.b)})"
    if t is Gt:
        return f"({s(e.a)} > {s(e.b)})"
    if t is Sum:
        return f"sum({e.index}<{e.extent})({s(e.body)})"
    if t is Delta:
        return f"delta({e.i},{e.j})"
    if t is Dot:
        return f"({s(e.a)} . {s(e.b)})"
    if t is Precision:
        return f"Precision({s(e.pred)}, {s(e.labels)})"
    return f"{t.__name__}{e._args}"


def _paren(text: str) -> str:
    simple = text.replace("_", "").replace(".", "").isalnum()
    return text if simple else f"({text})"


def show_dag(roots: list[Expr]) -> str:
    """Multi-line rendering that names shared tensor subterms ``%k`` once."""
    counts = use_counts(roots)
    names: dict[int, str] = {}
    lines: list[str] = []

    def name(x: Expr):
        return names.get(id(x))

    for node in postorder(roots):
        if node.is_tensor and counts.get(id(node), 0) > 1 and not isinstance(node, (Param, Input, Var)):
            text = show(node, name)
            names[id(node)] = f"%{len(names)}"
            lines.append(f"{names[id(node)]} = {text}")
    for i, r in enumerate(roots):
        lines.append(f"root{i} = {show(r, lambda x: None if x is r else name(x))}")
    return "\n".join(lines)
