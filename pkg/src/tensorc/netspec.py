"""Network description files: parsing, printing and elaboration.

A file is a sequence of sections::

    data { source = "synthetic:7"; batch = 500; shape = (1, 28, 28); classes = 10 }
    net lenet {
      cv1 = conv(k=5, out=20)
      mp = maxpool(2)
      ...
      network = fc2 . relu . fc1 . flat . mp . cv2 . mp . cv1
      loss = logloss . softmax . network
      accuracy = precision . network
    }
    solver { name = lenet; iters = 1000; test_iters = 10; lr = 0.01; momentum = 0.9; decay = 0.0005; clip = 0 }

``.`` is left-associative function composition (``f . g`` applies ``g``
first).  A named ``net`` section without a ``loss`` declaration is a subnet;
``inception(3)`` instantiates it with index 3, substituting ``$`` in its
layer names (``cv$1`` becomes ``cv31``).  Layer names without ``$`` get the
suffix ``_<index>``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Union

from . import expr as E
from .errors import (ArityError, DuplicateName, Loc, NetSyntaxError, UnboundName,
                     UnknownLayerKind)

# ---------------------------------------------------------------- AST


@dataclass(frozen=True)
class Num:
    value: float
    text: str = field(default="", compare=False)

    def __str__(self) -> str:
        return self.text or repr(self.value)


@dataclass(frozen=True)
class Str:
    value: str

    def __str__(self) -> str:
        return '"' + self.value.replace("\\", "\\\\").replace('"', '\\"') + '"'


@dataclass(frozen=True)
class TupleLit:
    items: tuple

    def __str__(self) -> str:
        if len(self.items) == 1:
            return f"({self.items[0]},)"
        return "(" + ", ".join(str(i) for i in self.items) + ")"


@dataclass(frozen=True)
class Arg:
    key: str | None
    value: "Value"

    def __str__(self) -> str:
        return f"{self.key}={self.value}" if self.key else str(self.value)


@dataclass(frozen=True)
class Term:
    """``name`` or ``name(args)``."""

    name: str
    args: tuple[Arg, ...] | None = None
    loc: Loc | None = field(default=None, compare=False)

    def __str__(self) -> str:
        if self.args is None:
            return self.name
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class Compose:
    """Left-associative composition: ``left . right`` applies ``right`` first."""

    left: "Node"
    right: "Node"
    loc: Loc | None = field(default=None, compare=False)

    def terms(self) -> list[Term]:
        out: list[Term] = []
        for side in (self.left, self.right):
            out.extend(side.terms() if isinstance(side, Compose) else [side])
        return out

    def __str__(self) -> str:
        return " . ".join(str(t) for t in self.terms())


@dataclass(frozen=True)
class LossExpr:
    """Weighted sum of scalar compositions: ``a + 0.3 * b``."""

    terms: tuple[tuple[Num | None, "Node"], ...]
    loc: Loc | None = field(default=None, compare=False)

    def __str__(self) -> str:
        parts = []
        for w, c in self.terms:
            parts.append(f"{w} * {c}" if w is not None else str(c))
        return " + ".join(parts)


Node = Union[Term, Compose]
Value = Union[Num, Str, TupleLit, Term, Compose, LossExpr]


@dataclass(frozen=True)
class Decl:
    name: str
    value: Value
    loc: Loc | None = field(default=None, compare=False)

    def __str__(self) -> str:
        return f"{self.name} = {self.value}"


@dataclass(frozen=True)
class Section:
    kind: str
    name: str | None
    decls: tuple[Decl, ...]
    loc: Loc | None = field(default=None, compare=False)

    def __str__(self) -> str:
        head = self.kind + (f" {self.name}" if self.name else "")
        body = "".join(f"  {d}\n" for d in self.decls)
        return f"{head} {{\n{body}}}\n"


# ---------------------------------------------------------------- program types


@dataclass(frozen=True)
class ParamSpec:
    name: str
    init: tuple = ("xavier",)
    lr_mult: float = 1.0
    decay_mult: float = 1.0

    def __post_init__(self):
        if self.lr_mult < 0 or self.decay_mult < 0:
            raise ValueError(f"{self.name}: negative lr/decay multiplier")


@dataclass(frozen=True)
class SolverConfig:
    name: str = "net"
    train_iters: int = 1000
    test_iters: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    decay: float = 0.0005
    clip: float = 0.0
    snapshot_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("solver lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("solver momentum must be in [0, 1)")
        if self.decay < 0 or self.clip < 0:
            raise ValueError("solver decay and clip must be >= 0")


@dataclass(frozen=True)
class DataBinding:
    source: str = "synthetic:42"
    batch: int = 64
    shape: tuple[int, ...] = (1, 28, 28)
    classes: int = 10
    limit: int = 0

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")
        if self.classes < 2:
            raise ValueError("class count must be >= 2")


@dataclass(frozen=True)
class LayerDecl:
    name: str
    kind: str
    args: tuple[Arg, ...]
    loc: Loc | None = field(default=None, compare=False)


@dataclass
class NetworkProgram:
    sections: list[Section]
    layers: dict[str, LayerDecl]
    nets: dict[str, Value]
    subnets: dict[str, Section]
    data: DataBinding
    solver: SolverConfig
    loss_expr: Value
    accuracy_expr: Value | None
    file: str = "<input>"

    def __eq__(self, other) -> bool:
        return isinstance(other, NetworkProgram) and self.sections == other.sections

    def loc_of(self, name: str) -> Loc | None:
        base = name.split("@")[0]
        if base in self.layers:
            return self.layers[base].loc
        stem = re.sub(r"_\d+$", "", base)
        for sec in self.subnets.values():
            for d in sec.decls:
                if d.name in (base, stem) or re.fullmatch(re.escape(d.name).replace(r"\$", r"\d+"), base):
                    return d.loc
        # a builtin used inline (``softmax`` in ``loss = ...``): point at the use
        for sec in self.sections:
            if sec.kind not in ("net", "subnet"):
                continue
            for d in sec.decls:
                for t in _terms(d.value):
                    if t.name in (base, stem):
                        return t.loc or d.loc
        return None


LAYER_KINDS = {
    "conv", "maxpool", "avgpool", "relu", "full", "flatten", "softmax", "dropout",
    "lrn", "concat", "logloss", "precision", "indicator",
}

# ---------------------------------------------------------------- lexer

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r\n]+|\#[^\n]*)
  | (?P<num>-?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<str>"(?:[^"\\\n]|\\.)*")
  | (?P<ident>[A-Za-z_$][A-Za-z0-9_$]*)
  | (?P<op>[{}()=,.;+*])
""", re.VERBOSE)


@dataclass
class Tok:
    kind: str
    text: str
    loc: Loc


def tokenize(text: str, file: str = "<input>") -> list[Tok]:
    toks: list[Tok] = []
    pos, line, col = 0, 1, 1
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise NetSyntaxError(f"unexpected character {text[pos]!r}", Loc(line, col, file))
        kind = m.lastgroup
        chunk = m.group()
        if kind != "ws":
            toks.append(Tok(kind if kind != "op" else chunk, chunk, Loc(line, col, file)))
        nl = chunk.count("\n")
        if nl:
            line += nl
            col = len(chunk) - chunk.rfind("\n")
        else:
            col += len(chunk)
        pos = m.end()
    toks.append(Tok("eof", "", Loc(line, col, file)))
    return toks


# ---------------------------------------------------------------- parser


class _Parser:
    def __init__(self, toks: list[Tok]):
        self.toks = toks
        self.i = 0

    @property
    def tok(self) -> Tok:
        return self.toks[self.i]

    def take(self, *kinds: str) -> Tok:
        t = self.tok
        if t.kind not in kinds:
            found = "end of input" if t.kind == "eof" else repr(t.text)
            raise NetSyntaxError(f"unexpected {found}", t.loc, tuple(kinds))
        self.i += 1
        return t

    def at(self, *kinds: str) -> bool:
        return self.tok.kind in kinds

    def file(self) -> list[Section]:
        sections = []
        while not self.at("eof"):
            sections.append(self.section())
        if not sections:
            raise NetSyntaxError("empty network file", self.tok.loc, ("net", "solver", "data"))
        return sections

    def section(self) -> Section:
        t = self.tok
        if t.kind != "ident" or t.text not in ("net", "solver", "data"):
            raise NetSyntaxError(f"unexpected {t.text!r}", t.loc, ("net", "solver", "data"))
        self.i += 1
        name = self.take("ident").text if self.at("ident") else None
        self.take("{")
        decls = []
        while not self.at("}"):
            if self.at(";"):
                self.i += 1
                continue
            decls.append(self.decl(t.text))
        close = self.take("}")
        if t.text == "net" and not decls:
            raise NetSyntaxError("expected composition", close.loc, ("identifier",))
        return Section(t.text, name, tuple(decls), t.loc)

    def decl(self, section: str) -> Decl:
        name = self.take("ident")
        self.take("=")
        if section == "net":
            value = self.lossexpr()
        else:
            value = self.value()
        return Decl(name.text, value, name.loc)

    def value(self) -> Value:
        t = self.tok
        if t.kind == "num":
            self.i += 1
            return Num(float(t.text), t.text)
        if t.kind == "str":
            self.i += 1
            return Str(bytes(t.text[1:-1], "utf-8").decode("unicode_escape"))
        if t.kind == "(":
            self.i += 1
            items = [self.value()]
            while self.at(","):
                self.i += 1
                if self.at(")"):  # one-element tuple: ``(784,)``
                    break
                items.append(self.value())
            self.take(")")
            return TupleLit(tuple(items))
        if t.kind == "ident":
            return self.compose()
        raise NetSyntaxError(f"unexpected {t.text or 'end of input'!r}", t.loc, ("value",))

    def lossexpr(self) -> Value:
        start = self.tok
        terms = [self.weighted()]
        while self.at("+"):
            self.i += 1
            terms.append(self.weighted())
        if len(terms) == 1 and terms[0][0] is None:
            return terms[0][1]
        return LossExpr(tuple(terms), start.loc)

    def weighted(self) -> tuple[Num | None, Node]:
        if self.at("num"):
            w = self.take("num")
            self.take("*")
            return Num(float(w.text), w.text), self.compose()
        c = self.compose()
        if self.at("*"):
            self.i += 1
            w = self.take("num")
            return Num(float(w.text), w.text), c
        return None, c

    def compose(self) -> Node:
        if not self.at("ident"):
            t = self.tok
            raise NetSyntaxError("expected composition", t.loc, ("identifier",))
        node: Node = self.term()
        while self.at("."):
            dot = self.take(".")
            node = Compose(node, self.term(), dot.loc)
        return node

    def term(self) -> Term:
        name = self.take("ident")
        if not self.at("("):
            return Term(name.text, None, name.loc)
        self.take("(")
        args: list[Arg] = []
        while not self.at(")"):
            if self.at("ident") and self.toks[self.i + 1].kind == "=":
                key = self.take("ident").text
                self.take("=")
                args.append(Arg(key, self.value()))
            else:
                args.append(Arg(None, self.value()))
            if not self.at(")"):
                self.take(",")
        self.take(")")
        return Term(name.text, tuple(args), name.loc)


def parse_netspec(text: str, file: str = "<input>") -> NetworkProgram:
    """Parse a network file into a resolved ``NetworkProgram``."""
    sections = _Parser(tokenize(text, file)).file()
    return _resolve(sections, file)


def print_netspec(prog: NetworkProgram) -> str:
    return "\n".join(str(s) for s in prog.sections)


def _resolve(sections: list[Section], file: str) -> NetworkProgram:
    main: Section | None = None
    subnets: dict[str, Section] = {}
    data = solver = None
    for sec in sections:
        seen: dict[str, Decl] = {}
        for d in sec.decls:
            if d.name in seen:
                raise DuplicateName(f"{d.name!r} already declared at {seen[d.name].loc}", d.loc)
            seen[d.name] = d
        if sec.kind == "net":
            if any(d.name == "loss" for d in sec.decls):
                if main is not None:
                    raise DuplicateName("second net section declaring a loss", sec.loc)
                main = sec
            else:
                if not sec.name:
                    raise NetSyntaxError("subnet section needs a name", sec.loc, ("identifier",))
                if sec.name in subnets:
                    raise DuplicateName(f"subnet {sec.name!r} declared twice", sec.loc)
                subnets[sec.name] = sec
        elif sec.kind == "data":
            if data is not None:
                raise DuplicateName("second data section", sec.loc)
            data = _data_binding(sec)
        else:
            if solver is not None:
                raise DuplicateName("second solver section", sec.loc)
            solver = _solver_config(sec)
    if main is None:
        raise NetSyntaxError("no net section declares a loss", sections[0].loc, ("loss = ...",))
    layers: dict[str, LayerDecl] = {}
    nets: dict[str, Value] = {}
    for sec in [main, *subnets.values()]:
        for d in sec.decls:
            v = d.value
            if sec is main and d.name in ("loss", "accuracy"):
                nets[d.name] = v
            elif isinstance(v, Term) and v.args is not None and v.name not in subnets and v.name not in _decl_names(main):
                if v.name not in LAYER_KINDS:
                    raise UnknownLayerKind(f"unknown layer kind {v.name!r}", v.loc)
                if sec is main:
                    layers[d.name] = LayerDecl(d.name, v.name, v.args, d.loc)
            elif isinstance(v, Term) and v.args is None and v.name in LAYER_KINDS and v.name not in _decl_names(sec):
                if sec is main:
                    layers[d.name] = LayerDecl(d.name, v.name, (), d.loc)
            elif sec is main:
                nets[d.name] = v
    accuracy = nets.pop("accuracy", None)
    loss = nets.pop("loss")
    return NetworkProgram(
        sections=list(sections), layers=layers, nets=nets, subnets=subnets,
        data=data or DataBinding(), solver=solver or SolverConfig(),
        loss_expr=loss, accuracy_expr=accuracy, file=file,
    )


def _terms(v) -> list[Term]:
    if isinstance(v, Term):
        return [v, *(t for a in v.args or () for t in _terms(a.value))]
    if isinstance(v, Compose):
        return [t for side in (v.left, v.right) for t in _terms(side)]
    if isinstance(v, LossExpr):
        return [t for _, c in v.terms for t in _terms(c)]
    return []


def _decl_names(sec: Section) -> set[str]:
    return {d.name for d in sec.decls}


def _scalar(v: Value, what: str, loc):
    if isinstance(v, Num):
        return v.value
    if isinstance(v, Str):
        return v.value
    if isinstance(v, Term) and v.args is None:
        return v.name
    if isinstance(v, TupleLit):
        return tuple(_scalar(x, what, loc) for x in v.items)
    raise NetSyntaxError(f"bad value for {what}", loc, ("number", "string", "identifier"))


def _data_binding(sec: Section) -> DataBinding:
    kw = {}
    for d in sec.decls:
        v = _scalar(d.value, d.name, d.loc)
        if d.name == "source":
            kw["source"] = str(v)
        elif d.name in ("batch", "classes", "limit"):
            kw[d.name] = int(v)
        elif d.name == "shape":
            kw["shape"] = tuple(int(x) for x in (v if isinstance(v, tuple) else (v,)))
        else:
            raise NetSyntaxError(f"unknown data key {d.name!r}", d.loc, ("source", "batch", "shape", "classes", "limit"))
    try:
        return DataBinding(**kw)
    except ValueError as exc:
        raise NetSyntaxError(str(exc), sec.loc) from None


_SOLVER_KEYS = {"name": "name", "iters": "train_iters", "test_iters": "test_iters", "lr": "lr",
                "momentum": "momentum", "decay": "decay", "clip": "clip", "snapshot_every": "snapshot_every"}


def _solver_config(sec: Section) -> SolverConfig:
    kw = {}
    for d in sec.decls:
        if d.name not in _SOLVER_KEYS:
            raise NetSyntaxError(f"unknown solver key {d.name!r}", d.loc, tuple(_SOLVER_KEYS))
        v = _scalar(d.value, d.name, d.loc)
        key = _SOLVER_KEYS[d.name]
        if key == "name":
            kw[key] = str(v)
        elif key in ("train_iters", "test_iters", "snapshot_every"):
            kw[key] = int(v)
        else:
            kw[key] = float(v)
    if "name" not in kw and sec.name:
        kw["name"] = sec.name
    try:
        return SolverConfig(**kw)
    except ValueError as exc:
        raise NetSyntaxError(str(exc), sec.loc) from None


# ---------------------------------------------------------------- elaboration


@dataclass
class Elaborated:
    loss: E.Scalar
    accuracy: E.Scalar | None
    params: list[ParamSpec]
    x: E.Input
    y: E.Input


class _Layer:
    """A resolved layer value: tensor function, scalar head, or indicator."""

    def __init__(self, kind: str, fn=None, classes: int | None = None):
        self.kind = kind
        self.fn = fn
        self.classes = classes


def _argmap(decl_name: str, args, positional: list[str], loc) -> dict:
    out: dict = {}
    for i, a in enumerate(args or ()):
        if a.key is None:
            if i >= len(positional):
                raise ArityError(f"{decl_name}: too many positional arguments", loc)
            out[positional[i]] = a.value
        else:
            out[a.key] = a.value
    return out


def _num(v, what, loc) -> float:
    if not isinstance(v, Num):
        raise ArityError(f"{what} must be a number", loc)
    return v.value


def _init_spec(v, default: tuple, loc) -> tuple[tuple, float, float]:
    """Parse ``xavier``, ``const(v[,lrm,dcm])`` or ``gaussian(s[,lrm,dcm])``."""
    if v is None:
        return default, 1.0, 1.0
    if not isinstance(v, Term):
        raise ArityError("parameter init must be xavier, const(...) or gaussian(...)", loc)
    nums = [_num(a.value, v.name, loc) for a in (v.args or ())]
    if v.name == "xavier":
        lrm, dcm = (nums + [1.0, 1.0])[:2]
        return ("xavier",), lrm, dcm
    if v.name == "const":
        if not nums:
            raise ArityError("const needs a value", loc)
        val, lrm, dcm = (nums + [1.0, 1.0])[:3]
        return ("const", val), lrm, dcm
    if v.name == "gaussian":
        if not nums:
            raise ArityError("gaussian needs a standard deviation", loc)
        sd, lrm, dcm = (nums + [1.0, 1.0])[:3]
        return ("gaussian", sd), lrm, dcm
    raise ArityError(f"unknown parameter init {v.name!r}", loc)


class _Elaborator:
    def __init__(self, prog: NetworkProgram, train: bool):
        self.prog = prog
        self.train = train
        self.specs: dict[str, ParamSpec] = {}
        self.salt = 0
        self.cache: dict[tuple, object] = {}

    def param(self, name: str, hint: tuple, init: tuple, lrm: float, dcm: float) -> E.Param:
        spec = ParamSpec(name, init, lrm, dcm)
        prev = self.specs.get(name)
        if prev is not None and prev != spec:
            raise DuplicateName(f"parameter {name!r} declared with two configurations")
        self.specs[name] = spec
        return E.Param(name, None, hint)

    # -- layer construction

    def layer(self, name: str, kind: str, args, loc, index: str | None, scope: Section | None = None) -> _Layer:
        pname = _instance_name(name, index)
        site = pname
        if kind == "conv":
            a = _argmap(name, args, ["k", "out", "stride", "pad", "w", "b"], loc)
            if "k" not in a or "out" not in a:
                raise ArityError(f"{name}: conv needs k and out", loc)
            k, out = int(_num(a["k"], "k", loc)), int(_num(a["out"], "out", loc))
            stride = int(_num(a.get("stride", Num(1)), "stride", loc))
            pad = int(_num(a.get("pad", Num(0)), "pad", loc))
            winit, wl, wd = _init_spec(a.get("w"), ("xavier",), loc)
            binit, bl, bd = _init_spec(a.get("b"), ("const", 0.0), loc)
            W = self.param(f"{pname}_W", (out, None, k, k), winit, wl, wd)
            B = self.param(f"{pname}_B", (out,), binit, bl, bd)
            return _Layer(kind, E.TensorFun.of(lambda p: E.Prim("Convolv", (stride, pad), (p, W, B), site)))
        if kind in ("maxpool", "avgpool"):
            a = _argmap(name, args, ["k", "stride", "pad"], loc)
            if "k" not in a:
                raise ArityError(f"{name}: pooling needs k", loc)
            k = int(_num(a["k"], "k", loc))
            stride = int(_num(a.get("stride", Num(k)), "stride", loc))
            pad = int(_num(a.get("pad", Num(0)), "pad", loc))
            hyper = (k, stride, pad, kind == "maxpool")
            return _Layer(kind, E.TensorFun.of(lambda p: E.Prim("Pooling", hyper, (p,), site)))
        if kind == "relu":
            a = _argmap(name, args, ["rank"], loc)
            rank = int(_num(a.get("rank", Num(0)), "rank", loc))
            return _Layer(kind, E.TensorFun.of(lambda p: E.Prim("ReLU", (rank,), (p,), site)))
        if kind == "softmax":
            return _Layer(kind, E.TensorFun.of(lambda p: E.Prim("Softmax", (), (p,), site)))
        if kind == "dropout":
            a = _argmap(name, args, ["rate"], loc)
            rate = _num(a.get("rate", Num(0.5)), "rate", loc)
            if not 0 <= rate < 1:
                raise ArityError(f"{name}: dropout rate must be in [0, 1)", loc)
            if not self.train:
                return _Layer(kind, E.IDENTITY)
            self.salt += 1
            salt = self.salt

            def drop(p):
                mask = E.Prim("DropoutMask", (rate, salt), (p,), site)
                return E.Prim("Dropout", (rate,), (p, mask), site)

            return _Layer(kind, E.TensorFun.of(drop))
        if kind == "lrn":
            a = _argmap(name, args, ["size", "alpha", "beta"], loc)
            hyper = (int(_num(a.get("size", Num(5)), "size", loc)), _num(a.get("alpha", Num(1e-4)), "alpha", loc),
                     _num(a.get("beta", Num(0.75)), "beta", loc))
            return _Layer(kind, E.TensorFun.of(lambda p: E.Prim("LRN", hyper, (p,), site)))
        if kind == "flatten":
            a = _argmap(name, args, ["rank", "axis"], loc)
            rank = int(_num(a.get("rank", Num(4)), "rank", loc))
            axis = int(_num(a.get("axis", Num(1)), "axis", loc))
            return _Layer(kind, E.TensorFun.of(lambda p: E.Flatten(p, rank, axis, site)))
        if kind == "full":
            a = _argmap(name, args, ["out", "in", "w", "b"], loc)
            if "out" not in a:
                raise ArityError(f"{name}: full needs out", loc)
            out = int(_num(a["out"], "out", loc))
            n_in = int(_num(a["in"], "in", loc)) if "in" in a else None
            winit, wl, wd = _init_spec(a.get("w"), ("xavier",), loc)
            binit, bl, bd = _init_spec(a.get("b"), ("const", 0.0), loc)
            W = self.param(f"{pname}_W", (out, n_in), winit, wl, wd)
            B = self.param(f"{pname}_B", (out,), binit, bl, bd)
            return _Layer(kind, E.TensorFun.of(lambda p: full_layer(p, W, B, out, site)))
        if kind == "concat":
            branches = [self.value(a.value, index, loc, scope) for a in (args or ())]
            if not branches:
                raise ArityError(f"{name}: concat needs at least one branch", loc)
            fns = [self.tensor_fun(b, loc) for b in branches]
            return _Layer(kind, E.TensorFun.of(lambda p: E.Prim("Concat", (), tuple(f(p) for f in fns), site)))
        if kind == "indicator":
            a = _argmap(name, args, ["classes"], loc)
            return _Layer(kind, classes=int(_num(a.get("classes", Num(self.prog.data.classes)), "classes", loc)))
        if kind in ("logloss", "precision"):
            classes = self.prog.data.classes
            if args:
                ref = args[0].value
                lab = self.value(ref, index, loc)
                if lab.kind != "indicator":
                    raise ArityError(f"{name}: {kind} takes an indicator layer", loc)
                classes = lab.classes
            return _Layer(kind, classes=classes)
        raise UnknownLayerKind(f"unknown layer kind {kind!r}", loc)

    def tensor_fun(self, lay: _Layer, loc) -> E.TensorFun:
        if lay.fn is None or isinstance(lay.fn, E.ScalarFun):
            raise ArityError(f"{lay.kind} cannot be used as a tensor function here", loc)
        return lay.fn

    # -- name resolution

    def lookup(self, name: str, index: str | None, scope: Section | None, loc) -> _Layer:
        key = (name, index, scope.name if scope else None)
        if key in self.cache:
            return self.cache[key]
        lay = None
        sections = [scope] if scope is not None else []
        sections.append(None)
        for sec in sections:
            decls = sec.decls if sec is not None else self._main().decls
            for d in decls:
                if d.name == name:
                    lay = self.decl_value(d, index if sec is not None else None, sec)
                    break
            if lay is not None:
                break
        if lay is None and name in self.prog.subnets:
            lay = self.instantiate(name, None, loc)
        if lay is None and name in LAYER_KINDS:
            lay = self.layer(name, name, (), loc, None)
        if lay is None:
            raise UnboundName(f"unbound name {name!r}", loc)
        self.cache[key] = lay
        return lay

    def _main(self) -> Section:
        for sec in self.prog.sections:
            if sec.kind == "net" and any(d.name == "loss" for d in sec.decls):
                return sec
        raise AssertionError("no main section")

    def decl_value(self, d: Decl, index: str | None, scope: Section | None) -> _Layer:
        v = d.value
        if isinstance(v, Term) and v.args is not None and v.name in LAYER_KINDS and not self._is_subnet(v.name):
            return self.layer(d.name, v.name, v.args, d.loc, index, scope)
        if isinstance(v, Term) and v.args is None and v.name in LAYER_KINDS and not self._declared(v.name, scope):
            return self.layer(d.name, v.name, (), d.loc, index, scope)
        return self.value(v, index, d.loc, scope)

    def _is_subnet(self, name: str) -> bool:
        return name in self.prog.subnets

    def _declared(self, name: str, scope: Section | None) -> bool:
        secs = [scope] if scope else []
        secs.append(self._main())
        return any(d.name == name for s in secs for d in s.decls)

    def instantiate(self, name: str, index: str | None, loc) -> _Layer:
        sec = self.prog.subnets[name]
        out = next((d for d in sec.decls if d.name == "out"), sec.decls[-1])
        return self.decl_value(out, index, sec)

    def value(self, v: Value, index: str | None, loc, scope: Section | None = None) -> _Layer:
        if isinstance(v, Term):
            if v.args is not None and v.name in self.prog.subnets:
                if len(v.args) != 1 or not isinstance(v.args[0].value, Num):
                    raise ArityError(f"subnet {v.name} takes one integer index", v.loc)
                return self.instantiate(v.name, str(int(v.args[0].value.value)), v.loc)
            if v.args is not None and v.name in LAYER_KINDS:
                return self.layer(v.name, v.name, v.args, v.loc, index, scope)
            return self.lookup(v.name, index, scope, v.loc or loc)
        if isinstance(v, Compose):
            terms = v.terms()
            lays = [self.value(t, index, t.loc or loc, scope) for t in terms]
            head, rest = lays[0], lays[1:]
            fn = None
            for lay in reversed(rest):
                f = self.tensor_fun(lay, v.loc)
                fn = f if fn is None else E.compose(f, fn)
            if head.kind in ("logloss", "precision"):
                if fn is None:
                    raise ArityError(f"{head.kind} must be composed with a network", v.loc)
                return _Layer(head.kind + "-applied", fn=fn, classes=head.classes)
            f = self.tensor_fun(head, v.loc)
            return _Layer("net", f if fn is None else E.compose(f, fn))
        raise ArityError(f"expected a layer or composition, got {v}", loc)


def full_layer(x: E.Tensor, W: E.Param, B: E.Param, out: int, site: str) -> E.IndexAbs:
    """Fully connected layer as indexed scalar expressions (contraction + bias)."""
    prod = E.IndexAbs(("i", "j"), E.Sum("k", None, E.Mul(E.Elem(x, ("i", "k")), E.Elem(W, ("j", "k")))),
                      (None, out), site)
    return E.IndexAbs(("i", "j"), E.Add(E.Elem(prod, ("i", "j")), E.Elem(B, ("j",))), (None, out), site)


def log_loss(y: E.Tensor, s: E.Tensor, batch: int) -> E.Scalar:
    """Mean negative log-likelihood ``-(Y . log S) / |N|``."""
    logs = E.IndexAbs(("i", "j"), E.Log(E.Elem(s, ("i", "j"))), (None, None), "logloss")
    return E.Div(E.Neg(E.Dot(y, logs)), E.Card(batch))


def _instance_name(name: str, index: str | None) -> str:
    if index is None:
        return name.replace("$", "")
    if "$" in name:
        return name.replace("$", index)
    return f"{name}_{index}"


def elaborate(prog: NetworkProgram, train: bool = True) -> Elaborated:
    """Build loss and accuracy expressions and collect trainable parameters.

    Compositions are expanded, subnets instantiated with fresh parameter
    names, and labels wrapped as one-hot indicator vectors.  ``train=False``
    elaborates the inference form (dropout becomes the identity).
    """
    el = _Elaborator(prog, train)
    d = prog.data
    x = E.Input("X", (d.batch,) + tuple(d.shape), "image")
    y = E.Input("Y", (d.batch,), "label")
    x1 = E.ToDevice(x)

    def labels(classes: int) -> E.Tensor:
        return E.ToDevice(E.Indicator(y, classes))

    def scalar(v: Value, loc) -> E.Scalar:
        terms = v.terms if isinstance(v, LossExpr) else ((None, v),)
        total = None
        weighted = 0
        for w, node in terms:
            lay = el.value(node, None, loc)
            if lay.kind not in ("logloss-applied", "precision-applied"):
                raise ArityError("loss and accuracy must be headed by logloss or precision", loc)
            net_out = lay.fn(x1)
            if lay.kind == "logloss-applied":
                term = log_loss(labels(lay.classes), net_out, d.batch)
            else:
                term = E.Precision(net_out, labels(lay.classes))
            if w is not None:
                weighted += 1
                term = E.Mul(term, E.NamedConst(w.value, f"loss{weighted}"))
            total = term if total is None else E.Add(total, term)
        return total

    main = el._main()
    loss_decl = next(dd for dd in main.decls if dd.name == "loss")
    loss = scalar(prog.loss_expr, loss_decl.loc)
    acc = None
    if prog.accuracy_expr is not None:
        acc_decl = next(dd for dd in main.decls if dd.name == "accuracy")
        acc = scalar(prog.accuracy_expr, acc_decl.loc)
    params = [el.specs[p.name] for p in E.free_params(loss)]
    return Elaborated(loss, acc, params, x, y)
