"""Dimension inference by unification over expression trees.

``infer_shapes`` assigns a concrete shape to every tensor subterm and every
parameter, taking parameter shapes from their first constraining use.
``bind`` then rebuilds the trees with the inferred shapes filled in, after
which every node carries its shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import expr as E
from .errors import ShapeMismatch
from .shapes import Shape, shape_rule


@dataclass
class ShapeAssignment:
    shapes: dict[int, Shape] = field(default_factory=dict)
    params: dict[str, Shape] = field(default_factory=dict)
    extents: dict[int, tuple] = field(default_factory=dict)

    def of(self, node: E.Expr) -> Shape | None:
        return self.shapes.get(id(node))


def _unify_param(asg: ShapeAssignment, p: E.Param, shape: Shape, site: str) -> None:
    hint = p.hint
    if hint is not None:
        if len(hint) != len(shape):
            raise ShapeMismatch(site, f"{p.name} rank {len(hint)}", f"rank {len(shape)}")
        for h, s in zip(hint, shape):
            if h is not None and h != s:
                raise ShapeMismatch(site, f"{p.name} {tuple(hint)}", shape)
    prev = asg.params.get(p.name)
    if prev is not None and prev != shape:
        raise ShapeMismatch(site, f"{p.name} {prev}", shape, detail="parameter used at two shapes")
    asg.params[p.name] = shape
    asg.shapes[id(p)] = shape


def _param_shape(asg: ShapeAssignment, p: E.Param) -> Shape | None:
    if p.pshape is not None:
        return p.pshape
    return asg.params.get(p.name)


def _scalar_elems(body: E.Expr, out: list, scope: tuple = ()) -> None:
    """Collect (Elem, enclosing Sum nodes) pairs without entering tensors."""
    if isinstance(body, E.Elem):
        out.append((body, scope))
        return
    if isinstance(body, E.Sum):
        _scalar_elems(body.body, out, scope + (body,))
        return
    if body.is_tensor:
        return
    for c in E.operands(body):
        if not c.is_tensor:
            _scalar_elems(c, out, scope)


def _resolve_body(asg: ShapeAssignment, body: E.Expr, env: dict[str, int | None], site: str) -> None:
    """Unify index extents in ``body`` with operand shapes; assign parameter shapes."""
    elems: list = []
    _scalar_elems(body, elems)
    sums: list[E.Sum] = []

    def collect_sums(e):
        if isinstance(e, E.Sum):
            sums.append(e)
            collect_sums(e.body)
        elif not e.is_tensor:
            for c in E.operands(e):
                collect_sums(c)

    collect_sums(body)
    for s in sums:
        if s.index not in env or env[s.index] is None:
            env[s.index] = s.extent

    def unify(ix: str, n: int, what: str) -> bool:
        cur = env.get(ix)
        if cur is None:
            env[ix] = n
            return True
        if cur != n:
            raise ShapeMismatch(site, f"extent {cur} for index {ix}", f"{n} from {what}")
        return False

    changed = True
    while changed:
        changed = False
        for el, _scope in elems:
            t = el.tensor
            shape = _param_shape(asg, t) if isinstance(t, E.Param) else asg.of(t)
            if isinstance(t, E.Param) and shape is None and t.hint is not None:
                if len(t.hint) != len(el.indices):
                    raise ShapeMismatch(site, f"{t.name} rank {len(t.hint)}", f"rank {len(el.indices)}")
                for ix, h in zip(el.indices, t.hint):
                    if h is not None:
                        changed |= unify(ix, h, t.name)
                continue
            if shape is None:
                continue
            if len(shape) != len(el.indices):
                raise ShapeMismatch(site, f"rank {len(el.indices)} operand", f"rank {len(shape)} {shape}",
                                    detail=f"operand {E.show(t) if not isinstance(t, E.Prim) else t.kind}")
            for ix, n in zip(el.indices, shape):
                changed |= unify(ix, n, E.show(t) if isinstance(t, (E.Param, E.Input, E.Var)) else "operand")
        for el, _scope in elems:
            t = el.tensor
            if isinstance(t, E.Param) and _param_shape(asg, t) is None:
                ext = [env.get(ix) for ix in el.indices]
                if all(x is not None for x in ext):
                    _unify_param(asg, t, tuple(ext), site)
                    changed = True
    for s in sums:
        if env.get(s.index) is None:
            raise ShapeMismatch(site, f"known extent for index {s.index}", "unconstrained")
        asg.extents[id(s)] = (env[s.index],)
    for el, _ in elems:
        t = el.tensor
        if isinstance(t, E.Param) and _param_shape(asg, t) is None:
            raise ShapeMismatch(site, f"shape for {t.name}", "unconstrained")


def _check_scalar(asg: ShapeAssignment, e: E.Expr, site: str) -> None:
    """Shape checks for index-free scalar roots (Dot, Precision)."""
    if isinstance(e, (E.Dot, E.Precision)):
        a, b = E.operands(e)
        sa, sb = asg.of(a), asg.of(b)
        if sa is not None and sb is not None and sa != sb:
            what = "log loss" if isinstance(e, E.Dot) else "precision"
            raise ShapeMismatch(what, sa, sb, detail="prediction vs one-hot labels")
    if isinstance(e, E.Elem) or isinstance(e, E.Sum):
        env: dict[str, int | None] = {}
        _resolve_body(asg, e, env, site)
        return
    if not e.is_tensor:
        for c in E.operands(e):
            if not c.is_tensor:
                _check_scalar(asg, c, site)


def infer_shapes(roots, input_shape: Shape | None = None, input_var: E.Var | None = None) -> ShapeAssignment:
    """Assign a concrete shape to every tensor subterm of ``roots``.

    ``roots`` is an expression or a list of them.  Leaves of kind ``Input``
    carry their own shapes; a free ``Var`` may be given ``input_shape``.
    Raises ``ShapeMismatch`` at the first inconsistent site in post-order.
    """
    if isinstance(roots, E.Expr):
        roots = [roots]
    asg = ShapeAssignment()
    for node in E.postorder(roots):
        if not node.is_tensor:
            continue
        t = type(node)
        if t is E.Input:
            shape = node.ishape if node.ishape is not None else input_shape
        elif t is E.Var:
            if node.vshape is not None:
                shape = node.vshape
            elif input_var is None or node is input_var or input_shape is not None:
                shape = input_shape
            else:
                shape = None
        elif t is E.Param:
            shape = _param_shape(asg, node)
        elif t is E.Prim:
            shape = _infer_prim(asg, node)
        elif t is E.IndexAbs:
            site = node.site or "index expression"
            env = {ix: ext for ix, ext in zip(node.indices, node.extents or (None,) * len(node.indices))}
            _resolve_body(asg, node.body, env, site)
            ext = tuple(env.get(ix) for ix in node.indices)
            if any(x is None for x in ext):
                raise ShapeMismatch(site, "bound extents for all indices", ext)
            asg.extents[id(node)] = ext
            shape = ext
        elif t is E.ScalarT:
            _check_scalar(asg, node.expr, "scalar")
            shape = ()
        elif t in (E.ToDevice, E.Copy, E.LogT, E.RecipT, E.ScaleT):
            shape = asg.of(node.operand)
        elif t is E.Indicator:
            s = asg.of(node.operand)
            shape = None if s is None else s + (node.classes,)
        elif t is E.Flatten:
            s = asg.of(node.operand)
            shape = None if s is None else shape_rule("Flatten", (node.frank, node.axis), [s], node.site or "flatten")
        elif t is E.Reshape:
            shape = node.rshape
        elif t is E.GradPrim:
            shape = node.gshape
        else:
            shape = node.shape
        if shape is None and t is not E.Param:
            raise ShapeMismatch(E.show(node) if t in (E.Var,) else t.__name__, "a known shape", "unknown")
        if shape is not None:
            asg.shapes[id(node)] = tuple(shape)
    for r in roots:
        if not r.is_tensor:
            _check_scalar(asg, r, "loss")
    return asg


def _infer_prim(asg: ShapeAssignment, node: E.Prim) -> Shape:
    site = node.site or node.kind
    ops = node.operands
    if node.kind == "Convolv":
        x = asg.of(ops[0])
        if x is None or len(x) != 4:
            raise ShapeMismatch(site, "rank 4 input", x if x is None else f"rank {len(x)} {x}")
        w, b = ops[1], ops[2]
        if isinstance(w, E.Param) and _param_shape(asg, w) is None:
            out, _, k, _ = w.hint
            _unify_param(asg, w, (out, x[1], k, k), site)
        if isinstance(b, E.Param) and _param_shape(asg, b) is None:
            wshape = _param_shape(asg, w) if isinstance(w, E.Param) else asg.of(w)
            _unify_param(asg, b, (wshape[0],), site)
    ins = []
    for o in ops:
        s = _param_shape(asg, o) if isinstance(o, E.Param) else asg.of(o)
        if s is None:
            raise ShapeMismatch(site, "operand with known shape", f"unconstrained {E.show(o)}")
        ins.append(s)
    return shape_rule(node.kind, node.hyper, ins, site)


def bind(roots, asg: ShapeAssignment) -> list:
    """Rebuild ``roots`` with inferred parameter shapes and index extents filled in."""
    single = isinstance(roots, E.Expr)
    if single:
        roots = [roots]
    memo: dict[int, E.Expr] = {}
    for node in E.postorder(roots, into_labels=True):
        new = E.map_children(node, lambda c: memo[id(c)])
        if isinstance(new, E.Param) and new.pshape is None:
            new = E.Param(new.name, asg.params[new.name], new.hint)
        elif isinstance(new, E.IndexAbs) and id(node) in asg.extents:
            new = E.IndexAbs(new.indices, new.body, asg.extents[id(node)], new.site)
        elif isinstance(new, E.Sum) and new.extent is None and id(node) in asg.extents:
            new = E.Sum(new.index, asg.extents[id(node)][0], new.body)
        elif isinstance(new, E.Var) and new.vshape is None and id(node) in asg.shapes:
            new = E.Var(new.name, asg.shapes[id(node)])
        memo[id(node)] = new
    out = [memo[id(r)] for r in roots]
    return out[0] if single else out
