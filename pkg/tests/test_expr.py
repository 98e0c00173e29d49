from __future__ import annotations

import numpy as np
import pytest
from conftest import eval_tensor, net_path
from hypothesis import given
from hypothesis import strategies as st

from tensorc import expr as E
from tensorc.errors import NonPositiveExtent, ShapeMismatch
from tensorc.infer import bind, infer_shapes
from tensorc.netspec import elaborate, parse_netspec
from tensorc.shapes import shape_rule, window_extent


def relu_fun() -> E.TensorFun:
    return E.TensorFun.of(lambda x: E.Prim("ReLU", (2,), (x,)))


def scale_fun(c: float) -> E.TensorFun:
    def build(x):
        return E.IndexAbs(("i", "j"), E.Mul(E.Const(c), E.Elem(x, ("i", "j"))), (2, 3))
    return E.TensorFun.of(build)


def test_hash_consing_identifies_equal_trees():
    a = E.Add(E.Elem(E.Var("x", (3,)), ("i",)), E.Const(1.0))
    b = E.Add(E.Elem(E.Var("x", (3,)), ("i",)), E.Const(1.0))
    assert a is b
    assert E.Var("x", (3,)) is not E.Var("x", (4,))


def test_conv_shape_from_fig2():
    assert shape_rule("Convolv", (1, 0), [(500, 1, 28, 28), (20, 1, 5, 5), (20,)]) == (500, 20, 24, 24)
    assert shape_rule("Convolv", (1, 0), [(500, 20, 12, 12), (50, 20, 5, 5), (50,)]) == (500, 50, 8, 8)


def test_pool_shapes():
    assert shape_rule("Pooling", (2, 2, 0, True), [(500, 20, 24, 24)]) == (500, 20, 12, 12)
    assert shape_rule("Pooling", (3, 1, 1, True), [(8, 192, 28, 28)]) == (8, 192, 28, 28)


def test_concat_sums_channels():
    ins = [(2, c, 5, 5) for c in (64, 128, 32, 32)]
    assert shape_rule("Concat", (), ins) == (2, 256, 5, 5)
    got = np.concatenate([np.zeros(s) for s in ins], axis=1).shape
    assert got == (2, 256, 5, 5)


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeMismatch):
        shape_rule("Concat", (), [(2, 4, 5, 5), (2, 4, 4, 4)], "cat")


def test_flatten_lenet():
    assert shape_rule("Flatten", (4, 1), [(500, 50, 4, 4)]) == (500, 800)


def test_nonpositive_extent():
    with pytest.raises(NonPositiveExtent):
        shape_rule("Convolv", (1, 0), [(1, 1, 4, 4), (1, 1, 7, 7), (1,)], "cv")


@given(n=st.integers(1, 64), k=st.integers(1, 9), s=st.integers(1, 4), p=st.integers(0, 3))
def test_window_extent_matches_brute_force(n, k, s, p):
    starts = [i for i in range(-p, n + p) if i + k <= n + p and (i + p) % s == 0]
    if not starts:
        with pytest.raises(NonPositiveExtent):
            window_extent(n, k, s, p)
    else:
        assert window_extent(n, k, s, p) == len(starts)


def test_compose_applies_right_first():
    x = E.Var("x", (2, 3))
    f = E.compose(scale_fun(-1.0), relu_fun())  # -relu(x)
    g = E.compose(relu_fun(), scale_fun(-1.0))  # relu(-x)
    v = np.array([[1.0, -2.0, 3.0], [-4.0, 5.0, -6.0]])
    fx = bind(f(x), infer_shapes(f(x)))
    gx = bind(g(x), infer_shapes(g(x)))
    np.testing.assert_allclose(eval_tensor(fx, {"x": v}), -np.maximum(v, 0))
    np.testing.assert_allclose(eval_tensor(gx, {"x": v}), np.maximum(-v, 0))


def test_compose_is_associative():
    x = E.Var("x", (2, 3))
    a, b, c = scale_fun(2.0), relu_fun(), scale_fun(-0.5)
    left = E.compose(E.compose(a, b), c)(x)
    right = E.compose(a, E.compose(b, c))(x)
    assert left is right


def test_free_params_lenet():
    el = elaborate(parse_netspec(open(net_path("lenet.net")).read()))
    loss = bind(el.loss, infer_shapes(el.loss))
    ps = E.free_params(loss)
    assert len(ps) == 8
    assert {p.name: p.shape for p in ps}["fc1_W"] == (500, 800)


def test_free_params_of_constant():
    assert E.free_params(E.Const(3.0)) == []


def test_free_indices_and_rename():
    x = E.Var("x", (2, 3))
    body = E.Sum("j", 3, E.Elem(x, ("i", "j")))
    assert E.free_indices(body) == frozenset({"i"})
    assert E.free_indices(E.rename_indices(body, {"i": "k"})) == frozenset({"k"})
    # renaming onto the bound index must not capture it
    renamed = E.rename_indices(body, {"i": "j"})
    assert E.free_indices(renamed) == frozenset({"j"})


def test_index_abstraction_evaluates_row_sums():
    x = E.Var("x", (2, 3))
    t = E.IndexAbs(("i",), E.Sum("j", 3, E.Elem(x, ("i", "j"))), (2,))
    v = np.arange(6.0).reshape(2, 3)
    np.testing.assert_allclose(eval_tensor(t, {"x": v}), v.sum(1))


def test_show_uses_ir_surface_syntax():
    p = E.Prim("Convolv", (1, 0), (E.Var("X7", (500, 1, 28, 28)), E.Param("cv1_W", (20, 1, 5, 5)),
                                    E.Param("cv1_B", (20,))))
    assert E.show(p) == "Convolv(1,0)(X7,cv1_W,cv1_B)"
    assert E.show(E.Prim("Pooling", (2, 2, 0, True), (E.Var("X8", (500, 20, 24, 24)),))) == \
        "Pooling(2,2,0,true)(X8)"
