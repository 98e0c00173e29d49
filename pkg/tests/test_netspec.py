from __future__ import annotations

import pytest
from conftest import net_path

from tensorc import expr as E
from tensorc.errors import ArityError, DuplicateName, NetSyntaxError, ShapeMismatch, UnboundName
from tensorc.netspec import elaborate, parse_netspec, print_netspec, tokenize


def lenet_text() -> str:
    with open(net_path("lenet.net"), encoding="utf-8") as f:
        return f.read()


def test_conv_decl_hyperparameters():
    p = parse_netspec(lenet_text(), "lenet.net")
    cv1 = p.layers["cv1"]
    assert cv1.kind == "conv"
    args = {a.key: a.value.value for a in cv1.args}
    assert args == {"k": 5, "out": 20}
    assert (cv1.loc.line, cv1.loc.col) == (10, 3)


def test_empty_net_body_is_a_syntax_error():
    with pytest.raises(NetSyntaxError, match="expected composition"):
        parse_netspec("net a { }")


def test_syntax_error_is_located():
    with pytest.raises(NetSyntaxError) as ei:
        parse_netspec("net a {\n  cv1 = conv(k=5,, out=20)\n}", "x.net")
    assert ei.value.loc.file == "x.net"
    assert ei.value.loc.line == 2


def test_one_element_tuple_roundtrip():
    p = parse_netspec("data { shape = (784,) }\nnet n { loss = logloss . softmax }")
    assert p.data.shape == (784,)
    assert parse_netspec(print_netspec(p)) == p


def test_print_parse_roundtrip():
    p = parse_netspec(lenet_text())
    assert parse_netspec(print_netspec(p)) == p


def test_tokenizer_skips_comments():
    kinds = [t.kind for t in tokenize("a = b # trailing\n")]
    assert "ws" not in kinds
    assert kinds[:3] == ["ident", "=", "ident"]


def test_lenet_params_in_declaration_order():
    el = elaborate(parse_netspec(lenet_text()))
    assert [s.name for s in el.params] == [
        "cv1_W", "cv1_B", "cv2_W", "cv2_B", "fc1_W", "fc1_B", "fc2_W", "fc2_B"]


def test_elaborate_is_deterministic():
    a = elaborate(parse_netspec(lenet_text()))
    b = elaborate(parse_netspec(lenet_text()))
    assert [s.name for s in a.params] == [s.name for s in b.params]
    assert a.loss is b.loss  # hash-consed: structurally identical trees are one node


def test_no_trainable_layers():
    src = """
    data { batch = 2; shape = (4,); classes = 4 }
    net n { loss = logloss . softmax }
    """
    el = elaborate(parse_netspec(src))
    assert el.params == []


def test_inception_instantiated_twice_gets_fresh_names():
    with open(net_path("inception.net"), encoding="utf-8") as f:
        src = f.read().replace("inception(1) . relu", "inception(2) . inception(1) . relu")
    el = elaborate(parse_netspec(src))
    names = [s.name for s in el.params]
    conv_w = [n for n in names if n.endswith("_W") and not n.startswith(("stem", "fc"))]
    assert len(conv_w) == 12
    assert len(set(names)) == len(names)
    assert "c3_1_W" in names and "c3_2_W" in names


def test_layer_reuse_shares_parameters():
    # mp is applied twice in Lenet but has no parameters; a reused conv shares its weights
    src = """
    data { batch = 2; shape = (1, 8, 8); classes = 3 }
    net n {
      cv = conv(k=1, out=1)
      flat = flatten(4, 1)
      fc = full(3)
      loss = logloss . softmax . fc . flat . cv . cv
    }
    """
    el = elaborate(parse_netspec(src))
    assert [s.name for s in el.params] == ["cv_W", "cv_B", "fc_W", "fc_B"]


def test_full_without_flatten_is_rank_clash():
    src = """
    data { batch = 2; shape = (1, 8, 8); classes = 3 }
    net n { fc = full(3)
      loss = logloss . softmax . fc }
    """
    from tensorc.compiler import check
    with pytest.raises(ShapeMismatch):
        check(parse_netspec(src))


def test_unbound_and_duplicate_names():
    with pytest.raises(UnboundName):
        elaborate(parse_netspec("net n { loss = logloss . softmax . nothere }"))
    with pytest.raises(DuplicateName):
        parse_netspec("net n { a = relu\n a = relu\n loss = logloss . softmax . a }")


def test_loss_must_be_headed_by_logloss():
    with pytest.raises(ArityError):
        elaborate(parse_netspec("data { shape = (4,) }\nnet n { loss = softmax }"))


def test_config_values_are_validated():
    with pytest.raises(NetSyntaxError, match="lr must be > 0") as ei:
        parse_netspec("net n { loss = logloss . softmax }\nsolver { lr = 0 }")
    assert ei.value.loc.line == 2
    with pytest.raises(NetSyntaxError, match="batch"):
        parse_netspec("data { batch = 0 }\nnet n { loss = logloss . softmax }")


def test_loss_is_scalar_mean_log_loss():
    el = elaborate(parse_netspec(lenet_text()))
    assert isinstance(el.loss, E.Scalar)
    assert "|500|" in E.show(el.loss)
