from __future__ import annotations

import gzip
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensorc.runtime import kernels as K
from tensorc.runtime import ops
from tensorc.runtime.context import SCRATCH, Context
from tensorc.runtime.data import DimensionMismatch, load_idx, open_source, read_idx, synth_data
from tensorc.runtime.init import fans, init_param
from tensorc.runtime.pool import MemoryPool, PoolExhausted
from tensorc.runtime.snapshot import FormatError, load_snapshot, read_tensor, save_snapshot, write_tensor

rng = np.random.default_rng(0)


def naive_conv(x, W, B, s, p):
    N, C, H, Wd = x.shape
    F, _, k, _ = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    Ho, Wo = (H + 2 * p - k) // s + 1, (Wd + 2 * p - k) // s + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    out[n, f, i, j] = np.sum(xp[n, :, i * s:i * s + k, j * s:j * s + k] * W[f]) + B[f]
    return out


# ---------------------------------------------------------------- kernels


def test_conv_of_ones_is_four():
    y = K.conv_forward_im2col(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1), 1, 0)
    np.testing.assert_array_equal(y, np.full((1, 1, 2, 2), 4.0))


@pytest.mark.parametrize("s,p", [(1, 0), (2, 1), (1, 2), (3, 0)])
def test_conv_im2col_and_direct_match_naive(s, p):
    x, W, B = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    want = naive_conv(x, W, B, s, p)
    np.testing.assert_allclose(K.conv_forward_im2col(x, W, B, s, p), want, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(K.conv_forward_direct(x, W, B, s, p), want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("s,p", [(1, 0), (2, 1)])
def test_conv_backward_im2col_equals_direct(s, p):
    x, W = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    dy = rng.normal(size=naive_conv(x, W, np.zeros(4), s, p).shape)
    np.testing.assert_allclose(K.conv_backward_data_im2col(dy, W, x.shape, s, p),
                               K.conv_backward_data_direct(dy, W, x.shape, s, p), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(K.conv_backward_filter_im2col(dy, x, W.shape, s, p),
                               K.conv_backward_filter_direct(dy, x, W.shape, s, p), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(K.conv_backward_bias(dy), dy.sum((0, 2, 3)))


def test_im2col_col2im_adjoint():
    x = rng.normal(size=(2, 2, 5, 5))
    cols = K.im2col(x, 3, 2, 1)
    c = rng.normal(size=cols.shape)
    # <im2col(x), c> == <x, col2im(c)>
    assert np.sum(cols * c) == pytest.approx(np.sum(x * K.col2im(c, x.shape, 3, 2, 1)), rel=1e-12)


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(K.softmax(np.zeros((3, 10))), np.full((3, 10), 0.1))


def test_softmax_is_stable_for_large_logits():
    s = K.softmax(np.array([[1000.0, 0.0], [-1000.0, 0.0]]))
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(1), 1.0)


def test_safe_log_floors_zero():
    assert np.isfinite(K.safe_log(np.array([0.0]))[0])


def test_update_formula():
    p = np.array([1.0, 2.0])
    K.update(p, np.array([10.0, 10.0]), -0.01, 1.0)
    np.testing.assert_allclose(p, [0.9, 1.9])


def test_update_with_decay_and_scale():
    v = np.array([0.5, -0.5])
    p = np.array([1.0, 2.0])
    g = np.array([1.0, 1.0])
    K.update(v, g, -0.1, 0.9, 0.01, p, 0.5)
    np.testing.assert_allclose(v, 0.9 * np.array([0.5, -0.5]) - 0.1 * 0.5 * (g + 0.01 * p))


def test_clip_scale_is_global_norm():
    g1, g2 = np.array([3.0]), np.array([4.0])
    p = np.zeros(1)
    assert K.clip_scale(1.0, (0.0, 0.0), [g1, p, g2, p]) == pytest.approx(0.2)
    assert K.clip_scale(10.0, (0.0, 0.0), [g1, p, g2, p]) == 1.0


def test_pool_forward_brute_force():
    x = rng.normal(size=(1, 2, 5, 5))
    y = K.pool_forward(x, 3, 2, 1, True)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    for i in range(3):
        for j in range(3):
            np.testing.assert_array_equal(y[0, :, i, j], xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3].max((1, 2)))
    a = K.pool_forward(x, 2, 2, 0, False)
    np.testing.assert_allclose(a[0, 0, 0, 0], x[0, 0, :2, :2].mean())


def test_relu_and_backward():
    x = np.array([-1.0, 0.0, 2.0])
    y = K.relu(x)
    np.testing.assert_array_equal(y, [0, 0, 2])
    np.testing.assert_array_equal(K.relu_backward(np.ones(3), y), [0, 0, 1])


def test_dropout_mask_inverted_and_deterministic():
    m1 = K.dropout_mask((1000,), 0.5, 42, 3, 7, np.float64)
    m2 = K.dropout_mask((1000,), 0.5, 42, 3, 7, np.float64)
    m3 = K.dropout_mask((1000,), 0.5, 42, 4, 7, np.float64)
    np.testing.assert_array_equal(m1, m2)
    assert not np.array_equal(m1, m3)
    assert set(np.unique(m1)) == {0.0, 2.0}
    assert 400 < np.count_nonzero(m1) < 600


def test_one_hot_and_precision():
    y = np.array([2, 0, 1])
    oh = K.one_hot(y, 3)
    np.testing.assert_array_equal(oh.argmax(1), y)
    assert K.precision(oh, oh) == 1.0
    assert K.precision(np.roll(oh, 1, axis=1), oh) == 0.0


def test_matmul_contracts_named_axes():
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    np.testing.assert_allclose(K.matmul(a, b, 1, 1), a @ b.T)
    np.testing.assert_allclose(K.matmul(a, rng.normal(size=(4, 2)), 0, 0).shape, (5, 2))


# ---------------------------------------------------------------- pool and context


def test_best_fit_pool_reuses_block():
    pool = MemoryPool("reuse")
    b = pool.acquire(5760000)
    pool.release(b)
    c = pool.acquire(1600000)
    assert c is b and pool.allocs_from_os == 1 and pool.reuses == 1


def test_dealloc_mode_never_reuses():
    pool = MemoryPool("dealloc")
    for _ in range(5):
        pool.release(pool.acquire(100))
    assert pool.allocs_from_os == 5 and pool.releases == 5 and pool.reuses == 0
    assert pool.live_bytes == 0 and pool.free == []


def test_pool_cap():
    pool = MemoryPool("reuse", cap_bytes=1000)
    pool.acquire(800)
    with pytest.raises(PoolExhausted):
        pool.acquire(400)


def test_context_in_place_and_scratch():
    ctx = Context("reuse", np.float64)
    a = ctx.alloc((2, 3))
    b = ctx.alloc((2, 3), out=a)
    assert b.data is a.data and b.alias
    s = ctx.alloc((2, 3), out=SCRATCH)
    assert s.block is None and ctx.pool.allocs_from_os == 1


def test_context_workspace_cap():
    assert Context(workspace_bytes=0).workspace(10) is None
    assert Context(workspace_bytes=40).workspace(10).size == 10
    assert Context().workspace(10**3).size == 1000


def test_conv_op_uses_direct_kernel_over_cap():
    x, W, B = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    c0 = Context(dtype=np.float64, workspace_bytes=0)
    c1 = Context(dtype=np.float64)
    y0 = np.asarray(ops.conv(c0, x, W, B, 1, 0))
    y1 = np.asarray(ops.conv(c1, x, W, B, 1, 0))
    assert (c0.direct_convs, c0.im2col_convs) == (1, 0)
    assert (c1.direct_convs, c1.im2col_convs) == (0, 1)
    np.testing.assert_allclose(y0, y1, rtol=1e-12)


# ---------------------------------------------------------------- init


def test_xavier_bounds_and_determinism():
    a = init_param("cv1_W", (20, 1, 5, 5), ("xavier",), 42)
    fi, fo = fans((20, 1, 5, 5))
    assert (fi, fo) == (25, 500)
    assert np.abs(a).max() <= np.sqrt(6 / (fi + fo))
    np.testing.assert_array_equal(a, init_param("cv1_W", (20, 1, 5, 5), ("xavier",), 42))
    assert not np.array_equal(a, init_param("cv2_W", (20, 1, 5, 5), ("xavier",), 42))
    np.testing.assert_array_equal(init_param("b", (3,), ("const", 0.5)), np.full(3, 0.5, np.float32))


def test_f32_and_f64_start_equal():
    a = init_param("w", (4, 4), ("xavier",), 1, np.float32)
    b = init_param("w", (4, 4), ("xavier",), 1, np.float64)
    np.testing.assert_array_equal(a.astype(np.float64), b)


# ---------------------------------------------------------------- snapshots


def test_tensor_file_layout(tmp_path):
    path = tmp_path / "w.ddt"
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_tensor(str(path), a)
    raw = path.read_bytes()
    assert raw[:4] == b"DDSL"
    assert struct.unpack_from("<III", raw, 4) == (1, 2, 2)
    assert struct.unpack_from("<I", raw, 16) == (3,)
    np.testing.assert_array_equal(np.frombuffer(raw[20:], "<f4"), a.ravel())


def test_snapshot_roundtrip_is_bitwise(tmp_path):
    t = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=(5,)).astype(np.float32)}
    save_snapshot(str(tmp_path), t, {"iteration": 3})
    back = {k: np.zeros_like(v) for k, v in t.items()}
    assert load_snapshot(str(tmp_path), back) == ["a", "b"]
    for k in t:
        assert back[k].tobytes() == t[k].tobytes()


def test_partial_load_keeps_missing(tmp_path):
    save_snapshot(str(tmp_path), {"a": np.ones(2, np.float32)})
    target = {"a": np.zeros(2, np.float32), "fc2_W": np.full(2, 7.0, np.float32)}
    with pytest.warns(UserWarning, match="fc2_W"):
        loaded = load_snapshot(str(tmp_path), target)
    assert loaded == ["a"]
    np.testing.assert_array_equal(target["fc2_W"], [7.0, 7.0])
    np.testing.assert_array_equal(target["a"], [1.0, 1.0])


def test_corrupt_magic_names_file(tmp_path):
    path = tmp_path / "w.ddt"
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(FormatError, match="w.ddt"):
        read_tensor(str(path))


def test_truncated_payload(tmp_path):
    path = tmp_path / "w.ddt"
    write_tensor(str(path), np.ones((2, 2), np.float32))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError, match="payload"):
        read_tensor(str(path))


def test_shape_mismatch_on_load(tmp_path):
    save_snapshot(str(tmp_path), {"a": np.ones(3, np.float32)})
    with pytest.raises(FormatError):
        load_snapshot(str(tmp_path), {"a": np.zeros(2, np.float32)})


# ---------------------------------------------------------------- data


def write_idx(path: str, data: np.ndarray, compress: bool = False) -> None:
    magic = 0x0800 | data.ndim
    raw = struct.pack(">I", magic) + struct.pack(f">{data.ndim}I", *data.shape) + data.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(raw)


def test_idx_reader(tmp_path):
    imgs = rng.integers(0, 256, size=(10, 28, 28))
    write_idx(str(tmp_path / "i"), imgs)
    got = read_idx(str(tmp_path / "i"))
    assert got.shape == (10, 28, 28)
    np.testing.assert_array_equal(got, imgs)


def test_idx_loader_gzip_and_scaling(tmp_path):
    imgs = rng.integers(0, 256, size=(6, 4, 4))
    labs = np.array([0, 1, 2, 0, 1, 2])
    write_idx(str(tmp_path / "img.gz"), imgs, compress=True)
    write_idx(str(tmp_path / "lab"), labs)
    ds = load_idx(str(tmp_path / "img"), str(tmp_path / "lab"), 3, (1, 4, 4))
    assert ds.images.shape == (6, 1, 4, 4) and ds.images.dtype == np.float32
    np.testing.assert_allclose(ds.images[:, 0] * 255, imgs)
    with pytest.raises(DimensionMismatch):
        load_idx(str(tmp_path / "img"), str(tmp_path / "lab"), 3, (1, 28, 28))


def test_label_out_of_range(tmp_path):
    write_idx(str(tmp_path / "img"), np.zeros((2, 4, 4)))
    write_idx(str(tmp_path / "lab"), np.array([1, 10]))
    with pytest.raises(FormatError, match="label 10"):
        load_idx(str(tmp_path / "img"), str(tmp_path / "lab"), 10)


def test_bad_idx_magic(tmp_path):
    (tmp_path / "x").write_bytes(struct.pack(">II", 0x1234, 1) + b"\0")
    with pytest.raises(FormatError, match="magic"):
        read_idx(str(tmp_path / "x"))


def test_synthetic_data_is_deterministic():
    a = synth_data(7, 100, (1, 8, 8), 10)
    b = synth_data(7, 100, (1, 8, 8), 10)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    test = synth_data(7, 100, (1, 8, 8), 10, draw=2)
    assert not np.array_equal(a.images, test.images)


def test_cyclic_batches():
    ds = synth_data(1, 10, (2,), 3)
    X, Y = ds.batch(3, 4)  # samples 12..15 mod 10
    np.testing.assert_array_equal(Y, ds.labels[[2, 3, 4, 5]])


def test_mnist_source_falls_back_to_synthetic(monkeypatch, tmp_path):
    monkeypatch.setenv("TENSORC_MNIST_DIR", str(tmp_path))
    with pytest.warns(UserWarning, match="synthetic"):
        ds = open_source("mnist", (1, 28, 28), 10, 100)
    assert len(ds) == 100


def test_mnist_directory_source(monkeypatch, tmp_path):
    write_idx(str(tmp_path / "train-images-idx3-ubyte"), rng.integers(0, 256, size=(8, 28, 28)))
    write_idx(str(tmp_path / "train-labels-idx1-ubyte"), np.arange(8) % 10)
    monkeypatch.setenv("TENSORC_MNIST_DIR", str(tmp_path))
    ds = open_source("mnist", (1, 28, 28), 10, 5)
    assert len(ds) == 5 and ds.images.shape[1:] == (1, 28, 28)
    assert os.path.exists(tmp_path / "train-images-idx3-ubyte")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(1, 3), st.integers(1, 2),
       st.integers(0, 1))
def test_conv_property_im2col_equals_direct(n, c, hw, k, s, p):
    if hw + 2 * p < k:
        return
    r = np.random.default_rng(n * 100 + c * 10 + hw)
    x, W, B = r.normal(size=(n, c, hw, hw)), r.normal(size=(2, c, k, k)), r.normal(size=2)
    np.testing.assert_allclose(K.conv_forward_im2col(x, W, B, s, p), K.conv_forward_direct(x, W, B, s, p),
                               rtol=1e-10, atol=1e-12)
