"""Tensor core: ops against loop oracles, autodiff against finite
differences, rearrangement round trips, and the TNSR wire format.
"""

import struct

import numpy as np
import pytest

from hsisr.tensor import (
    CorruptTensorError,
    DtypeError,
    ShapeError,
    Tensor,
    backward,
    concat,
    conv2d,
    finite_diff_check,
    load_tensor,
    matmul,
    pixel_shuffle,
    pixel_unshuffle,
    rowwise_kron,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
)

F64 = np.float64


def t64(data, grad=False):
    return Tensor(np.asarray(data, dtype=F64), F64, requires_grad=grad)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    b = t64([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    eye = t64(np.eye(3))
    assert np.array_equal(matmul(eye, b).data, b.data)


def test_matmul_zero_annihilates():
    z = t64(np.zeros((2, 2)))
    b = t64([[1.0, -2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(z, b).data, np.zeros((2, 2)))


def test_matmul_hand_value():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    b = t64([[5.0], [6.0]])
    assert np.array_equal(matmul(a, b).data, [[17.0], [39.0]])


def _matmul_loop(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def test_matmul_vs_triple_loop():
    rng = np.random.default_rng(3)
    for _ in range(10):
        m, k, n = rng.integers(1, 7, size=3)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        got = matmul(t64(a), t64(b)).data
        assert np.allclose(got, _matmul_loop(a, b), atol=1e-12)


def test_matmul_associativity():
    rng = np.random.default_rng(4)
    for _ in range(10):
        a = t64(rng.standard_normal((5, 4)))
        b = t64(rng.standard_normal((4, 6)))
        c = t64(rng.standard_normal((6, 3)))
        left = matmul(matmul(a, b), c).data
        right = matmul(a, matmul(b, c)).data
        rel = np.max(np.abs(left - right)) / max(np.max(np.abs(right)), 1e-30)
        assert rel <= 1e-5


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


# -- conv2d ------------------------------------------------------------------


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = t64(rng.standard_normal((2, 5, 5)))
    w = np.zeros((2, 2, 3, 3))
    for c in range(2):
        w[c, c, 1, 1] = 1.0
    out = conv2d(x, t64(w), mode="spatial")
    assert np.allclose(out.data, x.data, atol=1e-12)


def test_conv_allones_on_constant_interior():
    c = 0.7
    x = t64(np.full((1, 5, 5), c))
    w = t64(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, mode="spatial")
    assert abs(out.data[0, 2, 2] - 9 * c) < 1e-12


def test_conv_1x1_is_product():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 2))
    k = rng.standard_normal((1, 1, 1, 1))
    out = conv2d(t64(x), t64(k), mode="pointwise")
    assert np.allclose(out.data, x * k[0, 0, 0, 0], atol=1e-12)


def _conv_loop(x, w, mode):
    cout, cin_w, k, _ = w.shape
    cin, h, wd = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((cout, h, wd))
    for co in range(cout):
        for i in range(h):
            for j in range(wd):
                acc = 0.0
                for u in range(k):
                    for v in range(k):
                        if mode == "depthwise":
                            acc += w[co, 0, u, v] * xp[co, i + u, j + v]
                        else:
                            for ci in range(cin):
                                acc += w[co, ci, u, v] * xp[ci, i + u, j + v]
                out[co, i, j] = acc
    return out


@pytest.mark.parametrize("mode,k,cin,cout", [
    ("spatial", 3, 3, 2),
    ("pointwise", 1, 4, 3),
    ("depthwise", 3, 3, 3),
])
def test_conv_vs_loop_oracle(mode, k, cin, cout):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((cin, 4, 5))
    wshape = (cout, 1, k, k) if mode == "depthwise" else (cout, cin, k, k)
    w = rng.standard_normal(wshape)
    got = conv2d(t64(x), t64(w), mode=mode).data
    assert np.allclose(got, _conv_loop(x, w, mode), atol=1e-10)


def test_conv_rejects_unsupported_kernel():
    with pytest.raises(ShapeError):
        conv2d(t64(np.ones((1, 4, 4))), t64(np.ones((1, 1, 5, 5))), mode="spatial")


def test_conv_depthwise_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(t64(np.ones((3, 4, 4))), t64(np.ones((2, 1, 3, 3))), mode="depthwise")


# -- pixel shuffle -----------------------------------------------------------


def test_pixel_shuffle_r1_identity():
    x = t64(np.arange(12.0).reshape(3, 2, 2))
    assert np.array_equal(pixel_shuffle(x, 1).data, x.data)


def test_pixel_shuffle_2x2_layout():
    x = t64(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
    out = pixel_shuffle(x, 2)
    assert np.array_equal(out.data, [[[1.0, 2.0], [3.0, 4.0]]])


@pytest.mark.parametrize("r", [1, 2, 4])
def test_unshuffle_shuffle_roundtrip(r):
    rng = np.random.default_rng(r)
    x = rng.standard_normal((3 * r * r, 4, 5))
    back = pixel_unshuffle(pixel_shuffle(t64(x), r), r).data
    assert np.array_equal(back, x)


def test_pixel_shuffle_indivisible_channels():
    with pytest.raises(ShapeError):
        pixel_shuffle(t64(np.ones((3, 2, 2))), 2)


# -- elementwise / reductions --------------------------------------------------


def test_softmax_constant_row():
    x = t64(np.full((2, 5), 3.3))
    out = x.softmax().data
    assert np.allclose(out, 1.0 / 5, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(8)
    out = t64(rng.standard_normal((6, 9))).softmax().data
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_exp_of_zeros():
    assert np.array_equal(t64(np.zeros((2, 3))).exp().data, np.ones((2, 3)))


def test_mean_axis0():
    assert t64([1.0, 2.0, 3.0]).mean(axis=0).item() == 2.0


def test_add_requires_same_shape():
    with pytest.raises(ShapeError):
        t64(np.ones((2, 3))).add(t64(np.ones((3, 2))))


def test_mixed_dtypes_rejected():
    a = Tensor(np.ones((2, 2)), np.float64)
    b = Tensor(np.ones((2, 2), dtype=np.float32), np.float32)
    with pytest.raises(DtypeError):
        a.add(b)


def test_scalar_broadcast_only():
    a = t64([[1.0, 2.0]])
    assert np.array_equal(a.add(1.5).data, [[2.5, 3.5]])
    assert np.array_equal(a.mul(2.0).data, [[2.0, 4.0]])


# -- backward ----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = t64(np.arange(6.0).reshape(2, 3), grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares():
    x = t64([[1.0, -2.0], [0.5, 3.0]], grad=True)
    backward(x.mul(x).sum())
    assert np.allclose(x.grad, 2 * x.data, atol=1e-12)


def test_backward_rejects_nonscalar():
    x = t64(np.ones((2, 2)), grad=True)
    with pytest.raises(ShapeError):
        backward(x.mul(2.0))


def test_backward_unreachable_param_zero_grad():
    from hsisr.tensor import Param
    x = t64(np.ones(3), grad=True)
    orphan = Param("orphan", t64(np.ones(2), grad=True))
    backward(x.sum())
    assert np.array_equal(orphan.grad, np.zeros(2))


# -- finite differences, per primitive ------------------------------------------


def test_fd_sum_of_squares_tight():
    f = lambda t: t.mul(t).sum()
    assert finite_diff_check(f, t64([1.0, -2.0]), h=1e-5) <= 1e-6


def test_fd_softmax_sum_is_constant():
    f = lambda t: t.softmax().sum()
    x = t64(np.random.default_rng(1).standard_normal((3, 4)))
    assert finite_diff_check(f, x, h=1e-5) <= 1e-6


def _away_from_zero(rng, shape):
    """Samples with |x| >= 0.2 so kinked primitives stay locally smooth."""
    x = rng.standard_normal(shape)
    return x + np.sign(x) * 0.2


_PRIMITIVE_CASES = {
    "add": lambda x, aux: x.add(aux).sum(),
    "sub": lambda x, aux: x.sub(aux).mul(x).sum(),
    "mul": lambda x, aux: x.mul(aux).sum(),
    "neg": lambda x, aux: x.neg().mul(aux).sum(),
    "exp": lambda x, aux: x.exp().mul(aux).sum(),
    "sqrt": lambda x, aux: x.mul(x).add(1.0).sqrt().mul(aux).sum(),
    "reciprocal": lambda x, aux: x.mul(x).add(1.0).reciprocal().mul(aux).sum(),
    "abs": lambda x, aux: x.abs().mul(aux).sum(),
    "power": lambda x, aux: x.power(3).mul(aux).sum(),
    "clamp_min": lambda x, aux: x.clamp_min(0.0).mul(aux).sum(),
    "gelu": lambda x, aux: x.gelu().mul(aux).sum(),
    "leaky_relu": lambda x, aux: x.leaky_relu(0.1).mul(aux).sum(),
    "sum_axis": lambda x, aux: x.sum(axis=1).mul(aux.narrow(1, 0, 1).reshape((3,))).sum(),
    "mean_axis": lambda x, aux: x.mean(axis=0).mul(aux.narrow(0, 0, 1).reshape((4,))).sum(),
    "softmax": lambda x, aux: x.softmax().mul(aux).sum(),
    "reshape": lambda x, aux: x.reshape((12,)).mul(aux.reshape((12,))).sum(),
    "transpose": lambda x, aux: x.transpose().mul(aux.transpose()).sum(),
    "narrow": lambda x, aux: x.narrow(1, 1, 2).mul(aux.narrow(1, 1, 2)).sum(),
    "repeat_last": lambda x, aux: x.narrow(1, 0, 1).repeat_last(4).mul(aux).sum(),
    "add_rowvec": lambda x, aux: x.add_rowvec(aux.narrow(0, 0, 1).reshape((4,))).mul(x).sum(),
}


@pytest.mark.parametrize("name", sorted(_PRIMITIVE_CASES))
def test_fd_primitive(name):
    fn = _PRIMITIVE_CASES[name]
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = t64(_away_from_zero(rng, (3, 4)))
        aux = t64(rng.standard_normal((3, 4)))
        worst = max(worst, finite_diff_check(lambda t: fn(t, aux), x, h=1e-5))
    assert worst <= 1e-4, f"{name}: fd gap {worst:.3e}"


@pytest.mark.parametrize("name", ["matmul", "concat", "rowwise_kron", "conv",
                                  "shuffle"])
def test_fd_structural(name):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        if name == "matmul":
            x = t64(rng.standard_normal((3, 4)))
            b = t64(rng.standard_normal((4, 2)))
            f = lambda t: matmul(t, b).abs().sum()
        elif name == "concat":
            x = t64(rng.standard_normal((2, 3)))
            b = t64(rng.standard_normal((2, 3)))
            f = lambda t: concat([t, b], axis=0).mul(concat([b, t], axis=0)).sum()
        elif name == "rowwise_kron":
            x = t64(rng.standard_normal((3, 2)))
            b = t64(rng.standard_normal((3, 4)))
            f = lambda t: rowwise_kron(t, b).abs().sum()
        elif name == "conv":
            x = t64(rng.standard_normal((2, 3, 3)))
            w = t64(rng.standard_normal((2, 2, 3, 3)))
            bias = t64(rng.standard_normal(2))
            f = lambda t: conv2d(t, w, bias, mode="spatial").abs().sum()
        else:
            x = t64(rng.standard_normal((4, 2, 2)))
            b = t64(rng.standard_normal((1, 4, 4)))
            f = lambda t: pixel_shuffle(t, 2).mul(b).sum()
        worst = max(worst, finite_diff_check(f, x, h=1e-5))
    assert worst <= 1e-4, f"{name}: fd gap {worst:.3e}"


def test_fd_conv_weight_gradient():
    rng = np.random.default_rng(42)
    x = t64(rng.standard_normal((2, 4, 4)))
    w = t64(rng.standard_normal((3, 2, 3, 3)))
    f = lambda t: conv2d(x, t, mode="spatial").abs().sum()
    assert finite_diff_check(f, w, h=1e-5) <= 1e-4


# -- determinism -------------------------------------------------------------


def test_ops_deterministic():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((8, 8))
    b = rng.standard_normal((8, 8))
    r1 = matmul(t64(a), t64(b)).data
    r2 = matmul(t64(a), t64(b)).data
    assert np.array_equal(r1, r2)
    s1 = t64(a).softmax().exp().sum().item()
    s2 = t64(a).softmax().exp().sum().item()
    assert s1 == s2


# -- TNSR serialization --------------------------------------------------------


def test_tensor_roundtrip_bytes():
    rng = np.random.default_rng(12)
    for dtype in (np.float32, np.float64):
        x = Tensor(rng.standard_normal((3, 1, 4)).astype(dtype), dtype)
        y, end = tensor_from_bytes(tensor_to_bytes(x))
        assert end == len(tensor_to_bytes(x))
        assert y.dtype == x.dtype
        assert np.array_equal(y.data, x.data)


def test_tensor_wire_layout():
    x = Tensor(np.array([2.0]), np.float64)
    raw = tensor_to_bytes(x)
    assert raw[:4] == b"TNSR"
    version, rank = struct.unpack_from("<HH", raw, 4)
    assert version == 1 and rank == 1
    (dim0,) = struct.unpack_from("<Q", raw, 8)
    assert dim0 == 1
    assert raw[16] == 2  # f64 code
    assert struct.unpack_from("<d", raw, 17)[0] == 2.0
    assert len(raw) == 25


def test_tensor_corrupt_rejected():
    x = Tensor(np.ones((2, 2), dtype=np.float32), np.float32)
    raw = tensor_to_bytes(x)
    with pytest.raises(CorruptTensorError):
        tensor_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptTensorError):
        tensor_from_bytes(raw[:-3])


def test_tensor_file_roundtrip(tmp_path):
    x = Tensor(np.random.default_rng(0).standard_normal((5,)).astype(np.float32),
               np.float32)
    p = tmp_path / "x.tnsr"
    save_tensor(x, p)
    y = load_tensor(p)
    assert np.array_equal(y.data, x.data)
    p.write_bytes(p.read_bytes() + b"!")
    with pytest.raises(CorruptTensorError):
        load_tensor(p)
