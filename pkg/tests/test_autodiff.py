import io
import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from thermoformer import autodiff as ad
from thermoformer.errors import ConfigError, ContractError, ShapeError


def T(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=float), requires_grad=grad)


# matmul ----------------------------------------------------------------

def test_matmul_identity():
    m = [[1.0, 2.0], [3.0, 4.0]]
    np.testing.assert_array_equal(ad.matmul(T(np.eye(2)), T(m)).data, m)


def test_matmul_hand_value():
    assert ad.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_annihilator():
    out = ad.matmul(T(np.zeros((3, 3))), T(np.random.default_rng(0).normal(size=(3, 3))))
    np.testing.assert_array_equal(out.data, np.zeros((3, 3)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((4, 2))))


# softmax ---------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(T([0, 0, 0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(ad.softmax(T([1000.0, 1000.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ad.softmax(T([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_empty_axis():
    with pytest.raises(ShapeError):
        ad.softmax(T(np.zeros((2, 0))), axis=1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.sampled_from([0, 1, -1]))
def test_softmax_is_a_distribution(x, axis):
    s = ad.softmax(T(x), axis=axis).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, rtol=0, atol=1e-12)


# layer norm ------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = T(np.ones(4)), T(np.zeros(4))
    np.testing.assert_array_equal(ad.layer_norm(T([[5.0] * 4]), one, zero, 1e-5).data, [[0.0] * 4])
    out = ad.layer_norm(T([[1.0, 3.0]]), T([1.0, 1.0]), T([0.0, 0.0]), 1e-14).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-12)
    x = np.random.default_rng(1).normal(size=(3, 4))
    bias = np.array([0.1, -2, 3, 4])
    out = ad.layer_norm(T(x), T(np.zeros(4)), T(bias), 1e-5).data
    np.testing.assert_array_equal(out, np.broadcast_to(bias, (3, 4)))


def test_layer_norm_standardizes_rows():
    x = np.random.default_rng(2).uniform(-5, 5, size=(10, 16))
    out = ad.layer_norm(T(x), T(np.ones(16)), T(np.zeros(16)), 1e-14).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-10)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        ad.layer_norm(T([[1.0, 2.0]]), T([1.0, 1.0]), T([0.0, 0.0]), 0.0)


# backward --------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = T(np.random.default_rng(3).normal(size=(2, 3, 4)), grad=True)
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = T([3.0], grad=True)
    ad.sum_(x * x).backward()
    assert x.grad.tolist() == [6.0]


def test_backward_leaves_unrelated_leaf_untouched():
    x, y = T([1.0, 2.0], grad=True), T([5.0], grad=True)
    _ = y * 2.0
    ad.sum_(x).backward()
    assert y.grad is None


def test_backward_rejects_nonscalar():
    x = T([1.0, 2.0], grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_deterministic():
    rng = np.random.default_rng(4)
    w = T(rng.normal(size=(5, 5)), grad=True)
    x = T(rng.normal(size=(7, 5)))
    loss = ad.mean(ad.gelu(ad.softmax(x @ w) @ w))
    loss.backward()
    first = w.grad.copy()
    w.zero_grad()
    loss.backward()
    assert first.tobytes() == w.grad.tobytes()


def test_shared_node_accumulates():
    x = T([2.0], grad=True)
    y = x * x
    ad.sum_(y + y).backward()
    assert x.grad.tolist() == [8.0]


def test_broadcast_beyond_leading_axes_rejected():
    with pytest.raises(ShapeError):
        ad.add(T(np.ones((3, 1))), T(np.ones((3, 4))))


# gradient checks -------------------------------------------------------

def test_gradient_check_linear_exact():
    x = np.random.default_rng(5).normal(size=(4, 3))
    assert ad.gradient_check(ad.sum_, x, h=1e-3) <= 1e-9


def test_gradient_check_square():
    x = np.random.default_rng(6).uniform(-1, 1, size=8)
    assert ad.gradient_check(lambda t: ad.sum_(t * t), x, h=1e-5) <= 1e-6


def test_gradient_check_contract():
    with pytest.raises(ContractError):
        ad.gradient_check(lambda t: t * 2.0, np.ones(3), h=1e-5)
    with pytest.raises(ContractError):
        ad.gradient_check(ad.sum_, np.ones(3), h=0.5)


_rng = np.random.default_rng(7)
_W = _rng.uniform(-1, 1, size=(4, 3))
_B3 = _rng.uniform(-1, 1, size=(2, 3, 4))
_G4 = _rng.uniform(-1, 1, size=4)
OPS = {
    "add": (lambda t: ad.sum_(ad.add(t, _G4) * t), (3, 4)),
    "sub": (lambda t: ad.sum_(ad.sub(_G4, t) * t), (2, 4)),
    "mul": (lambda t: ad.sum_(t * t * _G4), (3, 4)),
    "matmul_left": (lambda t: ad.sum_((t @ _W) * (t @ _W)), (5, 4)),
    "matmul_right": (lambda t: ad.sum_(ad.gelu(ad.as_tensor(_B3) @ t)), (4, 3)),
    "matmul_batched": (lambda t: ad.sum_((t @ ad.transpose(t, (0, 2, 1))) * 0.5), (2, 3, 4)),
    "softmax": (lambda t: ad.sum_(ad.softmax(t, axis=0) * _B3[0].T[:, :3]), (4, 3)),
    "layer_norm_x": (lambda t: ad.sum_(ad.layer_norm(t, _G4, _G4 * 0.5) * _B3[0]), (3, 4)),
    "layer_norm_gain": (lambda g: ad.sum_(ad.layer_norm(ad.as_tensor(_B3), g, _G4) * _B3), (4,)),
    "layer_norm_bias": (lambda b: ad.sum_(ad.layer_norm(ad.as_tensor(_B3), _G4, b) * _B3 * _B3), (4,)),
    "relu": (lambda t: ad.sum_(ad.relu(t) * _G4), (3, 4)),
    "gelu": (lambda t: ad.sum_(ad.gelu(t) * _G4), (3, 4)),
    "concat": (lambda t: ad.sum_(ad.concat([t, t * t], axis=0) * _G4), (2, 4)),
    "slice": (lambda t: ad.sum_(ad.slice_(t, (slice(None), slice(1, 3))) * ad.slice_(t, (slice(None), slice(0, 2)))), (3, 4)),
    "reshape": (lambda t: ad.sum_(ad.reshape(t, (4, 3)) * _W), (3, 4)),
    "transpose": (lambda t: ad.sum_(ad.transpose(t, (1, 0)) * _W), (3, 4)),
    "sum_axis": (lambda t: ad.sum_(ad.sum_(t, axis=1) * ad.sum_(t, axis=1)), (3, 4)),
    "mean": (lambda t: ad.sum_(ad.mean(t * t, axis=0, keepdims=True) * _G4), (3, 4)),
    "broadcast": (lambda t: ad.sum_(ad.broadcast(t, (2, 3)) * _B3), (4,)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    f, shape = OPS[name]
    x = np.random.default_rng(zlib.crc32(name.encode())).uniform(-1, 1, size=shape)
    assert ad.gradient_check(f, x, h=1e-6) <= 1e-5


# serialization ---------------------------------------------------------

@pytest.mark.parametrize("shape", [(), (3,), (2, 3), (2, 0, 4)])
def test_tensor_roundtrip(shape):
    x = np.random.default_rng(8).normal(size=shape)
    buf = io.BytesIO()
    ad.write_tensor(buf, x)
    raw = buf.getvalue()
    assert int.from_bytes(raw[:4], "little") == len(shape)
    buf.seek(0)
    y = ad.read_tensor(buf)
    assert y.shape == shape and y.tobytes() == x.tobytes()


def test_validity_check():
    assert T([1.0, 2.0]).all_finite()
    assert not T([1.0, np.nan]).all_finite()
    assert not T([np.inf]).all_finite()
