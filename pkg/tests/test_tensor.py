import math
import zlib

import numpy as np
import pytest

from icepose import tensor as T
from icepose.errors import ContractError, DimensionError, NonFiniteError
from icepose.tensor import Tensor


def leaf(x):
    return Tensor(x, requires_grad=True)


# ---------------------------------------------------------------- construction


def test_tensor_copies_and_validates():
    src = np.array([[1.0, 2.0]])
    t = Tensor(src)
    src[0, 0] = 9.0
    assert t.data[0, 0] == 1.0 and t.data.dtype == np.float64
    assert t.size == 2 and t.shape == (1, 2)
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_debug_mode_flags_non_finite_op_output():
    x = Tensor([1e308])
    with np.errstate(over="ignore"):
        T.set_debug(True)
        try:
            with pytest.raises(NonFiniteError):
                T.scale(x, 10.0)
        finally:
            T.set_debug(False)
        assert not np.isfinite(T.scale(x, 10.0).data[0])


# ------------------------------------------------------------------ matmul


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    assert np.array_equal(T.matmul(eye, eye).data, np.eye(2))
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert np.array_equal(out.data, [[3], [7]])
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3)) + 1), Tensor(np.ones((4, 5))))


def test_matmul_associative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m, k, n, p = rng.integers(1, 6, 4)
        a, b, c = (Tensor(rng.normal(size=s)) for s in ((m, k), (k, n), (n, p)))
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


def test_graph_recorded_only_when_needed():
    a, b = Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))
    assert not T.matmul(a, b).requires_grad
    out = T.matmul(leaf(np.ones((2, 2))), b)
    assert out.requires_grad and out.op == "matmul"
    with T.no_grad():
        assert not T.matmul(leaf(np.ones((2, 2))), b).requires_grad


# ------------------------------------------------------------- elementwise


def test_elementwise_examples():
    x = Tensor([1.5, -2.0])
    assert np.array_equal(T.elementwise("add", x, Tensor([0.0, 0.0])).data, x.data)
    assert T.gelu(Tensor([0.0])).item() == 0.0
    assert np.array_equal(T.elementwise("mul", Tensor([2, 3]), Tensor([4, 5])).data, [8, 15])
    assert np.array_equal(T.elementwise("scale", x, 2.0).data, [3.0, -4.0])
    with pytest.raises(DimensionError):
        T.add(Tensor([1.0]), Tensor([1.0, 2.0]))
    with pytest.raises(ContractError):
        T.elementwise("pow", x, x)


def test_gelu_tanh_approximation_value():
    x = 1.0
    expected = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert T.gelu(Tensor([x])).item() == pytest.approx(expected, abs=1e-15)


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([2.0, 2.0, 2.0])).data, 1 / 3, atol=1e-15)
    assert np.allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(scale=20.0, size=(50, 7)))
    y = T.softmax(x).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)
    y2 = T.softmax(Tensor(rng.normal(size=(4, 9)))).data
    assert np.all(y2 > 0.0)


# -------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(T.layer_norm(Tensor(np.full((1, 4), 3.0)), g, b).data, np.zeros((1, 4)))
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-5)
    assert np.allclose(out, np.array([[1.0, -1.0]]) / math.sqrt(1.0 + 1e-5), atol=1e-15)
    bias = Tensor([0.5, -2.0, 3.0])
    collapsed = T.layer_norm(Tensor([[1.0, 5.0, -3.0]]), Tensor(np.zeros(3)), bias).data
    assert np.array_equal(collapsed, bias.data[None])
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_layer_norm_moments():
    rng = np.random.default_rng(2)
    x = rng.normal(scale=30.0, size=(20, 16))
    eps = 1e-5
    y = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps).data
    var = x.var(axis=-1)
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-9)
    # unit variance up to the eps regulariser: var / (var + eps)
    assert np.all(np.abs(y.var(axis=-1) - var / (var + eps)) < 1e-9)
    assert np.all(np.abs(y.var(axis=-1) - 1.0) < 1e-7)


# ---------------------------------------------------------------- backward


def test_backward_examples():
    x = leaf([1.0, 2.0, 3.0])
    grads = T.backward(T.sum(x))
    assert np.array_equal(x.grad, [1, 1, 1]) and np.array_equal(grads[x], x.grad)
    y = leaf([1.0, 2.0])
    T.backward(T.sum(T.mul(y, y)))
    assert np.array_equal(y.grad, [2.0, 4.0])


def test_backward_accumulates_until_zeroed():
    x = leaf([1.0, 2.0])
    T.backward(T.sum(T.mul(x, x)))
    T.backward(T.sum(T.mul(x, x)))
    assert np.array_equal(x.grad, [4.0, 8.0])
    T.zero_grad([x])
    assert x.grad is None
    T.backward(T.sum(x))
    assert np.array_equal(x.grad, [1.0, 1.0])


def test_backward_rejects_non_scalar_and_constant_loss():
    with pytest.raises(ContractError):
        T.backward(T.mul(leaf([1.0, 2.0]), leaf([1.0, 2.0])))
    with pytest.raises(ContractError):
        T.backward(T.sum(Tensor([1.0, 2.0])))


def test_diamond_graph_sums_path_products():
    # x -> a = x*x, b = 3x, c = a*b = 3x^3 ; plus a shared leaf used twice
    x0 = np.array([0.5, -1.5, 2.0])
    x = leaf(x0)
    a = T.mul(x, x)
    b = T.scale(x, 3.0)
    c = T.mul(a, b)
    loss = T.add(T.sum(c), T.sum(a))  # a reached along two paths
    T.backward(loss)
    # dc/dx via a: b*2x = 6x^2 ; via b: a*3 = 3x^2 ; sum(a) adds 2x
    assert np.allclose(x.grad, 6 * x0**2 + 3 * x0**2 + 2 * x0, rtol=0, atol=1e-14)


def test_leaf_gradient_shapes_match():
    rng = np.random.default_rng(3)
    w, b, x = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3)), leaf(rng.normal(size=(2, 5, 4)))
    T.backward(T.mean(T.gelu(T.linear(x, w, b))))
    for t in (w, b, x):
        assert t.grad.shape == t.shape


# ------------------------------------------------------- finite differences


def test_finite_diff_examples():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 2)))
    assert np.allclose(T.finite_diff_grad(T.sum, x), 1.0, atol=1e-9)
    s = Tensor([3.0])
    g = T.finite_diff_grad(lambda t: T.mul(t, t), s, h=1e-5)
    assert abs(g[0] - 6.0) < 1e-6
    assert np.array_equal(s.data, [3.0])  # restored


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractError):
        T.finite_diff_grad(T.sum, Tensor([1.0]), h=0.0)


def test_max_relative_error():
    assert T.max_relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert T.max_relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
    assert T.max_relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-4)
    with pytest.raises(DimensionError):
        T.max_relative_error(np.zeros(2), np.zeros(3))


RNG = np.random.default_rng(5)
W3 = RNG.normal(size=(3, 4))


def _weighted(t, w):
    return T.sum(T.mul(t, Tensor(w)))


OPS = {
    "matmul": (lambda x: _weighted(T.matmul(x, Tensor(W3[:, :2])), np.arange(1.0, 7.0).reshape(3, 2)), (3, 3)),
    "linear": (lambda x: _weighted(T.linear(x, Tensor(W3), Tensor([0.1, 0.2, 0.3, 0.4])), W3[:2].repeat(1, 0)), (2, 3)),
    "add": (lambda x: _weighted(T.add(x, T.mul(x, x)), W3), (3, 4)),
    "sub": (lambda x: _weighted(T.sub(T.mul(x, x), x), W3), (3, 4)),
    "mul": (lambda x: _weighted(T.mul(x, T.gelu(x)), W3), (3, 4)),
    "scale": (lambda x: _weighted(T.scale(T.mul(x, x), -2.5), W3), (3, 4)),
    "gelu": (lambda x: _weighted(T.gelu(x), W3), (3, 4)),
    "softmax": (lambda x: _weighted(T.softmax(x), W3), (3, 4)),
    "layer_norm": (lambda x: _weighted(T.layer_norm(x, Tensor([1.0, 0.5, 2.0, -1.0]), Tensor([0.1, 0.0, -0.2, 0.3])), W3), (3, 4)),
    "reshape": (lambda x: _weighted(T.reshape(T.mul(x, x), (4, 3)), W3.reshape(4, 3)), (3, 4)),
    "transpose": (lambda x: _weighted(T.transpose(T.mul(x, x), (1, 0)), W3.T), (3, 4)),
    "index": (lambda x: _weighted(T.mul(x, x)[1:, ::2], W3[1:, ::2]), (3, 4)),
    "concat": (lambda x: _weighted(T.concat([x, T.mul(x, x)], axis=0), np.vstack([W3, W3])), (3, 4)),
    "expand": (lambda x: _weighted(T.expand(T.reshape(T.mul(x, x), (1, 3, 4)), (2, 3, 4)), np.stack([W3, -W3 * 0.5])), (3, 4)),
    "mean": (lambda x: T.mean(T.mul(x, x)), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    f, shape = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        x = leaf(rng.normal(size=shape))
        T.backward(f(x))
        numeric = T.finite_diff_grad(f, x, h=1e-5)
        worst = max(worst, T.max_relative_error(x.grad, numeric))
    assert worst < 1e-4, f"{name}: {worst:.3e}"
