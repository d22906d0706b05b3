import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, gradcheck, relative_error
from sdreamer import tensor as T
from sdreamer.tensor import Tape, Tensor, backward

TOL = 1e-4


def test_matmul_identity_and_scalar():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[2.0], [3.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [3.0]])
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_sum_gradient_is_ones_times_b_transpose(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = rng.standard_normal((4, 2))
    with Tape() as tape:
        loss = T.matmul(a, Tensor(b)).sum()
    backward(loss, tape)
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.T, rtol=1e-12)

    numeric = central_difference(lambda x: float((x @ b).sum()), [a.data.copy()], step=1e-6)[0]
    assert relative_error(a.grad, numeric) < TOL


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="inner"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_gradcheck(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((1, 4, 2))
    assert gradcheck(T.matmul, a, b) < TOL
    assert gradcheck(T.matmul, a, rng.standard_normal((4, 5))) < TOL


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-15)
    np.testing.assert_array_equal(T.softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0])
    x = np.array([0.3, -1.2, 2.5])
    np.testing.assert_allclose(T.softmax(Tensor(x + 17.0)).data, T.softmax(Tensor(x)).data, rtol=1e-13)


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        T.softmax(Tensor([np.inf, 0.0]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)), st.integers(0, 1))
def test_softmax_sums_to_one(x, axis):
    out = T.softmax(Tensor(x), axis=axis).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)


def test_softmax_and_log_softmax_gradcheck(rng):
    x = rng.standard_normal((3, 5))
    assert gradcheck(lambda t: T.softmax(t, axis=-1), x) < TOL
    assert gradcheck(lambda t: T.softmax(t, axis=0), x) < TOL
    assert gradcheck(lambda t: T.log_softmax(t, axis=-1), x) < TOL


def test_layer_norm_examples():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), g, b).data, [[0.0, 0.0, 0.0]])
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-15)


def test_layer_norm_standardises_tokens(rng):
    # non-degenerate: token variance well above eps / 1e-6
    x = rng.standard_normal((6, 8)) * 10 + 2
    out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-10
    assert np.abs(out.var(axis=-1) - 1).max() <= 1e-6


def test_layer_norm_gradcheck(rng):
    x = rng.standard_normal((4, 8))
    gain = rng.standard_normal(8)
    bias = rng.standard_normal(8)
    assert gradcheck(T.layer_norm, x, gain, bias) < TOL


def test_layer_norm_shape_mismatch():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_concat_split_roundtrip(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((1, 3))
    cat = T.concat([Tensor(a), Tensor(b)], axis=0)
    assert cat.shape == (3, 3)
    back = T.split(cat, [2, 1], axis=0)
    np.testing.assert_array_equal(back[0].data, a)
    np.testing.assert_array_equal(back[1].data, b)


def test_concat_gradient_routes_ones(rng):
    parts = [Tensor(rng.standard_normal((2, 3)), requires_grad=True),
             Tensor(rng.standard_normal((2, 1)), requires_grad=True)]
    with Tape() as tape:
        loss = T.concat(parts, axis=1).sum()
    backward(loss, tape)
    for p in parts:
        np.testing.assert_array_equal(p.grad, np.ones(p.shape))


def test_concat_and_split_errors():
    with pytest.raises(ValueError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)
    with pytest.raises(ValueError):
        T.split(Tensor(np.ones((4, 2))), [1, 2], axis=0)


def test_split_gradcheck(rng):
    x = rng.standard_normal((5, 3))

    def f(t):
        a, b = T.split(t, [2, 3], axis=0)
        return T.concat([b * 2.0, a * a], axis=0)

    assert gradcheck(f, x) < TOL


def test_gelu_values():
    assert T.gelu(Tensor(0.0)).data == 0.0
    assert abs(T.gelu(Tensor(5.0)).data - 5.0) < 1e-3
    assert abs(T.gelu(Tensor(-5.0)).data) < 1e-3


def test_gelu_relu_gradcheck(rng):
    x = rng.standard_normal(12) * 2
    assert gradcheck(T.gelu, x) < TOL
    x = x[np.abs(x) > 1e-3]  # relu kink
    assert gradcheck(T.relu, x) < TOL


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: a + b,
        lambda a, b: a - b,
        lambda a, b: a * b,
        lambda a, b: a / (b * b + 1.0),
    ],
)
def test_broadcast_elementwise_gradcheck(fn, rng):
    assert gradcheck(fn, rng.standard_normal((3, 4)), rng.standard_normal((1, 4))) < TOL
    assert gradcheck(fn, rng.standard_normal((2, 3, 4)), rng.standard_normal(4)) < TOL


def test_unary_and_shape_ops_gradcheck(rng):
    x = rng.standard_normal((2, 3, 4))
    assert gradcheck(T.exp, x) < TOL
    assert gradcheck(T.tanh, x) < TOL
    assert gradcheck(lambda t: T.log(t * t + 1.0), x) < TOL
    assert gradcheck(lambda t: T.sum_(t, axis=1), x) < TOL
    assert gradcheck(lambda t: T.mean(t, axis=(0, 2), keepdims=True), x) < TOL
    assert gradcheck(lambda t: T.reshape(t, (6, 4)), x) < TOL
    assert gradcheck(lambda t: T.transpose(t, (2, 0, 1)), x) < TOL
    assert gradcheck(lambda t: T.swapaxes(t, -1, -2), x) < TOL
    assert gradcheck(lambda t: t[:, 1, :], x) < TOL
    assert gradcheck(lambda t: t[np.array([0, 0, 1])], x) < TOL


def test_linear_gradcheck(rng):
    assert gradcheck(T.linear, rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)),
                     rng.standard_normal(5)) < TOL


def test_backward_sum_and_fan_out(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones(5))

    x = Tensor(rng.standard_normal(5), requires_grad=True)
    with Tape() as tape:
        y = x * 1.0
        loss = (y + y).sum()
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(5))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        backward(y, tape)


def test_disconnected_leaf_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        _ = w * 3.0
        loss = x.sum()
    backward(loss, tape)
    np.testing.assert_array_equal(w.grad, np.zeros(3))


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_backward_is_deterministic(rng):
    x0 = rng.standard_normal((4, 8))
    w0 = rng.standard_normal((8, 8))
    grads = []
    for _ in range(2):
        x = Tensor(x0.copy(), requires_grad=True)
        w = Tensor(w0.copy(), requires_grad=True)
        with Tape() as tape:
            loss = T.gelu(T.softmax(x @ w, axis=-1) @ w).sum()
        backward(loss, tape)
        grads.append((x.grad.tobytes(), w.grad.tobytes()))
    assert grads[0] == grads[1]
