import numpy as np
import pytest

from findkit import tensor as T
from findkit.tensor import Tape, Tensor, grad_check


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


UNARY = {
    "neg": lambda x: T.tsum(T.neg(x) * x),
    "exp": lambda x: T.tsum(T.exp(x)),
    "sigmoid": lambda x: T.tsum(T.sigmoid(x) * x),
    "softplus": lambda x: T.tsum(T.softplus(x * 3.0)),
    "gelu": lambda x: T.tsum(T.gelu(x) * x),
    "transpose": lambda x: T.tsum(T.transpose(x) @ x),
    "sum_axis0": lambda x: T.tsum(T.tsum(x, axis=0) * T.tsum(x, axis=0)),
    "sum_axis1": lambda x: T.tsum(T.exp(T.tsum(x, axis=1) * 0.3)),
    "mean": lambda x: T.mean(x * x),
    "mean_rows": lambda x: T.tsum(T.mean_rows(x) * T.mean_rows(x)),
    "getitem_rows": lambda x: T.tsum(x[np.array([0, 2, 2])] * x[np.array([1, 1, 0])]),
    "getitem_slice": lambda x: T.tsum(x[1:3] * x[0:2]),
    "concat0": lambda x: T.tsum(T.exp(T.concat([x, x * 2.0], axis=0) * 0.1)),
    "concat1": lambda x: T.tsum(T.exp(T.concat([x, x[:, :2]], axis=1) * 0.1)),
    "log_softmax": lambda x: T.tsum(T.log_softmax(x) * x),
    "normalize_rows": lambda x: T.tsum(T.normalize_rows(x) * x),
    "div": lambda x: T.tsum(x / (T.exp(x) + 1.0)),
    "log": lambda x: T.tsum(T.log(T.exp(x) + 1.0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grad(name, rng):
    x = rand(rng, 3, 4)
    assert grad_check(UNARY[name], x) < 1e-6


def test_broadcast_binary_grads(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4)
    assert grad_check(lambda t: T.tsum((t + b) * (t - b) / (b * b + 1.0)), a) < 1e-6
    assert grad_check(lambda t: T.tsum((a + t) * (a - t) / (t * t + 1.0)), b) < 1e-6


def test_matmul_grad(rng):
    a, b = rand(rng, 3, 5), rand(rng, 5, 2)
    assert grad_check(lambda t: T.tsum(T.exp((t @ b) * 0.2)), a) < 1e-6
    assert grad_check(lambda t: T.tsum(T.exp((a @ t) * 0.2)), b) < 1e-6


def test_masked_softmax_grad_and_zero_rows(rng):
    x = rand(rng, 4, 5)
    mask = rng.random((4, 5)) < 0.6
    mask[2] = False
    p = T.masked_softmax(x, mask).data
    assert np.all(p[~mask] == 0.0)
    assert np.all(p[2] == 0.0)
    live = mask.any(axis=1)
    assert np.allclose(p[live].sum(axis=1), 1.0)
    w = rng.standard_normal((4, 5))
    assert grad_check(lambda t: T.tsum(T.masked_softmax(t, mask) * Tensor(w)), x) < 1e-6


def test_layer_norm_grad(rng):
    x, g, b = rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)
    w = Tensor(rng.standard_normal((3, 6)))
    assert grad_check(lambda t: T.tsum(T.layer_norm(t, g, b) * w), x) < 1e-6
    assert grad_check(lambda t: T.tsum(T.layer_norm(x, t, b) * w), g) < 1e-6
    assert grad_check(lambda t: T.tsum(T.layer_norm(x, g, t) * w), b) < 1e-6


def test_mlp_grad(rng):
    x = rand(rng, 3, 4)
    ws = (rand(rng, 4, 5), rand(rng, 5), rand(rng, 5, 4), rand(rng, 4))
    assert grad_check(lambda t: T.tsum(T.mlp_forward(t, ws) * t), x) < 1e-6


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_multi_head_attention_grad(heads, rng):
    q, k, v = rand(rng, 3, 8), rand(rng, 5, 8), rand(rng, 5, 8)
    mask = rng.random((3, 5)) < 0.7
    mask[0] = False
    w = Tensor(rng.standard_normal((3, 8)))
    for target in range(3):
        def f(t, target=target):
            args = [q, k, v]
            args[target] = t
            return T.tsum(T.multi_head_attention(*args, mask, heads) * w)
        assert grad_check(f, [q, k, v][target]) < 1e-6


def test_attention_single_support_is_value_row(rng):
    q, k, v = rand(rng, 1, 4), rand(rng, 3, 4), rand(rng, 3, 4)
    mask = np.array([[False, True, False]])
    out = T.multi_head_attention(q, k, v, mask, 2).data
    assert np.allclose(out, v.data[1:2])


def test_backward_rejects_non_scalar(rng):
    x = rand(rng, 2, 2)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(T.TapeError):
        tape.backward(y)


def test_backward_without_tape(rng):
    x = rand(rng, 2, 2)
    y = T.tsum(x)
    with pytest.raises(T.TapeError):
        T.backward(y)


def test_shape_error_names_both_shapes(rng):
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(rand(rng, 2, 3), rand(rng, 4, 5))


def test_repeated_backward_is_bitwise_stable(rng):
    x = rand(rng, 4, 4)

    def run():
        with Tape() as tape:
            y = T.tsum(T.gelu(x @ x) * T.sigmoid(x))
        return tape.backward(y)[x]

    assert np.array_equal(run(), run())


def test_normalize_zero_row_errors():
    with pytest.raises(ZeroDivisionError):
        T.normalize_rows(Tensor(np.zeros((2, 3))))


def test_grad_accumulates_over_reuse(rng):
    x = rand(rng, 3)
    with Tape() as tape:
        y = T.tsum(x * x + x)
    g = tape.backward(y)[x]
    assert np.allclose(g, 2 * x.data + 1)
