"""Tensor engine tests: forward oracles and gradient checks."""

import numpy as np
import pytest

from mute_lab import tensor as T
from mute_lab.errors import ContractError, ShapeError
from mute_lab.gradcheck import grad_check
from mute_lab.tensor import Tensor


def rng_for(name):
    return np.random.default_rng(abs(hash(name)) % (2**32))


def test_add_mul_forward_values():
    a = Tensor(np.array([1.0, 2.0]))
    b = Tensor(np.array([3.0, 5.0]))
    assert np.array_equal(T.add(a, b).data, [4.0, 7.0])
    assert np.array_equal(T.mul(a, b).data, [3.0, 10.0])
    assert np.array_equal((-a).data, [-1.0, -2.0])
    assert np.array_equal((a - b).data, [-2.0, -3.0])


def test_operator_sugar_with_scalars():
    a = Tensor(np.array([2.0, 4.0]))
    assert np.array_equal((a + 1).data, [3.0, 5.0])
    assert np.array_equal((3 * a).data, [6.0, 12.0])
    assert np.array_equal((1 + a).data, [3.0, 5.0])


def test_integer_input_promoted_to_float64():
    t = Tensor(np.array([1, 2, 3]))
    assert t.data.dtype == np.float64


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n, k, m = rng.integers(1, 6, size=3)
        a = rng.normal(size=(n, k))
        b = rng.normal(size=(k, m))
        got = T.matmul(Tensor(a), Tensor(b)).data
        want = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                for l in range(k):
                    want[i, j] += a[i, l] * b[l, j]
        assert np.allclose(got, want, atol=1e-12)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_batched_matmul_matches_per_slice():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(3, 4, 5))
    b = rng.normal(size=(5, 2))
    got = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(3):
        assert np.allclose(got[i], a[i] @ b, atol=1e-12)


def test_softmax_rows_sum_to_one_and_match_oracle():
    rng = np.random.default_rng(13)
    for _ in range(10):
        x = rng.normal(size=(4, 7)) * 5
        y = T.softmax(Tensor(x)).data
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        for i in range(4):
            e = np.exp(x[i] - x[i].max())
            assert np.allclose(y[i], e / e.sum(), atol=1e-12)


def test_softmax_shift_invariance():
    x = np.array([[1.0, 2.0, 3.0]])
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + 1000.0)).data
    assert np.allclose(a, b, atol=1e-12)


def test_masked_softmax_masked_weights_exactly_zero():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(3, 6))
    mask = np.zeros((3, 6), dtype=bool)
    mask[0, 2] = mask[1, 0] = mask[1, 5] = True
    y = T.masked_softmax(Tensor(x), mask).data
    assert (y[mask] == 0.0).all()
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_masked_softmax_fully_masked_row_raises():
    mask = np.ones((1, 4), dtype=bool)
    with pytest.raises(ContractError):
        T.masked_softmax(Tensor(np.zeros((1, 4))), mask)


def test_log_softmax_agrees_with_log_of_softmax():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(5, 9))
    a = T.log_softmax(Tensor(x)).data
    b = np.log(T.softmax(Tensor(x)).data)
    assert np.allclose(a, b, atol=1e-12)


def test_layer_norm_constant_row_is_bias():
    x = Tensor(np.full((2, 8), 3.7))
    gain = Tensor(np.ones(8))
    bias = Tensor(np.zeros(8))
    y = T.layer_norm(x, gain, bias).data
    assert np.allclose(y, 0.0, atol=1e-6)


def test_layer_norm_already_normalized_row_in_eps_limit():
    # 1 + 1e-300 rounds to 1.0, so the normalization is exactly identity
    x = Tensor(np.array([[1.0, -1.0, 1.0, -1.0]]))
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))
    y = T.layer_norm(x, gain, bias, eps=1e-300).data
    assert np.array_equal(y, x.data)


def test_layer_norm_rejects_nonpositive_eps():
    x = Tensor(np.ones((1, 4)))
    one = Tensor(np.ones(4))
    with pytest.raises(ContractError):
        T.layer_norm(x, one, one, eps=0.0)


def test_layer_norm_matches_row_oracle():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(4, 6)) * 3
    gain = rng.normal(size=6)
    bias = rng.normal(size=6)
    y = T.layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).data
    for i in range(4):
        mu = x[i].mean()
        var = ((x[i] - mu) ** 2).mean()
        want = (x[i] - mu) / np.sqrt(var + 1e-6) * gain + bias
        assert np.allclose(y[i], want, atol=1e-12)


def test_embed_forward_and_scatter_grad():
    table = T.parameter(np.arange(12.0).reshape(4, 3))
    ids = np.array([[0, 2, 0]])
    out = T.embed(table, ids)
    assert np.array_equal(out.data[0, 1], [6.0, 7.0, 8.0])
    T.backward(T.sum_(out))
    # id 0 appears twice, so its row accumulates two ones
    assert np.array_equal(table.grad[0], [2.0, 2.0, 2.0])
    assert np.array_equal(table.grad[2], [1.0, 1.0, 1.0])
    assert np.array_equal(table.grad[1], [0.0, 0.0, 0.0])


def test_gather_rows_forward_and_duplicate_grad():
    x = T.parameter(np.arange(8.0).reshape(1, 4, 2))
    index = np.array([[3, 3, 0, 1]])
    out = T.gather_rows(x, index)
    assert np.array_equal(out.data[0, 0], [6.0, 7.0])
    T.backward(T.sum_(out))
    assert np.array_equal(x.grad[0, 3], [2.0, 2.0])
    assert np.array_equal(x.grad[0, 2], [0.0, 0.0])


def test_stack0_and_index0_round_trip():
    a = Tensor(np.array([1.0, 2.0]))
    b = Tensor(np.array([3.0, 4.0]))
    s = T.stack0([a, b])
    assert s.data.shape == (2, 2)
    assert np.array_equal(T.index0(s, 1).data, [3.0, 4.0])


def test_backward_requires_scalar():
    x = T.parameter(np.ones(3))
    with pytest.raises(ContractError):
        T.backward(T.mul(x, x))


def test_gradient_accumulates_over_multiple_uses():
    x = T.parameter(np.array(2.0))
    y = T.add(T.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1
    T.backward(y)
    assert np.allclose(x.grad, 5.0, atol=1e-12)


def test_grad_of_non_ancestor_stays_none():
    x = T.parameter(np.ones(2))
    z = T.parameter(np.ones(2))
    T.backward(T.sum_(T.mul(x, x)))
    assert z.grad is None
    assert x.grad is not None


def test_no_grad_blocks_graph_recording():
    x = T.parameter(np.ones(2))
    with T.no_grad():
        y = T.sum_(T.mul(x, x))
    assert y._parents == ()
    assert not y.requires_grad


def test_broadcast_grad_reduces_to_parameter_shape():
    bias = T.parameter(np.array([1.0, 2.0, 3.0]))
    x = Tensor(np.ones((4, 3)))
    T.backward(T.sum_(T.add(x, bias)))
    assert bias.grad.shape == (3,)
    assert np.array_equal(bias.grad, [4.0, 4.0, 4.0])


# -- gradient checks against central differences ----------------------------

OP_CASES = [
    ("sum_all", lambda x: T.sum_(x), (3, 4)),
    ("sum_axis", lambda x: T.sum_(T.mul(T.sum_(x, axis=0), T.sum_(x, axis=0))), (3, 4)),
    ("relu", lambda x: T.sum_(T.mul(T.relu(x), Tensor(np.arange(12.0).reshape(3, 4)))), (3, 4)),
    ("abs", lambda x: T.sum_(T.abs_(x)), (3, 4)),
    ("sqrt", lambda x: T.sum_(T.sqrt_(T.add(T.mul(x, x), Tensor(np.ones((3, 4)))))), (3, 4)),
    ("reshape_transpose", lambda x: T.sum_(T.mul(T.transpose(T.reshape(x, (4, 3)), (1, 0)), Tensor(np.ones((3, 4))))), (3, 4)),
    ("softmax", lambda x: T.sum_(T.mul(T.softmax(x), Tensor(np.arange(12.0).reshape(3, 4)))), (3, 4)),
    ("log_softmax", lambda x: T.sum_(T.mul(T.log_softmax(x), Tensor(np.arange(12.0).reshape(3, 4)))), (3, 4)),
    ("scale", lambda x: T.sum_(T.scale(x, -2.5)), (3, 4)),
    ("matmul_left", lambda x: T.sum_(T.matmul(x, Tensor(rng_for("mm").normal(size=(4, 2))))), (3, 4)),
    ("matmul_right", lambda x: T.sum_(T.matmul(Tensor(rng_for("mm2").normal(size=(5, 3))), x)), (3, 4)),
]


@pytest.mark.parametrize("name,fn,shape", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradients_match_finite_differences(name, fn, shape):
    rng = rng_for("grad." + name)
    for trial in range(3):
        x = Tensor(rng.normal(size=shape) + 0.3)
        err = grad_check(fn, x)
        assert err < 1e-6, f"{name} trial {trial}: rel error {err}"


def test_relu_subgradient_zero_at_kink():
    x = T.parameter(np.array([0.0, -1.0, 2.0]))
    T.backward(T.sum_(T.relu(x)))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_abs_subgradient_zero_at_zero():
    x = T.parameter(np.array([0.0, -3.0, 2.0]))
    T.backward(T.sum_(T.abs_(x)))
    assert np.array_equal(x.grad, [0.0, -1.0, 1.0])


def test_layer_norm_gradients_all_inputs():
    rng = rng_for("ln.grad")
    x0 = rng.normal(size=(3, 5))
    gain0 = rng.normal(size=5)
    bias0 = rng.normal(size=5)
    probe = Tensor(rng.normal(size=(3, 5)))

    gain = Tensor(gain0)
    bias = Tensor(bias0)
    err = grad_check(lambda x: T.sum_(T.mul(T.layer_norm(x, gain, bias), probe)),
                     Tensor(x0.copy()))
    assert err < 1e-6

    xc = Tensor(x0)
    err = grad_check(lambda g: T.sum_(T.mul(T.layer_norm(xc, g, bias), probe)),
                     Tensor(gain0.copy()))
    assert err < 1e-6

    err = grad_check(lambda b: T.sum_(T.mul(T.layer_norm(xc, gain, b), probe)),
                     Tensor(bias0.copy()))
    assert err < 1e-6


def test_masked_softmax_gradient():
    rng = rng_for("msm.grad")
    mask = np.zeros((3, 5), dtype=bool)
    mask[0, 1] = mask[2, 3] = True
    probe = Tensor(rng.normal(size=(3, 5)))
    err = grad_check(lambda x: T.sum_(T.mul(T.masked_softmax(x, mask), probe)),
                     Tensor(rng.normal(size=(3, 5))))
    assert err < 1e-6


def test_batched_matmul_gradient():
    rng = rng_for("bmm.grad")
    b = Tensor(rng.normal(size=(5, 2)))
    err = grad_check(lambda x: T.sum_(T.matmul(x, b)),
                     Tensor(rng.normal(size=(3, 4, 5))))
    assert err < 1e-6


def test_detach_cuts_the_graph():
    x = T.parameter(np.array([1.0, 2.0]))
    y = T.mul(x, x).detach()
    z = T.sum_(T.mul(Tensor(np.ones(2)), y))
    assert z._parents == () or all(p is not x for p in z._parents)
    T.backward(T.sum_(T.mul(x, x)))
    assert x.grad is not None
