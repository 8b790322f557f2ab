import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tamilcl import numerics as nx

from conftest import autodiff_grad, max_rel_err, numeric_grad


def test_matmul_identity():
    a = nx.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(nx.tensor(np.eye(2)), a).data, a.data)


def test_matmul_hand_arithmetic():
    out = nx.matmul(nx.tensor([[1.0, 2.0], [3.0, 4.0]]), nx.tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences(rng):
    a = nx.parameter(rng.normal(size=(3, 4)))
    b = nx.parameter(rng.normal(size=(4, 2)))
    loss = lambda: nx.total(nx.matmul(a, b))
    got = autodiff_grad(loss, [a, b])
    want = numeric_grad(lambda: loss().item(), [a, b])
    for g, w in zip(got, want):
        assert max_rel_err(g, w) < 1e-6


def test_softmax_values():
    np.testing.assert_allclose(nx.softmax(nx.tensor([0.0, 0, 0, 0])).data, [0.25] * 4)
    big = nx.softmax(nx.tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 1.0 and big[1] < 1e-300
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(nx.softmax(nx.tensor([1.0, 2.0, 3.0])).data, e / e.sum(), rtol=1e-12)
    np.testing.assert_allclose(
        nx.softmax(nx.tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=5e-6
    )


def test_softmax_rejects_empty():
    with pytest.raises(ValueError):
        nx.softmax(nx.tensor(np.zeros(0)))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_sums_to_one_and_is_shift_invariant(v, c):
    s = nx.softmax(nx.tensor(v)).data
    assert np.all(s > 0) or np.any(v - v.max() < -700)
    assert abs(s.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(nx.softmax(nx.tensor(v + c)).data, s, atol=1e-9)


def test_cross_entropy_examples():
    assert nx.cross_entropy(nx.tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(np.log(4), abs=1e-12)
    assert nx.cross_entropy(nx.tensor([[100.0, 0.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-40)
    e = np.exp([1.0, 2.0, 3.0])
    oracle = -np.log(e[2] / e.sum())
    got = nx.cross_entropy(nx.tensor([[1.0, 2.0, 3.0]]), [2]).item()
    assert got == pytest.approx(oracle, rel=1e-12)
    assert got == pytest.approx(0.40761, abs=5e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        nx.cross_entropy(nx.tensor(np.zeros((1, 3))), [3])


def test_elementwise_primitives():
    r = nx.tensor([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(nx.elementwise(r, nx.tensor(np.ones((1, 3))), "mul").data, r.data)
    assert nx.sigmoid(nx.tensor(0.0)).item() == 0.5
    assert nx.mse(nx.tensor([1.0, 2.0]), nx.tensor([1.0, 2.0])).item() == 0.0
    with pytest.raises(ValueError):
        nx.add(nx.tensor(np.ones((2, 2))), nx.tensor(np.ones(3)))
    with pytest.raises(ValueError):
        nx.elementwise(r, r, "div")


def test_bias_broadcast_over_batch_only():
    out = nx.add(nx.tensor(np.zeros((2, 3))), nx.tensor([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(ValueError):
        nx.add(nx.tensor(np.zeros((2, 3))), nx.tensor([1.0, 2.0]))


def test_backward_sum_gives_ones():
    p = nx.parameter(np.arange(6.0).reshape(2, 3))
    nx.backward(nx.total(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_stopgrad_blocks_gradient_exactly(rng):
    a = nx.parameter(rng.normal(size=(3, 2)))
    b = nx.parameter(rng.normal(size=(3, 2)))
    loss = nx.mse(nx.stopgrad(a), b)
    assert np.array_equal(nx.stopgrad(a).data, a.data)
    nx.backward(loss)
    assert a.grad is None
    assert b.grad is not None and np.any(b.grad != 0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        nx.backward(nx.parameter(np.ones(3)))


def test_two_layer_mlp_gradients(rng):
    w1, b1 = nx.parameter(rng.normal(size=(5, 7))), nx.parameter(rng.normal(size=7))
    w2, b2 = nx.parameter(rng.normal(size=(7, 3))), nx.parameter(rng.normal(size=3))
    x = nx.tensor(rng.normal(size=(4, 5)))
    y = [0, 2, 1, 2]

    def loss():
        h = nx.relu(nx.add(nx.matmul(x, w1), b1))
        return nx.cross_entropy(nx.add(nx.matmul(h, w2), b2), y)

    params = [w1, b1, w2, b2]
    got = autodiff_grad(loss, params)
    want = numeric_grad(lambda: loss().item(), params)
    for g, w in zip(got, want):
        assert max_rel_err(g, w) < 1e-4


@pytest.mark.parametrize("op", ["sigmoid", "tanh", "softmax", "log_softmax", "l1_norm", "take_columns", "sub", "mse"])
def test_primitive_gradients(rng, op):
    a = nx.parameter(rng.normal(size=(3, 4)))
    b = nx.parameter(rng.normal(size=(3, 4)))
    w = nx.tensor(rng.normal(size=(3, 4)))
    fns = {
        "sigmoid": lambda: nx.total(nx.mul(nx.sigmoid(a), w)),
        "tanh": lambda: nx.total(nx.mul(nx.tanh(a), w)),
        "softmax": lambda: nx.total(nx.mul(nx.softmax(a), w)),
        "log_softmax": lambda: nx.total(nx.mul(nx.log_softmax(a), w)),
        "l1_norm": lambda: nx.total(nx.l1_norm(nx.sub(a, b))),
        "take_columns": lambda: nx.total(nx.mul(nx.take_columns(a, 2), nx.take_columns(w, 2))),
        "sub": lambda: nx.total(nx.mul(nx.sub(a, b), w)),
        "mse": lambda: nx.mse(a, b),
    }
    got = autodiff_grad(fns[op], [a, b])
    want = numeric_grad(lambda: fns[op]().item(), [a, b])
    for g, wv in zip(got, want):
        assert max_rel_err(g, wv) < 1e-6


def test_gradient_accumulates_on_reuse(rng):
    a = nx.parameter(rng.normal(size=(2, 2)))
    nx.backward(nx.total(nx.add(a, a)))
    np.testing.assert_array_equal(a.grad, 2 * np.ones((2, 2)))


def test_sgd_step_rule_and_zero_lr(rng):
    p = nx.parameter(rng.normal(size=(3, 3)))
    before = p.data.copy()
    nx.backward(nx.total(nx.mul(p, p)))
    nx.SgdOptimizer([p], 0.0).step()
    assert np.array_equal(p.data, before)
    nx.SgdOptimizer([p], 0.1).step()
    np.testing.assert_allclose(p.data, before - 0.1 * 2 * before, rtol=0, atol=1e-15)


def test_no_tape_without_trainable_operands():
    out = nx.relu(nx.matmul(nx.tensor(np.ones((2, 2))), nx.tensor(np.ones((2, 2)))))
    assert not out.requires_grad and out.is_leaf
