import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddolab import grad as G

finite = st.floats(-3.0, 3.0, allow_nan=False, width=64)


def test_log_sigmoid_at_zero():
    assert float(G.log_sigmoid(0.0).data) == pytest.approx(-math.log(2), abs=1e-15)


@given(finite)
def test_sigmoid_symmetry(x):
    assert float(G.sigmoid(x).data + G.sigmoid(-x).data) == pytest.approx(1.0, abs=1e-15)


def test_grad_of_sum_sigmoid_at_zero():
    with G.Tape() as tape:
        x = tape.watch(np.zeros(2))
        (g,) = tape.gradient(G.sum(G.sigmoid(x)), [x])
    np.testing.assert_allclose(g, [0.25, 0.25], atol=1e-15)


def test_log_sigmoid_is_stable_far_out():
    x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    out = G.log_sigmoid(x).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(-1e4)
    assert out[-1] == 0.0
    with G.Tape() as tape:
        t = tape.watch(x)
        (g,) = tape.gradient(G.sum(G.log_sigmoid(t)), [t])
    np.testing.assert_allclose(g, [1.0, 1.0, 0.5, math.exp(-50) / (1 + math.exp(-50)), 0.0], atol=1e-15)


def test_log_softmax_is_shift_stable():
    x = np.array([[1000.0, 1001.0, 1002.0]])
    out = G.log_softmax(x).data
    np.testing.assert_allclose(out, G.log_softmax(x - 1000.0).data, atol=1e-12)
    np.testing.assert_allclose(np.exp(out).sum(), 1.0, atol=1e-14)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(G.ShapeError) as err:
        G.add(np.zeros((2, 3)), np.zeros((4, 3)))
    assert "(2, 3)" in str(err.value) and "(4, 3)" in str(err.value)
    with pytest.raises(G.ShapeError):
        G.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_nonfinite_forward_is_an_error_naming_the_op():
    with pytest.raises(G.NonFiniteError, match="log"):
        G.log(np.array([0.0, 1.0]))
    with pytest.raises(G.NonFiniteError, match="exp"):
        G.exp(np.array([1e4]))


def test_rank_above_two_rejected():
    with pytest.raises(G.ShapeError):
        G.Tensor(np.zeros((2, 2, 2)))


def test_ndarray_on_the_left_defers_to_tensor():
    with G.Tape() as tape:
        w = tape.watch(np.ones(3))
        y = np.arange(3.0) * w + np.ones(3)
        assert isinstance(y, G.Tensor)
        (g,) = tape.gradient(G.sum(y), [w])
    np.testing.assert_allclose(g, [0.0, 1.0, 2.0])


def test_untracked_evaluation_records_nothing():
    with G.Tape() as tape:
        y = G.sum(G.square(np.ones(3)))
    assert tape.nodes == []
    assert float(y.data) == 3.0


def test_shared_subexpression_accumulates():
    with G.Tape() as tape:
        x = tape.watch(np.array(2.0))
        y = x * x
        (g,) = tape.gradient(y + y, [x])
    assert float(g) == 8.0


def test_backward_visits_each_node_once():
    calls = []
    with G.Tape() as tape:
        x = tape.watch(np.array([1.0, 2.0]))
        y = G.tanh(x)
        z = G.sum(y * y + y)
        for node in tape.nodes:
            if node.vjp is not None:
                fn = node.vjp
                node.vjp = (lambda f, op: lambda g: (calls.append(op), f(g))[1])(fn, node.op)
        tape.gradient(z, [x])
    assert len(calls) == len([n for n in tape.nodes if n.vjp is not None])
    assert len(calls) == len(set(map(id, tape.nodes))) - 1  # every non-leaf once
    for i, node in enumerate(tape.nodes):
        assert all(p < i for p in node.parents)


def test_gradient_of_unrelated_source_is_zero():
    with G.Tape() as tape:
        a = tape.watch(np.ones(2))
        b = tape.watch(np.ones(2))
        ga, gb = tape.gradient(G.sum(a), [a, b])
    np.testing.assert_array_equal(gb, 0.0)
    np.testing.assert_array_equal(ga, 1.0)


def test_gradient_requires_scalar_target():
    with G.Tape() as tape:
        a = tape.watch(np.ones(2))
        with pytest.raises(G.ShapeError):
            tape.gradient(a * 2.0, [a])


# -- every primitive against central differences -------------------------------------------

UNARY = {
    "exp": G.exp, "square": G.square, "tanh": G.tanh, "sigmoid": G.sigmoid,
    "log_sigmoid": G.log_sigmoid, "softplus": G.softplus, "silu": G.silu, "neg": G.neg,
    "log_softmax": G.log_softmax, "log": lambda x: G.log(G.add(G.square(x), 0.5)),
    "sum_axis0": lambda x: G.sum(x, axis=0), "mean_axis1_keep": lambda x: G.mean(x, axis=1, keepdims=True),
    "reshape": lambda x: G.reshape(x, (-1,)),
}


SEEDS = range(10)


def _uniform(seed, *shape):
    return np.random.default_rng(seed).uniform(-3.0, 3.0, size=shape)


def _readout(y, seed=0):
    """Random positive projection to a scalar; avoids saturating nonlinearities."""
    w = np.random.default_rng(seed + 1000).uniform(0.5, 1.5, size=y.shape)
    return G.sum(G.mul(y, w))


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_ops_match_finite_differences(name, seed):
    op = UNARY[name]
    x = _uniform(seed, 3, 4)
    w = np.random.default_rng(seed + 100).uniform(0.5, 1.5, size=12)

    def loss(t):
        y = op(t)
        return G.sum(G.mul(y, w[: y.data.size].reshape(y.shape)))

    assert G.finite_difference_check(loss, [x], step=1e-5, eps_abs=1e-8) < 1e-6


BINARY = {
    "add": G.add, "sub": G.sub, "mul": G.mul,
    "div": lambda a, b: G.div(a, G.add(G.square(b), 1.0)),
    "add_broadcast_row": lambda a, b: G.add(a, G.sum(b, axis=0)),
    "squared_error": G.squared_error,
    "concat": lambda a, b: G.concat([a, b], axis=1),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_ops_match_finite_differences(name, seed):
    op = BINARY[name]
    a, b = _uniform(seed, 3, 2), _uniform(seed + 50, 3, 2)
    assert G.finite_difference_check(lambda x, y: _readout(op(x, y), seed), [a, b]) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_affine_and_matmul_match_finite_differences(seed):
    x, W, b = _uniform(seed, 4, 3), _uniform(seed + 1, 3, 2), _uniform(seed + 2, 2)
    assert G.finite_difference_check(lambda x_, W_, b_: _readout(G.affine(x_, W_, b_), seed), [x, W, b]) < 1e-6
    assert G.finite_difference_check(lambda x_, W_: _readout(x_ @ W_, seed), [x, W]) < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16), idx=st.lists(st.integers(0, 2), min_size=4, max_size=4),
       rows=st.lists(st.integers(0, 3), min_size=5, max_size=5))
def test_indexing_ops_match_finite_differences(seed, idx, rows):
    x = _uniform(seed, 4, 3)
    assert G.finite_difference_check(lambda t: G.sum(G.exp(G.pick(G.log_softmax(t), np.array(idx)))), [x]) < 1e-6
    assert G.finite_difference_check(lambda t: _readout(G.take_rows(t, np.array(rows)), seed), [x]) < 1e-6


def test_finite_difference_check_examples():
    p = np.random.default_rng(0).normal(size=5)
    assert G.finite_difference_check(lambda t: G.mul(0.5, G.sum(G.square(t))), [p]) < 1e-8
    assert G.finite_difference_check(lambda t: G.add(G.mul(0.0, G.sum(t)), 3.0), [p]) == 0.0
    with pytest.raises(ValueError):
        G.finite_difference_check(lambda t: G.sum(t), [p], step=0.0)


def test_finite_difference_check_rejects_nonfinite_probe():
    def loss(t):
        v = float(t.data[0])
        return G.sum(t) if abs(v) < 1.0 else G.Tensor(np.inf)

    with pytest.raises(G.NonFiniteError):
        G.finite_difference_check(loss, [np.array([1.0 - 1e-6])], step=1e-5)


def test_same_computation_is_bit_identical():
    def run():
        rng = np.random.default_rng(3)
        x, W = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        with G.Tape() as tape:
            w = tape.watch(W)
            loss = G.mean(G.log_softmax(G.silu(x @ w)))
            (g,) = tape.gradient(loss, [w])
        return loss.data.tobytes(), g.tobytes()

    assert run() == run()
