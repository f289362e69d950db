import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from autolora.tensor import (DimensionError, Tensor, TapeError, add, backward, batchnorm_train,
                             log_softmax, matmul, mean, recording, relu, scale, sum_)


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m).data, m)
    out = matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0], [7.0]]))
    assert np.array_equal(out.data, [[5.0], [0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_gradient_matches_finite_differences(rng):
    a0, b0 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    a = Tensor(a0, requires_grad=True)
    grad = backward(sum_(matmul(a, b0)))[a]
    ref = fd_grad(lambda v: (v @ b0).sum(), a0)
    assert np.max(np.abs(grad - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-6


def test_relu_forward_and_tie_at_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    out = relu(x)
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])
    assert np.array_equal(backward(sum_(out))[x], [0.0, 0.0, 1.0])


def test_scale_by_zero_and_mean_adjoint():
    assert np.array_equal(scale(Tensor([1.0, 2.0]), 0).data, [0.0, 0.0])
    x = Tensor(np.arange(5.0), requires_grad=True)
    assert np.allclose(backward(mean(x))[x], np.full(5, 0.2), rtol=0, atol=0)


def test_add_broadcast_and_mismatch():
    b = Tensor(np.zeros(3), requires_grad=True)
    out = add(np.ones((4, 3)), b)
    assert np.array_equal(backward(sum_(out))[b], np.full(3, 4.0))
    with pytest.raises(DimensionError):
        add(np.ones((4, 3)), np.ones(4))


@pytest.mark.parametrize("row, expected", [
    ([0.0, 0.0], [-np.log(2)] * 2),
    ([5.0, 5.0, 5.0], [-np.log(3)] * 3),
    ([-300.0, -300.0, -300.0], [-np.log(3)] * 3),
])
def test_log_softmax_uniform_rows(row, expected):
    assert np.allclose(log_softmax(np.array([row])).data[0], expected, atol=1e-15)


def test_log_softmax_no_overflow():
    out = log_softmax(np.array([[1000.0, 0.0]])).data[0]
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0, abs=1e-300)
    assert out[1] == pytest.approx(-1000.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)),
              elements=st.floats(-50, 50)))
def test_log_softmax_rows_normalise(z):
    assert np.allclose(np.exp(log_softmax(z).data).sum(axis=1), 1.0, atol=1e-12)


def test_backward_sum_and_annihilator():
    p = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    assert np.array_equal(backward(sum_(p))[p], [1.0, 1.0, 1.0])
    g = backward(scale(sum_(relu(p)), 0.0))[p]
    assert np.array_equal(g, np.zeros(3))


def test_backward_rejects_non_scalar():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(TapeError):
        backward(relu(p))


def test_unreachable_leaf_gets_exact_zero():
    p = Tensor([1.0, 2.0], requires_grad=True)
    q = Tensor([3.0, 4.0], requires_grad=True)
    with recording():
        root = sum_(relu(p))
        _ = sum_(q)
    assert np.array_equal(backward(root)[q], np.zeros(2))


def test_tape_is_append_only_and_topological():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    with recording() as tape:
        out = mean(relu(matmul(p, p)))
    assert len(tape) == 4
    for nid, node in enumerate(tape.nodes):
        for inp in node.inputs:
            assert inp.node_id is None or inp.node_id < nid
    assert out.node_id == len(tape) - 1


def test_mixing_tapes_is_an_error():
    p = Tensor([1.0], requires_grad=True)
    with recording():
        a = relu(p)
    with recording():
        b = relu(p)
    with pytest.raises(TapeError):
        add(a, b)


def test_batchnorm_train_gradient(rng):
    x0 = rng.normal(size=(5, 3))
    g0, b0 = rng.normal(size=3), rng.normal(size=3)
    w = rng.normal(size=(5, 3))

    def f(x, g=g0, b=b0):
        mu, var = x.mean(axis=0), x.var(axis=0)
        return float((((x - mu) / np.sqrt(var + 1e-5) * g + b) * w).sum())

    x, g, b = (Tensor(a, requires_grad=True) for a in (x0, g0, b0))
    out, _, _ = batchnorm_train(x, g, b, 1e-5)
    grads = backward(sum_(out * w))
    assert np.allclose(grads[x], fd_grad(f, x0), rtol=1e-6, atol=1e-8)
    assert np.allclose(grads[g], fd_grad(lambda v: f(x0, g=v), g0), rtol=1e-6, atol=1e-8)
    assert np.allclose(grads[b], fd_grad(lambda v: f(x0, b=v), b0), rtol=1e-6, atol=1e-8)


def test_backward_is_deterministic(rng):
    w0 = rng.normal(size=(6, 4))
    x = rng.normal(size=(10, 6))

    def grad():
        w = Tensor(w0, requires_grad=True)
        return backward(mean(relu(matmul(x, w))))[w]

    assert np.array_equal(grad(), grad())


def test_relu_propagates_nan():
    assert np.isnan(relu(np.array([np.nan, 1.0])).data[0])
