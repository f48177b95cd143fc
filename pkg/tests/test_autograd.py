import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf, log_softmax as sp_log_softmax, softmax as sp_softmax

from fewshot_dpi import autograd as ag
from fewshot_dpi.autograd import DimensionError, Tensor, default_dtype

from oracles import gradcheck

RNG = np.random.default_rng(1234)


def rand(*shape):
    return RNG.normal(size=shape)


# -- gradients of every differentiable op -----------------------------------


OPS = {
    "add_broadcast": (lambda a, b: ag.add(a, b), [rand(3, 4), rand(4)]),
    "sub": (lambda a, b: ag.sub(a, b), [rand(2, 3), rand(2, 1)]),
    "mul": (lambda a, b: ag.mul(a, b), [rand(3, 4), rand(3, 4)]),
    "div": (lambda a, b: ag.div(a, b), [rand(3, 4), rand(1, 4) ** 2 + 1.0]),
    "scale": (lambda a: ag.scale(a, -2.5), [rand(5)]),
    "power": (lambda a: ag.power(a, 3.0), [rand(2, 3)]),
    "exp": (lambda a: ag.exp(a), [rand(2, 3)]),
    "log": (lambda a: ag.log(a), [np.abs(rand(2, 3)) + 0.5]),
    "gelu": (lambda a: ag.gelu(a), [rand(3, 5) * 2]),
    "matmul": (lambda a, b: ag.matmul(a, b), [rand(4, 5), rand(5, 3)]),
    "matmul_batched": (lambda a, b: ag.matmul(a, b), [rand(2, 3, 4, 5), rand(2, 3, 5, 2)]),
    "matmul_broadcast_rhs": (lambda a, b: ag.matmul(a, b), [rand(2, 3, 4), rand(4, 6)]),
    "transpose": (lambda a: ag.transpose(a, (1, 0, 2)), [rand(2, 3, 4)]),
    "reshape": (lambda a: ag.reshape(a, (6, 2)), [rand(3, 4)]),
    "concat": (lambda a, b: ag.concat([a, b], axis=1), [rand(2, 3), rand(2, 2)]),
    "sum_axis": (lambda a: ag.sum_(a, axis=1), [rand(3, 4)]),
    "mean_all": (lambda a: ag.mean(a), [rand(3, 4)]),
    "softmax": (lambda a: ag.softmax(a, axis=-1), [rand(3, 5)]),
    "softmax_masked": (lambda a: ag.softmax(a, axis=-1, mask=np.array([True, True, False, True])), [rand(2, 4)]),
    "logsumexp": (lambda a: ag.logsumexp(a, axis=0), [rand(4, 3)]),
    "log_softmax": (lambda a: ag.log_softmax(a, axis=1), [rand(3, 4)]),
    "cross_entropy": (lambda a: ag.cross_entropy(a, [0, 3, 1]), [rand(3, 4)]),
    "layer_norm": (lambda a, g, b: ag.layer_norm(a, g, b, eps=1e-5), [rand(2, 3, 6), rand(6), rand(6)]),
    "embedding": (lambda t: ag.embedding(t, np.array([[0, 2, 2], [4, 0, 1]])), [rand(5, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, arrays = OPS[name]
    gradcheck(fn, *arrays)


def test_composite_gradient():
    def fn(x, w, b):
        h = ag.gelu(ag.add(ag.matmul(x, w), b))
        return ag.mean(ag.mul(h, h))

    gradcheck(fn, rand(4, 3), rand(3, 5), rand(5))


def test_embedding_gradient_only_touches_selected_rows():
    with default_dtype(np.float64):
        table = Tensor(rand(6, 2), requires_grad=True)
        ag.sum_(ag.embedding(table, np.array([1, 4, 1]))).backward()
    assert table.grad[[0, 2, 3, 5]].tolist() == [[0, 0]] * 4
    assert table.grad[1].tolist() == [2.0, 2.0]
    assert table.grad[4].tolist() == [1.0, 1.0]


# -- forward values ---------------------------------------------------------


def test_matmul_identity_and_add_zero():
    a = rand(3, 3)
    np.testing.assert_array_equal(ag.matmul(Tensor(np.eye(3), dtype=np.float64), Tensor(a, dtype=np.float64)).data, a)
    np.testing.assert_array_equal(ag.add(Tensor(a, dtype=np.float64), 0.0).data, a)


def test_dimension_error_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)
    with pytest.raises(DimensionError):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))
    with pytest.raises(DimensionError):
        ag.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)


def test_concat_and_transpose_values():
    a, b = rand(2, 3), rand(2, 2)
    np.testing.assert_array_equal(ag.concat([Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)], 1).data,
                                  np.concatenate([a, b], 1))
    np.testing.assert_array_equal(Tensor(a, dtype=np.float64).T.data, a.T)


def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25))
    x = Tensor(np.array([0.0, math.log(3.0)]), dtype=np.float64)
    np.testing.assert_allclose(ag.softmax(x).data, [0.25, 0.75], atol=1e-15)
    logits = rand(3, 5)
    base = ag.softmax(Tensor(logits, dtype=np.float64)).data
    shifted = ag.softmax(Tensor(logits + 123.0, dtype=np.float64)).data
    np.testing.assert_allclose(base, shifted, atol=1e-12)
    np.testing.assert_allclose(base, sp_softmax(logits, axis=-1), atol=1e-12)


def test_softmax_rejects_nan_and_full_mask():
    with pytest.raises(ValueError):
        ag.softmax(Tensor(np.array([0.0, np.nan])))
    with pytest.raises(ValueError):
        ag.softmax(Tensor(np.zeros((2, 3))), mask=np.array([[True, False, False], [False, False, False]]))


def test_masked_softmax_exact_zero():
    out = ag.softmax(Tensor(rand(2, 4), dtype=np.float64), mask=np.array([True, False, True, False])).data
    assert (out[:, [1, 3]] == 0.0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_simplex_property(xs):
    out = ag.softmax(Tensor(np.array(xs), dtype=np.float64)).data
    assert np.all(out >= 0) and np.all(out <= 1)
    assert abs(out.sum() - 1.0) < 1e-6


def test_cross_entropy_examples():
    for c in (2, 3, 7):
        loss = ag.cross_entropy(Tensor(np.zeros((4, c)), dtype=np.float64), np.zeros(4, dtype=int)).item()
        assert loss == pytest.approx(math.log(c), abs=1e-12)
    margin = np.array([[1000.0, 0.0, 0.0]])
    assert ag.cross_entropy(Tensor(margin, dtype=np.float64), [0]).item() < 1e-12
    logits, targets = rand(3, 4), np.array([2, 0, 3])
    want = -sp_log_softmax(logits, axis=1)[np.arange(3), targets].mean()
    assert ag.cross_entropy(Tensor(logits, dtype=np.float64), targets).item() == pytest.approx(want, abs=1e-6)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ag.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_embedding_out_of_vocab():
    with pytest.raises(IndexError):
        ag.embedding(Tensor(np.zeros((4, 2))), np.array([4]))


def test_gelu_is_exact_erf_form():
    x = np.linspace(-4, 4, 33)
    want = 0.5 * x * (1 + erf(x / math.sqrt(2)))
    np.testing.assert_allclose(ag.gelu(Tensor(x, dtype=np.float64)).data, want, atol=1e-15)


def test_dropout_inference_is_identity_and_training_rescales():
    x = Tensor(np.ones((200, 50)))
    assert ag.dropout(x, 0.1, np.random.default_rng(0), training=False) is x
    out = ag.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05


# -- graph semantics --------------------------------------------------------


def test_backward_accumulates_across_calls():
    with default_dtype(np.float64):
        w = Tensor(rand(3, 2), requires_grad=True)
        x = Tensor(rand(4, 3))
        loss = ag.sum_(ag.power(ag.matmul(x, w), 2.0))
        loss.backward()
        once = w.grad.copy()
        w.zero_grad()
        loss.backward()
        loss.backward()
    np.testing.assert_allclose(w.grad, 2 * once, rtol=1e-12)


def test_shared_subexpression_gradient():
    with default_dtype(np.float64):
        a = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        b = ag.mul(a, a)
        ag.sum_(ag.add(b, b)).backward()
    np.testing.assert_allclose(a.grad, 4 * a.data)


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_matmul_gradient_property(n, k, m, seed):
    r = np.random.default_rng(seed)
    gradcheck(ag.matmul, r.normal(size=(n, k)), r.normal(size=(k, m)))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_softmax_layer_norm_gradient_property(width, rows, seed):
    r = np.random.default_rng(seed)
    gradcheck(lambda a: ag.softmax(a), r.normal(size=(rows, width)))
    gradcheck(lambda a, g, b: ag.layer_norm(a, g, b, eps=1e-5),
              r.normal(size=(rows, width)), r.normal(size=width), r.normal(size=width))
