"""Tensor core: op semantics and gradient integrity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechbridge import tensor as T
from speechbridge.gradcheck import grad_check
from speechbridge.tensor import ShapeError, Tensor


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


# -----------------------------------------------------------------------------
# matmul
# -----------------------------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor(np.array([[3.0, 4.0], [5.0, 6.0]])))
    np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_hand():
    out = T.matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]])))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(rand((2, 3))), Tensor(rand((2, 3))))


@pytest.mark.parametrize("seed", range(10))
def test_matmul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 3)))

    def f(x):
        prod = T.matmul(x, b)
        return T.tensor_sum(T.mul(prod, prod))

    report = grad_check(f, a, tol=1e-6)
    assert report.ok, report


def test_matmul_grad_wrt_second_operand():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(4, 5)))
    b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    report = grad_check(lambda x: T.tensor_sum(T.mul(T.matmul(a, x), T.matmul(a, x))), b, tol=1e-6)
    assert report.ok, report


def test_batched_matmul_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 5, 2))
    out = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(3):
        np.testing.assert_allclose(out[i], a[i] @ b[i], rtol=1e-12)


# -----------------------------------------------------------------------------
# softmax
# -----------------------------------------------------------------------------


def test_softmax_symmetry():
    out = T.softmax(Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-15)


def test_softmax_no_overflow():
    out = T.softmax(Tensor(np.array([1000.0, 0.0])))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)


def test_softmax_fully_masked_row_is_zero_not_uniform():
    mask = np.array([[True, False, True], [False, False, False]])
    out = T.softmax(Tensor(rand((2, 3))), mask=mask)
    assert out.data[1].tolist() == [0.0, 0.0, 0.0]
    assert out.data[0] @ np.ones(3) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(10))
def test_softmax_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(7,)), requires_grad=True)
    w = Tensor(rng.normal(size=(7,)))
    report = grad_check(lambda t: T.tensor_sum(T.mul(T.softmax(t), w)), x, tol=1e-6)
    assert report.ok, report


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_nonnegative_and_sum_to_one(vals):
    out = T.softmax(Tensor(np.array(vals))).data
    assert (out >= 0).all()
    assert abs(out.sum() - 1.0) < 1e-9


# -----------------------------------------------------------------------------
# layer_norm
# -----------------------------------------------------------------------------


def _ln_params(d, requires_grad=False):
    return (
        Tensor(np.ones(d), requires_grad=requires_grad),
        Tensor(np.zeros(d), requires_grad=requires_grad),
    )


def test_layer_norm_constant_row_is_zero():
    gain, bias = _ln_params(4)
    out = T.layer_norm(Tensor(np.full((2, 4), 7.0)), gain, bias)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_two_point():
    gain, bias = _ln_params(2)
    out = T.layer_norm(Tensor(np.array([[1.0, 3.0]])), gain, bias, eps=1e-14)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_layer_norm_gradcheck(seed):
    rng = np.random.default_rng(seed)
    gain = Tensor(rng.normal(1.0, 0.2, size=5), requires_grad=True)
    bias = Tensor(rng.normal(size=5), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 5)))
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)

    def f(t):
        return T.tensor_sum(T.mul(T.layer_norm(t, gain, bias), w))

    assert grad_check(f, x, tol=1e-6).ok
    assert grad_check(lambda g: T.tensor_sum(T.mul(T.layer_norm(x, g, bias), w)), gain, tol=1e-6).ok


# -----------------------------------------------------------------------------
# cross_entropy
# -----------------------------------------------------------------------------


def test_cross_entropy_aligned_one_hot_near_zero():
    logits = np.full((3, 5), -30.0)
    targets = [1, 4, 2]
    for row, t in enumerate(targets):
        logits[row, t] = 30.0
    loss = T.cross_entropy(Tensor(logits), targets)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_uniform_is_log_v():
    loss = T.cross_entropy(Tensor(np.zeros((4, 4))), [0, 1, 2, 3])
    assert loss.item() == pytest.approx(np.log(4))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_gradcheck_with_ignore(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    targets = rng.integers(0, 5, size=6)
    targets[0] = -1
    report = grad_check(lambda t: T.cross_entropy(t, targets, ignore_index=-1), x, tol=1e-6)
    assert report.ok, report


# -----------------------------------------------------------------------------
# misc ops feeding the model
# -----------------------------------------------------------------------------


@pytest.mark.parametrize(
    "build",
    [
        lambda x: T.tanh(x),
        lambda x: T.gelu(x),
        lambda x: T.reshape(T.mul(x, x), (6,)),
        lambda x: T.transpose(T.mul(x, 2.0)),
        lambda x: T.concat([x, T.mul(x, x)], axis=0),
        lambda x: x[1:, :],
        lambda x: T.add(x, Tensor(rand((3, 2), seed=9))),
    ],
)
def test_op_gradchecks(build):
    rng = np.random.default_rng(17)
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    w = None

    def f(t):
        out = build(t)
        nonlocal w
        if w is None:
            w = Tensor(np.random.default_rng(5).normal(size=out.shape))
        return T.tensor_sum(T.mul(out, w))

    assert grad_check(f, x, tol=1e-6).ok


def test_embedding_gradient_accumulates_repeats():
    table = Tensor(rand((4, 3)), requires_grad=True)
    out = T.tensor_sum(T.embedding(table, [1, 1, 2]))
    out.backward()
    np.testing.assert_allclose(table.grad[1], 2.0)
    np.testing.assert_allclose(table.grad[2], 1.0)
    np.testing.assert_allclose(table.grad[0], 0.0)


def test_embedding_rejects_bad_ids():
    with pytest.raises(IndexError):
        T.embedding(Tensor(rand((4, 3))), [0, 4])


def test_forward_deterministic_for_fixed_seed():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 4)))
        return T.tensor_sum(T.gelu(T.matmul(x, x))).item()

    assert run() == run()


def test_no_grad_blocks_tape():
    x = Tensor(rand((2, 2)), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert y._backward is None and not y.requires_grad


def test_grad_check_constant_function():
    x = Tensor(rand((3,)), requires_grad=True)
    report = grad_check(lambda t: T.tensor_sum(T.mul(t, 0.0)), x, tol=1e-8)
    assert report.ok


def test_grad_check_analytic_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = T.tensor_sum(T.mul(x, x))
    out.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-12)
    assert grad_check(lambda t: T.tensor_sum(T.mul(t, t)), x, tol=1e-8).ok


def test_backward_visits_shared_nodes_once():
    # diamond graph: b = a + a where a = x*x; d(b)/dx = 4x only if the
    # shared node's backward runs exactly once per accumulated gradient
    x = Tensor(np.array([3.0]), requires_grad=True)
    a = T.mul(x, x)
    b = T.tensor_sum(T.add(a, a))
    b.backward()
    np.testing.assert_allclose(x.grad, [12.0])  # 4x at x=3
