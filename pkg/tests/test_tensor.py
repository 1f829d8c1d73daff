import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import gradsuite
from insgen import tensor as T
from insgen.tensor import NonFiniteError, ShapeError, Tensor


def leaf(values):
    return Tensor(np.array(values, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- forward examples


def test_matmul_identity_left():
    a = np.random.default_rng(0).normal(size=(3, 5))
    out = T.eval_op("matmul", Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_leaky_relu_definition():
    out = T.eval_op("leaky-relu", Tensor(np.array([-1.0, 0.0, 2.0])), slope=0.2)
    np.testing.assert_allclose(out.data, [-0.2, 0.0, 2.0], rtol=0, atol=1e-15)


def test_l2_normalize_three_four_five():
    out = T.eval_op("l2-normalize", Tensor(np.array([[3.0, 4.0]])))
    np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)


def test_l2_normalize_zero_row_is_zero_with_zero_gradient():
    x = leaf([[0.0, 0.0], [1.0, 1.0]])
    out = T.l2_normalize(x)
    np.testing.assert_array_equal(out.data[0], [0.0, 0.0])
    T.backward(T.tsum(T.mul(out, Tensor(np.ones((2, 2))))))
    np.testing.assert_array_equal(x.grad[0], [0.0, 0.0])
    assert np.all(np.isfinite(x.grad))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 4), elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_rows_unit(x):
    out = T.l2_normalize(Tensor(x)).data
    norms = np.linalg.norm(out, axis=1)
    nonzero = np.linalg.norm(x, axis=1) > 1e-150
    np.testing.assert_allclose(norms[nonzero], 1.0, atol=1e-12)


def test_registry_covers_required_kinds():
    required = {"matmul", "add", "sub", "mul", "scalar-mul", "leaky-relu", "softplus", "exp",
                "log", "sum", "mean", "l2-normalize", "dot-product", "log-sum-exp", "square",
                "gather-rows", "concat-rows"}
    assert required <= set(T.OPS)


def test_unknown_kind_rejected():
    with pytest.raises(T.TensorError, match="unknown op kind"):
        T.eval_op("conv2d", Tensor(np.ones(2)))


# ---------------------------------------------------------------- shape and strict errors


def test_shape_mismatch_names_kind_and_shapes():
    with pytest.raises(ShapeError) as exc:
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    msg = str(exc.value)
    assert "add" in msg and "(2, 3)" in msg and "(3, 2)" in msg


def test_matmul_mismatch_rejected():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_scalar_broadcast_is_the_only_broadcast():
    out = T.mul(Tensor(np.array(2.0)), Tensor(np.ones((2, 2))))
    np.testing.assert_array_equal(out.data, 2 * np.ones((2, 2)))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((1, 3))), Tensor(np.ones((4, 3))))


def test_strict_mode_rejects_non_finite():
    bad = Tensor(np.array([1.0, np.nan]))
    T.exp(bad)  # permissive by default
    with T.strict():
        with pytest.raises(NonFiniteError, match="exp"):
            T.exp(bad)


# ---------------------------------------------------------------- backward examples


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0])
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_mean():
    x = leaf([1.0, 5.0, -2.0, 0.5])
    T.backward(T.mean(x))
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_backward_logsumexp_symmetry():
    x = leaf([[0.0, 0.0]])
    T.backward(T.tsum(T.logsumexp_rows(x)))
    np.testing.assert_allclose(x.grad, [[0.5, 0.5]], atol=1e-15)


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError, match="scalar"):
        T.backward(T.square(x))


def test_backward_accumulates_additively():
    x = leaf([0.3, -1.2, 2.0])
    loss = T.tsum(T.exp(x))
    T.backward(loss)
    once = x.grad.copy()
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * once, rtol=0, atol=0)


def test_backward_populates_every_reachable_leaf_and_intermediate():
    a, b = leaf([[1.0, 2.0]]), leaf([[0.5], [-1.0]])
    h = T.matmul(a, b)
    y = T.tsum(T.softplus(h))
    T.backward(y)
    for t in (a, b, h):
        assert t.grad is not None and t.grad.shape == t.shape


def test_zero_grad_clears():
    x = leaf([1.0])
    T.backward(T.tsum(x))
    T.zero_grad([x])
    assert x.grad is None


def test_graph_records_in_append_order_and_backward_reverses():
    with T.Graph() as g:
        x = leaf([1.0, 2.0])
        y = T.exp(x)
        z = T.tsum(y)
        kinds = [n.kind for n in g.nodes]
        assert kinds == ["exp", "sum"]
        for i, n in enumerate(g.nodes):
            for inp in n.inputs:
                assert inp.node is None or inp.node.index < i
        T.backward(z)


def test_no_grad_records_nothing():
    with T.Graph() as g:
        with T.no_grad():
            y = T.exp(leaf([1.0]))
        assert len(g) == 0 and not y.requires_grad


def test_backward_after_reset_is_rejected():
    with T.Graph():
        loss = T.tsum(T.exp(leaf([1.0])))
        T.reset_graph()
        with pytest.raises(T.TensorError, match="reset"):
            T.backward(loss)


def test_threads_use_independent_graphs():
    errors = []

    def work(seed):
        try:
            rng = np.random.default_rng(seed)
            for _ in range(50):
                with T.Graph():
                    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
                    T.backward(T.tsum(T.square(x)))
                    np.testing.assert_allclose(x.grad, 2 * x.data)
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_second_order_grad_matches_analytic():
    # d/dw of ||d(x.w)/dx||^2 summed over rows = 2 * B * w
    w = leaf([[0.5], [-1.5]])
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    (gx,) = T.grad(T.tsum(T.matmul(x, w)), [x], create_graph=True)
    T.backward(T.tsum(T.square(gx)))
    np.testing.assert_allclose(w.grad, 2 * 3 * w.data, atol=1e-14)


# ---------------------------------------------------------------- grad_check


def test_grad_check_sum_of_squares_polynomial():
    err = T.grad_check(lambda x: T.tsum(T.square(x)), np.array([1.0, 2.0, 3.0]), 1e-5)
    assert err < 1e-6


def test_grad_check_softplus_at_zero():
    x = leaf([0.0])
    T.backward(T.tsum(T.softplus(x)))
    assert x.grad[0] == pytest.approx(0.5, abs=1e-15)
    assert T.grad_check(lambda t: T.tsum(T.softplus(t)), np.array([0.0])) < 1e-8


def test_grad_check_reports_coordinate_of_non_finite():
    def f(x):
        return T.tsum(T.log(x))

    with pytest.raises(NonFiniteError) as exc:
        T.grad_check(f, np.array([1.0, 2.0, 1e-6]), step=1e-5)
    assert exc.value.index == 2


def test_grad_check_detects_wrong_gradient():
    def f(x):
        # forward value uses x**3, backward rule of square: a mismatch grad_check must see
        y = T.square(x)
        y.data = x.data ** 3
        return T.tsum(y)

    assert T.grad_check(f, np.array([1.5, 2.0])) > 0.1


@pytest.mark.parametrize("name", sorted(gradsuite.op_cases()))
def test_every_op_passes_grad_check(name):
    assert gradsuite.run_case(gradsuite.op_cases()[name], 3) < gradsuite.TOL
