import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgpm import autodiff as ad
from kgpm.autodiff import Tape, Value
from kgpm.errors import NumericalError, KgpmError, ShapeError


def fd_check(builder, params, tol=1e-4):
    err = ad.grad_check(builder, params, max_entries=None)
    assert err < tol, err


def leaf(rng, *shape):
    return Value(rng.normal(size=shape), requires_grad=True)


UNARY = {
    "transpose": lambda a: ad.transpose(a),
    "scale": lambda a: ad.scale(a, -1.7),
    "scale_rows": lambda a: ad.scale_rows(a, np.arange(1, a.shape[0] + 1)),
    "sigmoid": ad.sigmoid,
    "softmax_rows": ad.softmax_rows,
    "mean_rows": ad.mean_rows,
    "sum_all": ad.sum_all,
    "relu": ad.relu,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_unary_primitive_vjp(name, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 3, 4)
    f = UNARY[name]

    def build(_):
        out = f(a)
        weights = Value(np.random.default_rng(seed + 1).normal(size=out.shape))
        return ad.sum_all(ad.hadamard(out, weights))

    # relu kinks are excluded by the checker itself
    fd_check(build, [a])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_binary_primitives_vjp(seed):
    rng = np.random.default_rng(seed)
    a, b, c = leaf(rng, 3, 4), leaf(rng, 3, 4), leaf(rng, 4, 2)

    def build(_):
        x = ad.add(ad.hadamard(a, b), ad.sub(a, b))
        return ad.sum_all(ad.matmul(x, c))

    fd_check(build, [a, b, c])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_indexing_primitives_vjp(seed):
    rng = np.random.default_rng(seed)
    table = leaf(rng, 5, 3)
    idx = rng.integers(0, 5, size=7)
    seg = np.sort(rng.integers(0, 3, size=7))
    seg[:3] = [0, 1, 2]
    weights = Value(rng.normal(size=(4, 3)))

    def build(_):
        g = ad.gather_rows(table, idx)
        s = ad.scatter_add_rows(4, rng_idx, g)
        m = ad.segment_mean(g, seg, 3)
        picked = ad.take(ad.softmax_rows(m), [0, 2, 1])
        return ad.add(ad.sum_all(ad.hadamard(s, weights)), ad.sum_all(ad.log(picked, 1e-12)))

    rng_idx = rng.integers(0, 4, size=7)
    fd_check(build, [table])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_gather_scatter_are_adjoint(seed):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(6, 3))
    idx = rng.integers(0, 6, size=9)
    R = rng.normal(size=(9, 3))
    lhs = np.sum(ad.gather_rows(Value(T), idx).data * R)
    rhs = np.sum(T * ad.scatter_add_rows((6, 3), idx, Value(R)).data)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.1, 50))
def test_softmax_and_sigmoid_ranges(seed, scale):
    x = Value(np.random.default_rng(seed).normal(size=(5, 7)) * scale)
    s = ad.softmax_rows(x).data
    assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-12)
    sig = ad.sigmoid(Value(np.random.default_rng(seed).normal(size=(5, 7)) * 5)).data
    assert np.all((sig > 0) & (sig < 1))


def test_shared_leaf_accumulates_every_path():
    x = Value([[2.0, -1.0]], requires_grad=True)
    w = Value([[3.0, 5.0]])
    with Tape() as tape:
        # x used three times: x*w + x*x + x
        y = ad.add(ad.add(ad.hadamard(x, w), ad.hadamard(x, x)), x)
        loss = ad.sum_all(y)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [[3 + 4 + 1, 5 - 2 + 1]])


def test_shared_embedding_row_gathered_twice():
    table = Value(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.gather_rows(table, [1, 1, 2]))
    tape.backward(loss)
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])


def test_relu_derivative_at_zero_is_zero():
    x = Value([[0.0, 1.0, -1.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.relu(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_log_clamp_gives_zero_gradient():
    x = Value([[0.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        y = ad.log(x, 1e-12)
        loss = ad.sum_all(y)
    tape.backward(loss)
    assert y.data[0, 0] == pytest.approx(np.log(1e-12))
    np.testing.assert_array_equal(x.grad, [[0.0, 0.5]])


def test_mean_is_exactly_permutation_and_duplication_invariant():
    rng = np.random.default_rng(3)
    rows = rng.normal(size=(9, 4)) * 10.0 ** rng.integers(-8, 8, size=(9, 1))
    a = ad.mean_rows(Value(rows)).data
    b = ad.mean_rows(Value(rows[rng.permutation(9)])).data
    c = ad.mean_rows(Value(np.vstack([rows, rows]))).data
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        ad.add(Value(np.ones((2, 3))), Value(np.ones((1, 3))))
    with pytest.raises(ShapeError):
        ad.matmul(Value(np.ones((2, 3))), Value(np.ones((2, 3))))


def test_tape_errors():
    x = Value([[1.0]], requires_grad=True)
    with pytest.raises(KgpmError):
        Tape().backward(x)
    with Tape() as tape:
        loss = ad.sum_all(ad.hadamard(x, x))
    tape.backward(loss)
    with pytest.raises(KgpmError, match="reset"):
        tape.backward(loss)
    with Tape() as tape2:
        wide = ad.hadamard(Value(np.ones((1, 2)), requires_grad=True), Value(np.ones((1, 2))))
    with pytest.raises(ShapeError):
        tape2.backward(wide)
    with Tape() as tape3:
        ad.scale(x, 2.0)
    with pytest.raises(KgpmError):
        tape3.backward(loss)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_raise():
    with pytest.raises(NumericalError):
        Value([[np.nan]])
    with pytest.raises(NumericalError):
        ad.scale(Value([[1e308]]), 1e10)


def test_unreached_leaf_gets_zero_gradient():
    a = Value([[1.0]], requires_grad=True)
    b = Value([[2.0]], requires_grad=True)
    with Tape() as tape:
        ad.scale(b, 3.0)
        loss = ad.sum_all(ad.scale(a, 2.0))
    grads = tape.backward(loss)
    assert grads[id(b)].tolist() == [[0.0]]
    assert a.grad.tolist() == [[2.0]]


def test_grad_check_flags_a_wrong_gradient():
    x = Value(np.array([[0.3, -0.2]]), requires_grad=True)

    def bad_square(a):
        # forward x**2 but a vjp that forgets the factor 2
        return ad._emit("bad", (a,), a.data ** 2, lambda g: (g * a.data,))

    err = ad.grad_check(lambda _: ad.sum_all(bad_square(x)), [x], max_entries=None)
    assert err > 0.3
