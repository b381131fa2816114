import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbmoe import autodiff as ad


def rng(seed=0):
    return np.random.default_rng(seed)


def test_matmul_identity():
    eye = ad.const(np.eye(2))
    v = ad.leaf(np.array([[3.0], [4.0]]))
    out = ad.matmul(eye, v)
    assert np.array_equal(out.value, [[3.0], [4.0]])


def test_softmax_symmetry():
    out = ad.softmax_rows(ad.const([0.0, 0.0]))
    assert np.allclose(out.value, [0.5, 0.5], atol=1e-15)


def test_cosine_hand_value():
    out = ad.cosine(ad.const([1.0, 0.0]), ad.const([1.0, 1.0]))
    assert abs(out.item() - 0.70710678) < 1e-8


def test_backward_square():
    x = ad.leaf(np.array(3.0))
    out = ad.mul(x, x)
    ad.backward(out)
    assert np.allclose(x.grad, 6.0)


def test_backward_requires_scalar_root():
    x = ad.leaf(np.ones(3))
    y = ad.mul(x, 2.0)
    with pytest.raises(ValueError):
        ad.backward(y)


def test_stop_gradient_blocks_flow():
    x = ad.leaf(rng().normal(size=4))
    y = ad.leaf(rng(1).normal(size=4))
    out = ad.tsum(ad.mul(ad.stop_gradient(x), y))
    g = ad.grad_of(out, x)
    assert np.array_equal(g, np.zeros(4))
    assert y.grad is not None and np.allclose(y.grad, x.value)


def test_stop_gradient_value_passthrough_and_idempotent():
    x = ad.leaf(np.array([1.0, 2.0, 3.0]))
    s1 = ad.stop_gradient(x)
    s2 = ad.stop_gradient(s1)
    assert np.array_equal(s1.value, x.value)
    assert np.array_equal(s2.value, x.value)
    assert not s2.requires_grad


def test_nonfinite_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.const([-1.0]))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(ad.const(np.ones((2, 3))), ad.const(np.ones((2, 3))))


@pytest.mark.parametrize("op,make_input", [
    ("add", lambda r: (r.uniform(-2, 2, (3, 4)),)),
    ("mul", lambda r: (r.uniform(-2, 2, (3, 4)),)),
    ("matmul", lambda r: (r.uniform(-2, 2, (3, 4)),)),
    ("relu", lambda r: (r.uniform(-2, 2, (3, 4)) + 0.01,)),
    ("exp", lambda r: (r.uniform(-2, 2, (3, 4)),)),
    ("softmax", lambda r: (r.uniform(-2, 2, (2, 5)),)),
    ("log_softmax", lambda r: (r.uniform(-2, 2, (2, 5)),)),
    ("mean", lambda r: (r.uniform(-2, 2, (3, 4)),)),
    ("variance", lambda r: (r.uniform(-2, 2, 7),)),
    ("cosine", lambda r: (r.uniform(-2, 2, 5) + 3.0,)),
    ("cosine_matrix", lambda r: (r.uniform(-2, 2, (3, 4)) + 3.0,)),
])
def test_primitive_gradients(op, make_input):
    r = rng(hash(op) % 2**32)
    (x,) = make_input(r)
    probe = r.normal(size=np.asarray(_apply(op, ad.const(x), r).value).shape)
    other = r.uniform(-2, 2, x.shape)

    def f(t):
        return ad.tsum(ad.mul(ad.const(probe), _apply(op, t, r, other)))

    err = ad.finite_diff_check(f, x, step=1e-6)
    assert err < 1e-4, f"{op}: relative error {err}"


def _apply(op, t, r, other=None):
    if op == "add":
        return ad.add(t, ad.const(other if other is not None else np.ones(t.value.shape)))
    if op == "mul":
        return ad.mul(t, ad.const(other if other is not None else 2.0 * np.ones(t.value.shape)))
    if op == "matmul":
        w = np.linspace(-1, 1, t.value.shape[1] * 2).reshape(t.value.shape[1], 2)
        return ad.matmul(t, ad.const(w))
    if op == "relu":
        return ad.relu(t)
    if op == "exp":
        return ad.exp(t)
    if op == "softmax":
        return ad.softmax_rows(t)
    if op == "log_softmax":
        return ad.log_softmax_rows(t)
    if op == "mean":
        return ad.tmean(t)
    if op == "variance":
        return ad.variance(t)
    if op == "cosine":
        ref = np.linspace(0.5, 1.5, t.value.size)
        return ad.cosine(t, ad.const(ref))
    if op == "cosine_matrix":
        ref = np.linspace(0.5, 1.5, 2 * t.value.shape[1]).reshape(2, -1)
        return ad.cosine_matrix(t, ad.const(ref))
    raise AssertionError(op)


def test_sum_of_squares_gradient_tight():
    err = ad.finite_diff_check(lambda t: ad.tsum(ad.mul(t, t)),
                               np.array([1.0, 2.0]), step=1e-6)
    assert err < 1e-8


def test_masked_row_softmax_values_and_grad():
    scores = np.array([[1.0, 5.0, 2.0], [0.0, 0.0, -1.0]])
    mask = np.array([[True, True, False], [True, False, True]])
    out = ad.masked_row_softmax(ad.const(scores), mask)
    assert np.all(out.value[~mask] == 0.0)
    assert np.allclose(out.value.sum(axis=1), 1.0, atol=1e-12)

    probe = rng(3).normal(size=scores.shape)

    def f(t):
        return ad.tsum(ad.mul(ad.const(probe), ad.masked_row_softmax(t, mask)))

    assert ad.finite_diff_check(f, scores) < 1e-4


def test_take_rows_and_scatter_roundtrip_grad():
    x = rng(5).normal(size=(6, 3))
    idx = np.array([4, 1, 1])
    probe = rng(6).normal(size=(3, 3))

    def f(t):
        return ad.tsum(ad.mul(ad.const(probe), ad.take_rows(t, idx)))

    assert ad.finite_diff_check(f, x) < 1e-4

    piece = rng(7).normal(size=(2, 3))
    probe2 = rng(8).normal(size=(5, 3))

    def g(t):
        return ad.tsum(ad.mul(ad.const(probe2), ad.scatter_rows(t, np.array([0, 3]), 5)))

    assert ad.finite_diff_check(g, piece) < 1e-4


def test_sparse_matmul_matches_dense_and_grad():
    import scipy.sparse as sp
    r = rng(11)
    dense = (r.random((5, 5)) < 0.4) * r.normal(size=(5, 5))
    smat = sp.csr_matrix(dense)
    x = r.normal(size=(5, 3))
    out = ad.sparse_matmul(smat, ad.const(x))
    assert np.allclose(out.value, dense @ x, atol=1e-12)

    probe = r.normal(size=(5, 3))

    def f(t):
        return ad.tsum(ad.mul(ad.const(probe), ad.sparse_matmul(smat, t)))

    assert ad.finite_diff_check(f, x) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_is_distribution(vals):
    out = ad.softmax_rows(ad.const(np.array(vals))).value
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out > 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_stop_gradient_preserves_values(vals):
    x = ad.leaf(np.array(vals))
    assert np.array_equal(ad.stop_gradient(x).value, x.value)


def test_adam_minimizes_quadratic():
    p = ad.leaf(np.array([4.0, -3.0]))
    opt = ad.Adam([p], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        loss = ad.tsum(ad.mul(p, p))
        ad.backward(loss)
        opt.step()
    assert np.all(np.abs(p.value) < 1e-2)


def test_grad_accumulates_across_paths():
    x = ad.leaf(np.array(2.0))
    out = ad.add(ad.mul(x, x), ad.mul(3.0, x))  # x^2 + 3x -> 2x + 3 = 7
    ad.backward(out)
    assert np.allclose(x.grad, 7.0)
