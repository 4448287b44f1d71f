import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hensgnn import numkern as nk


def num_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    # floor keeps an exactly-zero gradient (e.g. a shift-invariant score) from dividing by ~0
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8)


# -- rng


def test_rng_same_seed_same_stream():
    a = nk.Rng(7, "proxy", 3).normal(size=20)
    b = nk.Rng(7, "proxy", 3).normal(size=20)
    assert np.array_equal(a, b)


def test_rng_child_equals_direct_stream():
    assert np.array_equal(nk.Rng(7).child("x", 1).random(5), nk.Rng(7, "x", 1).random(5))


def test_rng_streams_differ():
    assert not np.array_equal(nk.Rng(7, "a").random(5), nk.Rng(7, "b").random(5))
    assert not np.array_equal(nk.Rng(7).random(5), nk.Rng(8).random(5))


def test_derive_seed_stable_and_distinct():
    assert nk.derive_seed(1, "x", 2) == nk.derive_seed(1, "x", 2)
    assert nk.derive_seed(1, "x", 2) != nk.derive_seed(1, "x", 3)
    assert 0 <= nk.derive_seed(123, "tag") < 2**63


# -- spmm


def test_spmm_identity_and_zero():
    h = np.arange(12.0).reshape(4, 3)
    assert np.array_equal(nk.spmm(sp.identity(4, format="csr"), h), h)
    assert np.array_equal(nk.spmm(sp.csr_matrix((4, 4)), h), np.zeros((4, 3)))


def test_spmm_hand_example():
    a = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    h = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nk.spmm(a, h), [[3.0, 4.0], [1.0, 2.0]])


def test_spmm_shape_error():
    with pytest.raises(nk.ShapeError):
        nk.spmm(sp.identity(3, format="csr"), np.ones((4, 2)))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 50), d=st.integers(1, 6), density=st.floats(0.0, 0.5), seed=st.integers(0, 2**31))
def test_spmm_matches_dense(n, d, density, seed):
    rng = np.random.default_rng(seed)
    a = sp.random(n, n, density=density, format="csr", random_state=rng)
    h = rng.normal(size=(n, d))
    assert np.abs(nk.spmm(a, h) - a.toarray() @ h).max() <= 1e-12


def test_as_csr_canonical():
    a = sp.coo_matrix(([1.0, 2.0, 3.0], ([0, 0, 1], [2, 2, 0])), shape=(2, 3))
    c = nk.as_csr(a)
    assert c.has_canonical_format
    assert c[0, 2] == 3.0
    assert np.all(np.diff(c.indptr) >= 0) and c.indptr[-1] == c.nnz


# -- softmax and loss


def test_softmax_hand_values():
    assert np.allclose(nk.softmax_rows(np.zeros((1, 3))), 1 / 3)
    assert np.allclose(nk.softmax_rows(np.array([[0.0, np.log(3.0)]])), [[0.25, 0.75]])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.floats(-1e3, 1e3))
def test_softmax_rows_sum_and_shift(seed, shift):
    m = np.random.default_rng(seed).normal(scale=5, size=(6, 4))
    p = nk.softmax_rows(m)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-9
    assert np.all(p > 0) and np.all(p < 1)
    assert np.allclose(nk.softmax_rows(m + shift), p, atol=1e-12)


def test_softmax_large_values_finite():
    p = nk.softmax_rows(np.array([[1e308, 0.0], [-1e308, 0.0]]))
    assert np.all(np.isfinite(p))


def test_cross_entropy_perfect_and_uniform():
    y = nk.one_hot(np.array([0, 1, 2]), 3)
    loss, _ = nk.cross_entropy(y.copy(), y, [0, 1, 2])
    assert loss == pytest.approx(0.0, abs=1e-12)
    loss, _ = nk.cross_entropy(np.full((3, 3), 1 / 3), y, [0, 1, 2])
    assert loss == pytest.approx(np.log(3))


def test_cross_entropy_empty_mask():
    with pytest.raises(ValueError):
        nk.cross_entropy(np.full((2, 2), 0.5), np.eye(2), [])


def test_cross_entropy_clamps_zero_probability():
    loss, _ = nk.cross_entropy(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), [0])
    assert loss == pytest.approx(-np.log(1e-12))


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(6, 4))
    y = nk.one_hot(rng.integers(0, 4, 6), 4)
    mask = [0, 2, 3, 5]
    _, g = nk.cross_entropy(nk.softmax_rows(s), y, mask)
    fd = num_grad(lambda: nk.cross_entropy(nk.softmax_rows(s), y, mask)[0], s)
    assert rel_err(g, fd) < 1e-4
    assert np.all(g[[1, 4]] == 0)


def test_cross_entropy_prob_grad_fd():
    rng = np.random.default_rng(1)
    p = nk.softmax_rows(rng.normal(size=(5, 3)))
    y = nk.one_hot(rng.integers(0, 3, 5), 3)
    _, g = nk.cross_entropy_prob_grad(p, y, [0, 1, 4])
    fd = num_grad(lambda: nk.cross_entropy_prob_grad(p, y, [0, 1, 4])[0], p)
    assert rel_err(g, fd) < 1e-4


def test_softmax_backward_fd():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 3))
    g = nk.softmax_backward(nk.softmax_rows(s), w)
    fd = num_grad(lambda: float((nk.softmax_rows(s) * w).sum()), s)
    assert rel_err(g, fd) < 1e-4


def test_matmul_and_spmm_gradients_fd():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))
    a = sp.random(5, 5, density=0.4, format="csr", random_state=4)
    up = rng.normal(size=(5, 3))
    f = lambda: float((nk.spmm(a, nk.matmul(x, w)) * up).sum())
    gw = x.T @ (a.T @ up)
    gx = (a.T @ up) @ w.T
    assert rel_err(gw, num_grad(f, w)) < 1e-4
    assert rel_err(gx, num_grad(f, x)) < 1e-4


def test_relu_and_leaky_backward_fd():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    up = rng.normal(size=x.shape)
    assert rel_err(nk.relu_backward(x, up), num_grad(lambda: float((nk.relu(x) * up).sum()), x)) < 1e-4
    assert rel_err(
        nk.leaky_relu_backward(x, up, 0.2), num_grad(lambda: float((nk.leaky_relu(x, 0.2) * up).sum()), x)
    ) < 1e-4


def test_one_hot_ignores_unlabeled():
    y = nk.one_hot(np.array([1, -1, 0]), 2)
    assert np.array_equal(y, [[0, 1], [0, 0], [1, 0]])


def test_accuracy():
    p = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    assert nk.accuracy(p, np.array([0, 1, 1]), [0, 1, 2]) == pytest.approx(2 / 3)
    assert nk.accuracy(p, np.array([0, 1, 1]), []) == 0.0


# -- adam


def test_adam_zero_grad_no_change():
    p = {"w": np.array([1.0, -2.0])}
    st_ = nk.AdamState(lr=0.1)
    nk.adam_step(p, {"w": np.zeros(2)}, st_)
    assert np.array_equal(p["w"], [1.0, -2.0])
    assert st_.step == 1


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    nk.adam_step(p, {"w": np.array([3.0, -0.5, 1e-3])}, nk.AdamState(lr=0.01))
    assert np.allclose(p["w"] - 1.0, [-0.01, 0.01, -0.01], atol=1e-8)


def test_adam_decoupled_weight_decay():
    p = {"w": np.array([2.0])}
    nk.adam_step(p, {"w": np.zeros(1)}, nk.AdamState(lr=0.1, weight_decay=0.5))
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_shape_mismatch():
    with pytest.raises(nk.ShapeError):
        nk.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nk.AdamState(lr=0.1))


def test_adam_deterministic():
    def go():
        rng = nk.Rng(5)
        p = {"w": rng.normal(size=(3, 3))}
        s = nk.AdamState(lr=0.01, weight_decay=5e-4)
        for _ in range(10):
            nk.adam_step(p, {"w": np.sin(p["w"])}, s)
        return p["w"], s.m["w"], s.v["w"]

    for a, b in zip(go(), go()):
        assert np.array_equal(a, b)


# -- dropout


def test_dropout_identity_cases():
    m = np.ones((3, 3))
    assert np.array_equal(nk.dropout(m, 0.0, nk.Rng(0), True), m)
    assert np.array_equal(nk.dropout(m, 0.9, nk.Rng(0), False), m)


def test_dropout_rate_out_of_range():
    with pytest.raises(nk.ConfigError):
        nk.dropout(np.ones(2), 1.0, nk.Rng(0), True)
    with pytest.raises(nk.ConfigError):
        nk.dropout_mask((2,), -0.1, nk.Rng(0))


def test_dropout_expectation_monte_carlo():
    m = np.linspace(1.0, 4.0, 20).reshape(4, 5)
    rng = nk.Rng(11, "mc")
    draws = np.stack([nk.dropout(m, 0.5, rng, True) for _ in range(10_000)])
    avg = draws.mean(axis=0)
    assert np.abs(avg - m).mean() / np.abs(m).mean() < 0.02
    assert np.all((draws == 0) | np.isclose(draws, 2 * m))


def test_glorot_bounds():
    w = nk.glorot((30, 20), nk.Rng(0))
    assert np.abs(w).max() <= np.sqrt(6 / 50)
