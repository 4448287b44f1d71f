import math

import numpy as np
import pytest

from hensgnn import numkern as nk
from hensgnn.ensemble import (
    AdaptiveConfig,
    AlphaParams,
    BetaParams,
    GseConfig,
    adaptive_beta,
    annealing_temperature,
    bagging_predict,
    gse_predict,
    weighted_ensemble,
)


def probs(seed, n=6, c=3):
    return nk.softmax_rows(np.random.default_rng(seed).normal(size=(n, c)))


# -- temperature and beta


def test_temperature_saturates_on_dense_graphs():
    ratio = math.e**2 - 1
    for n in (10, 1000):
        assert annealing_temperature(int(math.ceil(ratio * n)), n) == pytest.approx(1.128)
    assert annealing_temperature(50 * 100, 100) == pytest.approx(1.128)


def test_temperature_smaller_on_sparse_graphs():
    assert annealing_temperature(0, 100) == pytest.approx(1 + 2**5 / 8000)
    assert annealing_temperature(100, 100) < annealing_temperature(1000, 100)


def test_beta_hand_value():
    b = adaptive_beta([0.8, 0.7], n_edges=700, n_nodes=100).weights
    assert b == pytest.approx([0.5222, 0.4778], abs=1e-4)


def test_beta_uniform_for_equal_accuracy():
    b = adaptive_beta([0.6, 0.6, 0.6], n_edges=10, n_nodes=5).weights
    assert np.allclose(b, 1 / 3)


def test_beta_strictly_monotone_in_accuracy():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        acc = rng.uniform(0, 1, n)
        b = adaptive_beta(acc, n_edges=int(rng.integers(0, 5000)), n_nodes=int(rng.integers(1, 500))).weights
        assert abs(b.sum() - 1) < 1e-12
        i, j = np.argsort(acc)[-1], np.argsort(acc)[0]
        if acc[i] > acc[j]:
            assert b[i] > b[j]
        order = np.argsort(acc)
        assert np.all(np.diff(b[order]) >= 0)


def test_beta_rejects_bad_accuracy():
    with pytest.raises(ValueError):
        adaptive_beta([1.2, 0.5], n_edges=1, n_nodes=1)
    with pytest.raises(ValueError):
        adaptive_beta([], n_edges=1, n_nodes=1)


def test_adaptive_config_validation():
    with pytest.raises(ValueError):
        AdaptiveConfig(gamma=0)


# -- parameter containers


def test_alpha_beta_weights_on_simplex():
    a = AlphaParams([0.1, 3.0, -2.0]).weights
    assert abs(a.sum() - 1) < 1e-12 and np.argmax(a) == 1
    assert np.allclose(BetaParams.uniform(4).weights, 0.25)


def test_gse_config_seeds():
    assert len(set(GseConfig(k=4).member_seeds(0))) == 4
    assert GseConfig(k=3).member_seeds(1) == GseConfig(k=3).member_seeds(1)
    with pytest.raises(ValueError):
        GseConfig(k=2, seeds=(1, 1))
    with pytest.raises(ValueError):
        GseConfig(k=0)


# -- combination rules


def test_gse_is_member_mean_and_row_stochastic():
    members = [probs(s) for s in range(3)]
    out = gse_predict(members)
    assert np.allclose(out, sum(members) / 3)
    assert np.abs(out.sum(axis=1) - 1).max() < 1e-12


def test_gse_single_member_identity():
    p = probs(0)
    assert np.array_equal(gse_predict([p]), p)


def test_weighted_ensemble_one_hot_and_uniform():
    ys = [probs(s) for s in range(3)]
    assert np.allclose(weighted_ensemble(ys, [0.0, 1.0, 0.0]), ys[1])
    assert np.allclose(weighted_ensemble(ys, BetaParams.uniform(3)), gse_predict(ys))


def test_weighted_ensemble_shape_errors():
    with pytest.raises(nk.ShapeError):
        weighted_ensemble([probs(0), probs(1)], [1.0])
    with pytest.raises(nk.ShapeError):
        gse_predict([probs(0), probs(1, n=5)])
    with pytest.raises(ValueError):
        bagging_predict([])


def test_bagging_mean():
    bags = [probs(s) for s in range(4)]
    assert np.allclose(bagging_predict(bags), np.mean(bags, axis=0))
