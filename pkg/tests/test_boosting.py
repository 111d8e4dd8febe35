import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import cross_entropy

from fedgbm.core.boosting import (Ensemble, TrainConfig, batch_size, compute_gradients,
                                  init_base_score, predict, sample_batch, train_centralized,
                                  update_ensemble, views_for)
from fedgbm.core.dataset import Dataset
from fedgbm.core.tree import Tree, TreeNode
from fedgbm.data import make_synthetic
from fedgbm.errors import ConfigError, DataError
from fedgbm.metrics import logloss


def stump(thr, left, right, owner="A", f=0, tid=0):
    return Tree(tid, {0: TreeNode(0, "internal", owner, f, thr),
                      1: TreeNode(1, "leaf", leaf_weight=left),
                      2: TreeNode(2, "leaf", leaf_weight=right)})


def test_base_score_examples():
    assert init_base_score([0, 1]) == pytest.approx(0.0)
    assert init_base_score([1, 1, 1, 0]) == pytest.approx(math.log(3))
    assert init_base_score([0, 0, 0]) == pytest.approx(math.log(1e-6 / (1 - 1e-6)))
    with pytest.raises(DataError):
        init_base_score([])


def test_gradient_examples():
    g, h, eps = compute_gradients([1, 0], [0.0, 0.0])
    np.testing.assert_allclose(g, [-0.5, 0.5])
    np.testing.assert_allclose(h, [0.25, 0.25])
    np.testing.assert_allclose(eps, [math.log(2)] * 2)


@given(st.floats(-6, 6), st.sampled_from([0, 1]))
def test_gradient_is_derivative_of_loss(s, y):
    step = 1e-6
    g, h, eps = compute_gradients([y], [s])
    fd = (cross_entropy(y, s + step) - cross_entropy(y, s - step)) / (2 * step)
    assert g[0] == pytest.approx(fd, rel=1e-5, abs=1e-7)
    g_plus = compute_gradients([y], [s + step])[0][0]
    g_minus = compute_gradients([y], [s - step])[0][0]
    assert h[0] == pytest.approx((g_plus - g_minus) / (2 * step), rel=1e-4, abs=1e-7)
    assert eps[0] == pytest.approx(cross_entropy(y, s), rel=1e-9)


def test_nan_score_rejected():
    with pytest.raises(DataError):
        compute_gradients([1], [float("nan")])


def test_sample_batch():
    rng = np.random.default_rng(0)
    b = sample_batch(rng, 100, 0.1)
    assert len(b) == 10 and len(set(b.tolist())) == 10 and (np.diff(b) > 0).all()
    assert batch_size(3, 0.1) == 1
    assert sample_batch(rng, 7, 1.0).tolist() == list(range(7))
    with pytest.raises(ConfigError):
        sample_batch(rng, 10, 0.0)


def test_update_is_additive_and_pure():
    X = np.array([[-1.0], [1.0]])
    views = views_for(X, 1)
    ens = Ensemble(0.0, 0.1)
    e1 = update_ensemble(ens, stump(0.0, 1.0, -1.0))
    e2 = update_ensemble(e1, stump(0.0, 2.0, 3.0, tid=1))
    assert ens.trees == []
    np.testing.assert_allclose(e2.raw_score(views), [0.1 * (1 + 2), 0.1 * (-1 + 3)])


def test_empty_ensemble_predicts_half():
    assert predict(Ensemble(0.0, 0.1), {"A": np.zeros((3, 1))}).tolist() == [0.5] * 3


def test_raw_score_hand_value():
    # base 0.12, two trees each contributing 0.1 * 1.0 -> 0.32
    ens = Ensemble(0.12, 0.1)
    ens = update_ensemble(update_ensemble(ens, stump(5.0, 1.0, 0.0)), stump(5.0, 1.0, 0.0, tid=1))
    assert ens.raw_score({"A": np.zeros((1, 1))})[0] == pytest.approx(0.32)


def test_config_validation():
    for bad in ({"strategy": "x"}, {"learning_rate": 0}, {"batch_fraction": 1.5}, {"t": 0},
                {"iterations": -1}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_learning_rate_schedule():
    c = TrainConfig(learning_rates=[0.3, 0.2, 0.1])
    assert [c.alpha(k) for k in range(5)] == [0.3, 0.2, 0.1, 0.1, 0.1]
    assert TrainConfig(learning_rate=0.05).alpha(7) == 0.05


def test_gini_scorer_for_cardinality_strategy():
    assert TrainConfig(strategy="psi-cardinality").grow_params.scorer == "gini"
    assert TrainConfig().grow_params.scorer == "gain"


def test_training_loss_decreases():
    ds = make_synthetic(800, 8, seed=1)
    views = views_for(ds.features, 4)
    losses = []
    ens, records, state = train_centralized(
        ds, TrainConfig(iterations=30, t=4, min_leaf=5), n_a=4,
        on_iteration=lambda k, e: losses.append(logloss(ds.labels, predict(e, views))))
    assert len(records) == 30
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    # the returned running scores equal a fresh prediction
    np.testing.assert_allclose(state["scores"], ens.raw_score(views), atol=1e-9)
    assert losses[-1] < math.log(2)
    assert [r.k for r in records] == list(range(1, 31))


def test_base_tree_only_uses_a_columns():
    ds = make_synthetic(400, 6, seed=2)
    ens, _, _ = train_centralized(ds, TrainConfig(iterations=2, t=3, min_leaf=5), n_a=2)
    assert ens.has_base_tree and ens.iterations_completed == 2
    assert all(n.owner == "A" for n in ens.trees[0].internal)


def test_training_is_deterministic():
    ds = make_synthetic(300, 5, seed=3)
    cfg = TrainConfig(iterations=5, t=3, min_leaf=5, batch_fraction=0.5, seed=9)
    a = train_centralized(ds, cfg, n_a=3)[2]["scores"]
    b = train_centralized(ds, cfg, n_a=3)[2]["scores"]
    np.testing.assert_array_equal(a, b)


def test_unlabelled_training_rejected():
    ds = Dataset([b"a", b"b"], np.zeros((2, 1)))
    with pytest.raises(DataError):
        train_centralized(ds, TrainConfig(iterations=1))
