import logging

import numpy as np
import pytest

from basinscope.errors import ModelError
from basinscope.services import model_zoo
from basinscope.services.model_zoo import (
    DecisionTree,
    ForestHyper,
    ForestModel,
    LinearModel,
    LogRegHyper,
    accuracy,
    derive_seed,
    predict_proba_forest,
    predict_proba_linear,
    train_forest,
    train_logreg,
)
from basinscope.services.oracles import scalar_logreg_root

SCALAR_X = np.array([[1.0], [-1.0]])
SCALAR_Y = np.array([1, 0])


def test_scalar_logreg_matches_stationarity_root():
    m = train_logreg(SCALAR_X, SCALAR_Y, LogRegHyper(C=1.0, fit_intercept=False))
    assert m.converged
    assert m.b == 0.0
    assert abs(float(m.w[0]) - scalar_logreg_root(1.0)) < 1e-6
    # the root of w = 2 sigmoid(-w) is 0.67483..., not the rounded 0.676
    assert float(m.w[0]) == pytest.approx(0.674832, abs=1e-6)


def test_tiny_C_shrinks_weights():
    m = train_logreg(SCALAR_X, SCALAR_Y, LogRegHyper(C=1e-6, fit_intercept=False))
    assert abs(float(m.w[0])) < 1e-4


def test_logreg_is_bit_deterministic():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 4))
    y = (X[:, 0] + rng.normal(size=40) > 0).astype(int)
    h = LogRegHyper(C=0.7)
    a = train_logreg(X, y, h)
    b = train_logreg(X, y, h)
    assert np.array_equal(a.w, b.w)
    assert a.b == b.b


def test_logreg_non_convergence_is_reported(caplog):
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 5))
    y = (X @ np.arange(1, 6) + rng.normal(size=50) > 0).astype(int)
    with caplog.at_level(logging.WARNING, logger='basinscope.services.model_zoo'):
        m = train_logreg(X, y, LogRegHyper(C=100.0, max_iter=1))
    assert not m.converged
    assert m.n_iter == 1
    assert 'did not converge' in caplog.text


def test_logreg_needs_both_classes():
    with pytest.raises(ModelError):
        train_logreg(np.ones((3, 2)), [1, 1, 1], LogRegHyper(C=1.0))


def test_logreg_objective_never_increases_from_start():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(30, 3))
    y = rng.integers(0, 2, size=30)
    h = LogRegHyper(C=2.0)
    m = train_logreg(X, y, h)
    start = model_zoo.logistic_objective(np.zeros(3), 0.0, X, y, h.C)[0]
    end = model_zoo.logistic_objective(m.w, m.b, X, y, h.C)[0]
    assert end <= start


def test_predict_proba_linear_edge_values():
    X = np.array([[0.0], [3.0], [-2.0]])
    zero = LinearModel(w=[0.0], b=0.0, converged=True, final_grad_norm=0.0)
    assert np.all(predict_proba_linear(zero, X) == 0.5)
    saturated = LinearModel(w=[0.0], b=50.0, converged=True, final_grad_norm=0.0)
    assert np.all(predict_proba_linear(saturated, X) >= 1 - 1e-20)
    unit = LinearModel(w=[1.0], b=0.0, converged=True, final_grad_norm=0.0)
    assert predict_proba_linear(unit, np.array([[0.0]]))[0] == 0.5
    with pytest.raises(ModelError):
        predict_proba_linear(unit, np.zeros((2, 2)))


def _leaf(p, cover=10.0):
    return DecisionTree(feature=[-1], threshold=[0.0], left=[-1], right=[-1],
                        value=[[1.0 - p, p]], cover=[cover])


def test_pure_class_forest_is_single_leaves():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(20, 3))
    forest = train_forest(X, np.ones(20, dtype=int), ForestHyper(5, None, 1, 'sqrt', 0))
    assert all(t.n_nodes == 1 for t in forest.trees)
    assert np.all(predict_proba_forest(forest, X) == 1.0)


def test_forest_is_deterministic_node_for_node():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(60, 4))
    y = (X[:, 0] > 0).astype(int)
    h = ForestHyper(n_estimators=8, max_depth=4, min_samples_leaf=2, max_features='log2', seed=11)
    assert train_forest(X, y, h).to_dict() == train_forest(X, y, h).to_dict()


def test_forest_learns_xor():
    rng = np.random.default_rng(8)
    X = rng.uniform(-1, 1, size=(200, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    forest = train_forest(X, y, ForestHyper(n_estimators=50, max_depth=None, min_samples_leaf=1,
                                            max_features=1.0, seed=3))
    assert accuracy(predict_proba_forest(forest, X), y) >= 0.95


def test_forest_respects_max_depth_and_leaf_size():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(80, 5))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    forest = train_forest(X, y, ForestHyper(10, 3, 5, 0.5, 2))
    for tree in forest.trees:
        assert tree.depth() <= 3
        assert tree.cover[tree.leaves()].min() >= 5


def test_forest_probability_is_leaf_frequency_mean():
    stump = DecisionTree(feature=[0, -1, -1], threshold=[0.0, 0.0, 0.0], left=[1, -1, -1],
                         right=[2, -1, -1], value=[[0.5, 0.5], [0.75, 0.25], [0.0, 1.0]],
                         cover=[8.0, 4.0, 4.0])
    single = ForestModel(trees=(stump,), hyper=ForestHyper(1, None, 1, 'sqrt', 0), n_features=1)
    assert predict_proba_forest(single, np.array([[-1.0]]))[0] == 0.25

    pair = ForestModel(trees=(_leaf(0.2), _leaf(0.6)), hyper=ForestHyper(2, None, 1, 'sqrt', 0), n_features=1)
    assert predict_proba_forest(pair, np.array([[0.0]]))[0] == pytest.approx(0.4)

    same = ForestModel(trees=(stump, stump, stump), hyper=ForestHyper(3, None, 1, 'sqrt', 0), n_features=1)
    X = np.array([[-1.0], [1.0]])
    assert np.allclose(predict_proba_forest(same, X), stump.predict_proba(X))


def test_accuracy_rules():
    assert accuracy([1.0, 0.0, 1.0], [1, 0, 1]) == 1.0
    assert accuracy([0.5, 0.5], [1, 1]) == 1.0
    assert accuracy([0.9, 0.2, 0.7], [1, 1, 0]) == pytest.approx(1 / 3)
    with pytest.raises(ModelError):
        accuracy([], [])


def test_forest_hyper_validation():
    with pytest.raises(ModelError):
        ForestHyper(0, None, 1, 'sqrt', 0)
    with pytest.raises(ModelError):
        ForestHyper(10, None, 1, 'cube', 0)
    h = ForestHyper(10, None, 1, 0.5, 0)
    assert h.features_per_split(30) == 15
    assert ForestHyper(10, None, 1, 'sqrt', 0).features_per_split(30) == 5
    assert ForestHyper(10, None, 1, 'log2', 0).features_per_split(30) == 4
    assert ForestHyper.from_dict(h.as_dict()) == h


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(100, 7) == derive_seed(100, 7)
    assert derive_seed(100, 7) != derive_seed(100, 8)
    assert derive_seed(100, 7) != derive_seed(101, 7)
    a = model_zoo.derive_rng(1, 2).random(3)
    b = model_zoo.derive_rng(1, 2).random(3)
    assert np.array_equal(a, b)


def _noisy_logreg_data(seed=12, n=80, d=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X @ np.array([1.0, -0.5, 0.25, 0.0][:d]) + rng.normal(size=n) > 0).astype(int)
    return X, y


def test_logreg_optimum_does_not_depend_on_the_start():
    X, y = _noisy_logreg_data()
    h = LogRegHyper(C=1.0)
    from_zero = train_logreg(X, y, h)
    from_far = train_logreg(X, y, h, initial=(np.array([5.0, 5.0, -5.0, 3.0]), -2.0))
    assert from_zero.converged and from_far.converged
    assert np.max(np.abs(from_zero.w - from_far.w)) <= 1e-5
    assert from_zero.b == pytest.approx(from_far.b, abs=1e-5)


def test_weight_norm_grows_with_C():
    X, y = _noisy_logreg_data()
    norms = [float(np.linalg.norm(train_logreg(X, y, LogRegHyper(C=C)).w)) for C in np.logspace(-2, 2, 25)]
    assert all(b >= a - 1e-5 for a, b in zip(norms, norms[1:]))
    assert norms[-1] > norms[0]


def test_trained_trees_keep_cover_and_probability_invariants():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(120, 6))
    y = (X[:, 0] - X[:, 2] + 0.5 * rng.normal(size=120) > 0).astype(int)
    for h in (ForestHyper(6, 4, 3, 'sqrt', 1), ForestHyper(6, None, 1, 0.5, 2)):
        for tree in train_forest(X, y, h).trees:
            assert np.allclose(tree.value.sum(axis=1), 1.0)
            internal = np.flatnonzero(tree.left >= 0)
            assert np.array_equal(tree.cover[internal],
                                  tree.cover[tree.left[internal]] + tree.cover[tree.right[internal]])
            assert tree.cover[0] == 120
            if h.max_depth is not None:
                assert tree.depth() <= h.max_depth
            assert tree.cover[tree.leaves()].min() >= h.min_samples_leaf
