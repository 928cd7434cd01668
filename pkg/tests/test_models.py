"""Model wrappers: tree export fidelity, CART oracle, isolation forest
scoring, MLP training and the suppression fine-tune."""

from __future__ import annotations

import json

import numpy as np
import pytest

from onshap.datasets import OutlierGenConfig, gen_outlier_data, gen_two_feature_data
from onshap.errors import DataError, InputShapeError
from onshap.models import (
    DecisionTreeModel,
    FlatTree,
    IsolationForestModel,
    MlpClassifier,
    RandomForestModel,
    TreeEnsembleClassifier,
    TreeNode,
    fit_decision_tree,
    fit_isolation_forest,
    fit_mlp,
    fit_random_forest,
    model_from_doc,
    suppress_feature_finetune,
)
from onshap.nn import TrainConfig


def blob_data(n=400, seed=0, d=5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    return X, y


# ------------------------------------------------------------------- trees


def test_single_leaf_tree_probabilities():
    leaf = TreeNode(leaf_value=np.array([3.0, 1.0]))
    tree = FlatTree.from_nested(leaf, value_width=2)
    model = DecisionTreeModel([tree], classes=[0, 1], n_features=2)
    np.testing.assert_allclose(model.predict_proba([0.2, 0.9]), [0.75, 0.25])


def test_forest_of_one_tree_equals_tree():
    X, y = blob_data()
    tree = fit_decision_tree(X, y, seed=0, max_depth=4)
    forest = RandomForestModel(tree.trees, tree.classes, tree.n_features)
    np.testing.assert_array_equal(forest.predict_proba(X), tree.predict_proba(X))


def test_tree_export_matches_fitting_library_exactly():
    from sklearn.tree import DecisionTreeClassifier

    X, y = blob_data(seed=3)
    model = fit_decision_tree(X, y, seed=1)
    sk = DecisionTreeClassifier(criterion="gini", random_state=1).fit(X, y)
    np.testing.assert_allclose(model.predict_proba(X), sk.predict_proba(X), atol=1e-12)


def test_forest_export_matches_fitting_library_exactly():
    from sklearn.ensemble import RandomForestClassifier

    X, y = blob_data(seed=4)
    model = fit_random_forest(X, y, n_trees=20, max_features_mode="all", seed=5)
    sk = RandomForestClassifier(
        n_estimators=20, max_features=None, random_state=5, n_jobs=1
    ).fit(X, y)
    np.testing.assert_allclose(model.predict_proba(X), sk.predict_proba(X), atol=1e-12)


def test_tree_reproduces_generating_table_conditionals():
    ds = gen_two_feature_data(n_points=10_000, seed=2)
    model = fit_decision_tree(ds.features, ds.labels, seed=0)
    table = ds.extras["table"]
    for a in (0, 1):
        for b in (0, 1):
            corner = np.array([float(a), float(b)])
            sel = (ds.features[:, 0] == a) & (ds.features[:, 1] == b)
            empirical = ds.labels[sel].mean()
            p1 = model.predict_proba(corner)[1]
            assert p1 == pytest.approx(empirical, abs=1e-12)
            cond = table[a, b, 1] / table[a, b].sum()
            assert abs(p1 - cond) < 0.05


def test_xor_train_accuracy_perfect():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    X = np.tile(X, (10, 1))
    y = (X[:, 0] != X[:, 1]).astype(int)
    model = fit_decision_tree(X, y, seed=0)
    assert (model.predict(X) == y).all()


def test_pure_label_dataset():
    X = np.random.default_rng(0).normal(size=(30, 3))
    y = np.ones(30, dtype=int)
    model = fit_random_forest(X, y, n_trees=5, seed=0)
    probs = model.predict_proba(X)
    np.testing.assert_allclose(probs[:, 0], 1.0)


def gini_gain(X, y, feature):
    def gini(labels):
        if len(labels) == 0:
            return 0.0
        p = np.bincount(labels, minlength=2) / len(labels)
        return 1.0 - (p**2).sum()

    left = y[X[:, feature] <= 0.5]
    right = y[X[:, feature] > 0.5]
    n = len(y)
    return gini(y) - len(left) / n * gini(left) - len(right) / n * gini(right)


def test_cart_first_split_matches_exhaustive_gini():
    rng = np.random.default_rng(7)
    for trial in range(5):
        X = rng.integers(0, 2, size=(120, 4)).astype(float)
        logits = 1.4 * X[:, trial % 4] - 0.8 * X[:, (trial + 1) % 4] + 0.3
        y = (rng.uniform(size=120) < 1 / (1 + np.exp(-logits))).astype(int)
        if len(np.unique(y)) < 2:
            continue
        model = fit_decision_tree(X, y, seed=0)
        root_feature = int(model.trees[0].feature[0])
        gains = [gini_gain(X, y, f) for f in range(4)]
        assert root_feature == int(np.argmax(gains))


def test_empty_data_rejected():
    with pytest.raises(DataError):
        fit_random_forest(np.empty((0, 3)), np.empty(0))
    with pytest.raises(DataError):
        fit_isolation_forest(np.empty((0, 3)))


def test_ensemble_serialization_round_trip():
    X, y = blob_data(seed=9)
    model = fit_random_forest(X, y, n_trees=7, seed=2)
    doc = json.loads(json.dumps(model.to_doc()))
    back = model_from_doc(doc)
    assert isinstance(back, RandomForestModel)
    np.testing.assert_array_equal(back.predict_proba(X), model.predict_proba(X))


# -------------------------------------------------------- probability shape


def test_probability_simplex_invariant():
    X, y = blob_data(seed=11)
    models = [
        fit_decision_tree(X, y, seed=0),
        fit_random_forest(X, y, n_trees=10, seed=0),
        fit_isolation_forest(X, seed=0),
        fit_mlp(X, y, hidden_sizes=(8,), cfg=TrainConfig(1e-2, max_epochs=5))[0],
    ]
    for model in models:
        probs = model.predict_proba(X[:50])
        assert probs.min() >= 0.0 and probs.max() <= 1.0
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_wrong_width_and_sentinel_rejected():
    X, y = blob_data()
    model = fit_decision_tree(X, y, seed=0)
    with pytest.raises(InputShapeError):
        model.predict_proba(np.zeros(7))
    with pytest.raises(InputShapeError, match="sentinel"):
        model.predict_proba(np.array([0.0, -1.0, 0.0, 0.0, 0.0]))


# -------------------------------------------------------- isolation forest


def test_isolation_forest_identical_points_equal_scores():
    X = np.ones((40, 3))
    model = fit_isolation_forest(X, n_trees=20, subsample_size=32, seed=0)
    scores = model.raw_score(X)
    assert np.ptp(scores) < 1e-12


def test_isolation_forest_extreme_outlier_has_max_score():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.normal(0, 0.05, size=(49, 3)), [[5.0, 5.0, 5.0]]])
    model = fit_isolation_forest(X, n_trees=100, subsample_size=50, seed=0)
    scores = model.raw_score(X)
    assert np.argmax(scores) == 49
    assert scores[49] > 0  # positive raw score marks the outlier


def test_isolation_forest_matches_reference_scores():
    from sklearn.ensemble import IsolationForest

    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 4))
    model = fit_isolation_forest(X, n_trees=30, subsample_size=128, seed=4)
    sk = IsolationForest(
        n_estimators=30, max_samples=128, contamination="auto", random_state=4
    ).fit(X)
    np.testing.assert_allclose(model.raw_score(X), -sk.decision_function(X), atol=1e-12)


def test_isolation_forest_calibrated_outlier_classification():
    ds = gen_outlier_data(OutlierGenConfig(sigma=0.05, n_points=4000, seed=6))
    model = fit_isolation_forest(ds.features, seed=0)
    model.calibrate_threshold(ds.features, outlier_fraction=0.01)
    pred = model.predict(ds.features)
    assert (pred == ds.labels).mean() == 1.0


def test_isolation_forest_subsample_clamp_warns():
    X = np.random.default_rng(0).normal(size=(50, 2))
    with pytest.warns(UserWarning, match="clamp"):
        model = fit_isolation_forest(X, subsample_size=256, seed=0)
    assert model.subsample_size == 50


def test_isolation_forest_serialization_round_trip():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 3))
    model = fit_isolation_forest(X, n_trees=15, subsample_size=64, seed=1)
    model.calibrate_threshold(X, 0.05)
    doc = json.loads(json.dumps(model.to_doc()))
    back = model_from_doc(doc)
    assert isinstance(back, IsolationForestModel)
    np.testing.assert_allclose(back.raw_score(X), model.raw_score(X), atol=1e-15)
    assert back.threshold == model.threshold
    np.testing.assert_allclose(back.predict_proba(X), model.predict_proba(X), atol=1e-15)


# ----------------------------------------------------------------- MLP


def test_mlp_fit_and_round_trip():
    X, y = blob_data(seed=13)
    model, history = fit_mlp(
        X, y, hidden_sizes=(16,), cfg=TrainConfig(1e-2, max_epochs=40, seed=3)
    )
    acc = (model.predict(X) == y).mean()
    assert acc >= 0.95
    doc = json.loads(json.dumps(model.to_doc()))
    back = model_from_doc(doc)
    np.testing.assert_array_equal(back.predict_proba(X), model.predict_proba(X))


def censuslike_small(n=800, seed=0):
    from onshap.datasets import gen_censuslike_data

    ds = gen_censuslike_data(n_points=n, seed=seed)
    return ds.features, ds.labels, ds.extras["sensitive_column"]


def test_suppression_zero_alpha_equals_plain_finetune():
    X, y, sens = censuslike_small()
    base, _ = fit_mlp(X, y, hidden_sizes=(16,), cfg=TrainConfig(1e-2, max_epochs=10, seed=1))
    cfg = TrainConfig(1e-3, max_epochs=5, seed=2)
    tuned_zero, _ = suppress_feature_finetune(base, X, y, sens, alpha=0.0, cfg=cfg)

    # plain continued training with the identical schedule
    from onshap.nn import cross_entropy, forward_tensor, net_params, one_hot, train

    plain = base.copy()
    params = net_params(plain.net)
    train(
        params,
        lambda batch, rng: cross_entropy(forward_tensor(params, batch[0]), batch[1]),
        (X, one_hot(y, 2)),
        (X, one_hot(y, 2)),
        cfg,
    )
    for wa, wb in zip(tuned_zero.net.weights, plain.net.weights):
        np.testing.assert_array_equal(wa, wb)


def test_suppression_large_alpha_kills_finite_difference():
    X, y, sens = censuslike_small()
    base, _ = fit_mlp(X, y, hidden_sizes=(16,), cfg=TrainConfig(1e-2, max_epochs=20, seed=4))
    tuned, report = suppress_feature_finetune(
        base, X, y, sens, alpha=1e4, cfg=TrainConfig(3e-3, max_epochs=200, seed=5)
    )
    assert report.mean_abs_fd_after < 0.01
    assert report.mean_abs_fd_after < report.mean_abs_fd_before


def test_suppression_rejects_non_binary_feature():
    X, y, _ = censuslike_small()
    base, _ = fit_mlp(X, y, hidden_sizes=(8,), cfg=TrainConfig(1e-2, max_epochs=2, seed=0))
    with pytest.raises(DataError, match="binary"):
        suppress_feature_finetune(base, X, y, feature_index=0, alpha=1.0)
