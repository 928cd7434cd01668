"""Decision trees, random forests, isolation forests.

Fitting delegates to scikit-learn (CART with Gini splitting, bagging,
and subsampled isolation trees); the fitted trees are exported into a
local flat-array form that this module traverses itself, so serialized
models reload and evaluate without scikit-learn objects. Exported
predictions are tested to match the fitting library exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import IsolationForest, RandomForestClassifier
from sklearn.tree import DecisionTreeClassifier

from ..errors import DataError, SchemaError
from ..serialize import check_envelope, envelope
from .base import Classifier


@dataclass
class TreeNode:
    """Nested-node view of one tree, used for serialization.

    Internal nodes carry split_feature/split_threshold and two children;
    leaves carry leaf_value (class counts for classifier trees, the
    training sample count for isolation trees).
    """

    split_feature: int = -1
    split_threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    leaf_value: np.ndarray | float | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def __post_init__(self):
        has_children = (self.left is not None) + (self.right is not None)
        if has_children == 1:
            raise ValueError("internal nodes need exactly two children")
        if has_children == 0 and self.leaf_value is None:
            raise ValueError("leaves need a leaf_value")


class FlatTree:
    """Array-of-nodes tree with vectorized routing.

    feature[i] < 0 marks a leaf. Points go left when
    x[feature] <= threshold, matching the fitting library.
    """

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)

    @classmethod
    def from_sklearn(cls, tree_, value: np.ndarray) -> "FlatTree":
        return cls(tree_.feature, tree_.threshold, tree_.children_left, tree_.children_right, value)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index for every row."""
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            cur = node[rows]
            feats = self.feature[cur]
            go_left = X[rows, feats] <= self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
            active[rows] = self.feature[node[rows]] >= 0
        return node

    def depths(self) -> np.ndarray:
        """Edge count from the root per node."""
        d = np.zeros(len(self.feature), dtype=np.int64)
        stack = [0]
        while stack:
            i = stack.pop()
            if self.feature[i] >= 0:
                for child in (self.left[i], self.right[i]):
                    d[child] = d[i] + 1
                    stack.append(int(child))
        return d

    def to_nested(self, i: int = 0) -> TreeNode:
        if self.feature[i] < 0:
            val = self.value[i]
            return TreeNode(leaf_value=val.copy() if val.ndim else float(val))
        return TreeNode(
            split_feature=int(self.feature[i]),
            split_threshold=float(self.threshold[i]),
            left=self.to_nested(int(self.left[i])),
            right=self.to_nested(int(self.right[i])),
        )

    @classmethod
    def from_nested(cls, root: TreeNode, value_width: int) -> "FlatTree":
        feature, threshold, left, right, value = [], [], [], [], []

        def add(node: TreeNode) -> int:
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(np.zeros(value_width) if value_width else 0.0)
            if node.is_leaf:
                value[i] = (
                    np.asarray(node.leaf_value, dtype=float)
                    if value_width
                    else float(node.leaf_value)
                )
            else:
                feature[i] = node.split_feature
                threshold[i] = node.split_threshold
                left[i] = add(node.left)
                right[i] = add(node.right)
            return i

        add(root)
        return cls(feature, threshold, left, right, value)


def _node_to_doc(node: TreeNode) -> dict:
    if node.is_leaf:
        val = node.leaf_value
        return {"value": val.tolist() if isinstance(val, np.ndarray) else val}
    return {
        "feature": node.split_feature,
        "threshold": node.split_threshold,
        "left": _node_to_doc(node.left),
        "right": _node_to_doc(node.right),
    }


def _node_from_doc(doc: dict) -> TreeNode:
    if "value" in doc:
        val = doc["value"]
        return TreeNode(leaf_value=np.asarray(val, dtype=float) if isinstance(val, list) else val)
    return TreeNode(
        split_feature=int(doc["feature"]),
        split_threshold=float(doc["threshold"]),
        left=_node_from_doc(doc["left"]),
        right=_node_from_doc(doc["right"]),
    )


class TreeEnsembleClassifier(Classifier):
    """Shared behavior of single trees and random forests: per-tree leaf
    class counts normalize to probabilities, trees average."""

    def __init__(self, trees: list[FlatTree], classes: np.ndarray, n_features: int):
        if not trees:
            raise ValueError("ensemble needs at least one tree")
        self.trees = trees
        self.classes = np.asarray(classes, dtype=int)
        self.n_features = int(n_features)
        self.n_classes = len(self.classes)

    def _predict_proba(self, X: np.ndarray) -> np.ndarray:
        total = np.zeros((len(X), self.n_classes))
        for tree in self.trees:
            counts = tree.value[tree.apply(X)]
            total += counts / counts.sum(axis=1, keepdims=True)
        return total / len(self.trees)

    def to_doc(self) -> dict:
        return envelope(
            "tree-ensemble",
            1,
            {
                "kind": self.kind,
                "n_features": self.n_features,
                "classes": self.classes.tolist(),
                "trees": [_node_to_doc(t.to_nested()) for t in self.trees],
            },
        )

    @classmethod
    def from_doc(cls, doc: dict) -> "TreeEnsembleClassifier":
        check_envelope(doc, "tree-ensemble", 1)
        classes = np.asarray(doc["classes"], dtype=int)
        trees = [
            FlatTree.from_nested(_node_from_doc(d), value_width=len(classes))
            for d in doc["trees"]
        ]
        kind = doc.get("kind", "random_forest")
        klass = DecisionTreeModel if kind == "decision_tree" else RandomForestModel
        return klass(trees, classes, doc["n_features"])


class DecisionTreeModel(TreeEnsembleClassifier):
    kind = "decision_tree"


class RandomForestModel(TreeEnsembleClassifier):
    kind = "random_forest"


def _class_counts(tree_) -> np.ndarray:
    """Per-node class counts; the fitted tree stores fractions."""
    return tree_.value[:, 0, :] * tree_.weighted_n_node_samples[:, None]


def _check_labeled(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if len(X) == 0:
        raise DataError("cannot fit a model on empty data")
    if len(X) != len(y):
        raise DataError(f"X has {len(X)} rows, y has {len(y)}")
    return X, y


def fit_decision_tree(X, y, seed: int = 0, max_depth: int | None = None) -> DecisionTreeModel:
    X, y = _check_labeled(X, y)
    sk = DecisionTreeClassifier(criterion="gini", max_depth=max_depth, random_state=seed)
    sk.fit(X, y)
    tree = FlatTree.from_sklearn(sk.tree_, _class_counts(sk.tree_))
    return DecisionTreeModel([tree], sk.classes_, X.shape[1])


def fit_random_forest(
    X,
    y,
    n_trees: int = 100,
    max_features_mode: str = "all",
    seed: int = 0,
    max_depth: int | None = None,
) -> RandomForestModel:
    """Bagged CART trees with Gini splitting; "all" considers every
    feature at each split."""
    X, y = _check_labeled(X, y)
    if max_features_mode not in ("all", "sqrt"):
        raise ValueError(f"max_features_mode must be 'all' or 'sqrt', got {max_features_mode!r}")
    sk = RandomForestClassifier(
        n_estimators=n_trees,
        criterion="gini",
        max_features=None if max_features_mode == "all" else "sqrt",
        max_depth=max_depth,
        random_state=seed,
        n_jobs=1,
    )
    sk.fit(X, y)
    trees = [FlatTree.from_sklearn(est.tree_, _class_counts(est.tree_)) for est in sk.estimators_]
    return RandomForestModel(trees, sk.classes_, X.shape[1])


# --------------------------------------------------------------------------
# Isolation forest
# --------------------------------------------------------------------------


def average_path_length(n: np.ndarray | int) -> np.ndarray:
    """Expected unsuccessful-search path length c(n) in a binary tree."""
    n = np.atleast_1d(np.asarray(n, dtype=float))
    out = np.zeros_like(n)
    mask2 = n == 2
    big = n > 2
    out[mask2] = 1.0
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + np.euler_gamma) - 2.0 * (nb - 1.0) / nb
    return out


class IsolationForestModel(Classifier):
    """Isolation forest with 2-class probability semantics.

    raw_score is the anomaly score minus 1/2, so positive means outlier.
    calibrate_threshold shifts the decision boundary so that a chosen
    fraction of the calibration scores falls on the outlier side;
    predict applies that shifted boundary. predict_proba maps raw scores
    affinely to [0, 1] using the min/max observed at fit time.
    """

    kind = "isolation_forest"

    def __init__(
        self,
        trees: list[FlatTree],
        n_features: int,
        subsample_size: int,
        score_min: float = 0.0,
        score_max: float = 1.0,
        threshold: float = 0.0,
    ):
        self.trees = trees
        self.n_features = int(n_features)
        self.n_classes = 2
        self.subsample_size = int(subsample_size)
        self.score_min = float(score_min)
        self.score_max = float(score_max)
        self.threshold = float(threshold)
        self._leaf_depths = [t.depths() for t in self.trees]

    def raw_score(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        depth_total = np.zeros(len(X))
        for tree, node_depth in zip(self.trees, self._leaf_depths):
            leaves = tree.apply(X)
            # unsplit leaf samples contribute their expected subtree depth
            depth_total += node_depth[leaves] + average_path_length(tree.value[leaves])
        mean_depth = depth_total / len(self.trees)
        denom = average_path_length(self.subsample_size)[0]
        score = 2.0 ** (-mean_depth / denom) - 0.5
        return float(score[0]) if single else score

    def calibrated_score(self, X) -> np.ndarray:
        return self.raw_score(X) - self.threshold

    def calibrate_threshold(self, X, outlier_fraction: float) -> float:
        """Place the boundary between the order statistics around the
        target split of the calibration scores; returns the threshold."""
        scores = np.sort(self.raw_score(X))
        k = int(round((1.0 - outlier_fraction) * len(scores)))
        k = min(max(k, 1), len(scores) - 1)
        self.threshold = float(0.5 * (scores[k - 1] + scores[k]))
        return self.threshold

    def _predict_proba(self, X: np.ndarray) -> np.ndarray:
        span = self.score_max - self.score_min
        if span <= 0:
            p_out = np.full(len(X), 0.5)
        else:
            p_out = np.clip((self.raw_score(X) - self.score_min) / span, 0.0, 1.0)
        return np.column_stack([1.0 - p_out, p_out])

    def predict(self, X) -> np.ndarray:
        X, single = self._validate(X)
        labels = (self.raw_score(X) > self.threshold).astype(int)
        return labels[0] if single else labels

    def to_doc(self) -> dict:
        return envelope(
            "isolation-forest",
            1,
            {
                "n_features": self.n_features,
                "subsample_size": self.subsample_size,
                "score_min": self.score_min,
                "score_max": self.score_max,
                "threshold": self.threshold,
                "trees": [_node_to_doc(t.to_nested()) for t in self.trees],
            },
        )

    @classmethod
    def from_doc(cls, doc: dict) -> "IsolationForestModel":
        check_envelope(doc, "isolation-forest", 1)
        trees = [FlatTree.from_nested(_node_from_doc(d), value_width=0) for d in doc["trees"]]
        return cls(
            trees,
            doc["n_features"],
            doc["subsample_size"],
            doc["score_min"],
            doc["score_max"],
            doc["threshold"],
        )


def fit_isolation_forest(
    X, n_trees: int = 100, subsample_size: int = 256, seed: int = 0
) -> IsolationForestModel:
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise DataError("cannot fit a model on empty data")
    if subsample_size > len(X):
        warnings.warn(
            f"subsample_size {subsample_size} exceeds dataset size {len(X)}; clamping",
            stacklevel=2,
        )
        subsample_size = len(X)
    sk = IsolationForest(
        n_estimators=n_trees,
        max_samples=subsample_size,
        contamination="auto",
        random_state=seed,
    )
    sk.fit(X)
    trees = [
        FlatTree.from_sklearn(est.tree_, est.tree_.n_node_samples.astype(float))
        for est in sk.estimators_
    ]
    model = IsolationForestModel(trees, X.shape[1], subsample_size)
    scores = model.raw_score(X)
    model.score_min = float(scores.min())
    model.score_max = float(scores.max())
    return model


def model_from_doc(doc: dict) -> Classifier:
    """Dispatch a serialized model document to its loader."""
    fmt = doc.get("format")
    if fmt == "tree-ensemble":
        return TreeEnsembleClassifier.from_doc(doc)
    if fmt == "isolation-forest":
        return IsolationForestModel.from_doc(doc)
    if fmt == "mlp-classifier":
        from .mlp import MlpClassifier

        return MlpClassifier.from_doc(doc)
    raise SchemaError(f"unknown model format {fmt!r}")
