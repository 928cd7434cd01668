from .base import Classifier
from .mlp import MlpClassifier, SuppressionReport, fit_mlp, suppress_feature_finetune
from .trees import (
    DecisionTreeModel,
    FlatTree,
    IsolationForestModel,
    RandomForestModel,
    TreeEnsembleClassifier,
    TreeNode,
    average_path_length,
    fit_decision_tree,
    fit_isolation_forest,
    fit_random_forest,
    model_from_doc,
)

__all__ = [
    "Classifier",
    "MlpClassifier",
    "SuppressionReport",
    "fit_mlp",
    "suppress_feature_finetune",
    "DecisionTreeModel",
    "FlatTree",
    "IsolationForestModel",
    "RandomForestModel",
    "TreeEnsembleClassifier",
    "TreeNode",
    "average_path_length",
    "fit_decision_tree",
    "fit_isolation_forest",
    "fit_random_forest",
    "model_from_doc",
]
