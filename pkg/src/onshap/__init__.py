"""Shapley feature attribution with off- and on-manifold value functions.

Local and global Shapley values for classifiers under four value functions:
marginal-background splicing (off-manifold), empirical conditionals on a
finite table, a supervised masked surrogate, and a generative conditional
imputer.  Includes exact enumeration, antithetic permutation sampling,
evaluation metrics, dataset generators and loaders, and a CLI
(`onshap --help`) that drives end-to-end experiment recipes.
"""

from .datasets import (
    ColumnSpec,
    Dataset,
    OutlierGenConfig,
    Split,
    gen_censuslike_data,
    gen_outlier_data,
    gen_two_feature_data,
    load_abalone,
    load_binary_mnist,
    load_census,
    load_drug,
    make_split,
)
from .errors import (
    DataError,
    InputShapeError,
    NumericError,
    OnshapError,
    SchemaError,
    TrainingError,
)
from .imputer import ImputerHyper, ImputerModel, train_imputer
from .metrics import (
    AgreementReport,
    MseReport,
    attribution_agreement,
    explanation_error_rate,
    gini_coefficient,
    value_function_mse,
)
from .models import (
    Classifier,
    IsolationForestModel,
    MlpClassifier,
    RandomForestModel,
    fit_isolation_forest,
    fit_mlp,
    fit_random_forest,
    model_from_doc,
    suppress_feature_finetune,
)
from .shapley import (
    Attribution,
    FunctionHandle,
    SummandCurve,
    SumRuleReport,
    shapley_exact,
    shapley_global,
    shapley_mc,
    sum_rule_check,
    summand_by_coalition_size,
)
from .surrogate import SurrogateHyper, SurrogateModel, train_surrogate
from .valuefns import (
    EmpiricalConditionalVf,
    GenerativeVf,
    OffManifoldVf,
    RetrainingGame,
    SurrogateVf,
    VfConfig,
    empirical_conditional_vf,
    generative_vf,
    off_manifold_vf,
    surrogate_vf,
)

__version__ = "0.1.0"

__all__ = [
    "AgreementReport",
    "Attribution",
    "Classifier",
    "ColumnSpec",
    "DataError",
    "Dataset",
    "EmpiricalConditionalVf",
    "FunctionHandle",
    "GenerativeVf",
    "ImputerHyper",
    "ImputerModel",
    "InputShapeError",
    "IsolationForestModel",
    "MlpClassifier",
    "MseReport",
    "NumericError",
    "OffManifoldVf",
    "OnshapError",
    "OutlierGenConfig",
    "RandomForestModel",
    "RetrainingGame",
    "SchemaError",
    "Split",
    "SumRuleReport",
    "SummandCurve",
    "SurrogateHyper",
    "SurrogateModel",
    "SurrogateVf",
    "TrainingError",
    "VfConfig",
    "attribution_agreement",
    "empirical_conditional_vf",
    "explanation_error_rate",
    "fit_isolation_forest",
    "fit_mlp",
    "fit_random_forest",
    "gen_censuslike_data",
    "gen_outlier_data",
    "gen_two_feature_data",
    "generative_vf",
    "gini_coefficient",
    "load_abalone",
    "load_binary_mnist",
    "load_census",
    "load_drug",
    "make_split",
    "model_from_doc",
    "off_manifold_vf",
    "shapley_exact",
    "shapley_global",
    "shapley_mc",
    "sum_rule_check",
    "summand_by_coalition_size",
    "suppress_feature_finetune",
    "surrogate_vf",
    "train_imputer",
    "train_surrogate",
    "value_function_mse",
]
