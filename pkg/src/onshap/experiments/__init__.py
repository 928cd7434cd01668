"""Reproducible experiment recipes, plots, and dataset references."""

from .analytic import (
    AnalyticConditionalVf,
    analytic_conditional_vf_for_synthetic,
    outlier_component_log_priors,
    outlier_component_means,
    outlier_component_posterior,
)
from .plots import save_bar_chart, save_curve, save_heatmap_row
from .recipes import (
    MANIFEST_FORMAT,
    MANIFEST_NAME,
    RECIPE_NAMES,
    STUDY_OPTIMA,
    ExperimentRecipe,
    Stage,
    default_stages,
    derived_seed,
    make_recipe,
    recipe_from_doc,
    require_sum_rule,
    run_recipe,
)
from .store import (
    DATASET_BUILDERS,
    bundled_digits_dataset,
    dataset_from_ref,
    dataset_ref_doc,
    load_dataset_ref,
    make_dataset,
    write_dataset_ref,
)

__all__ = [
    "AnalyticConditionalVf",
    "analytic_conditional_vf_for_synthetic",
    "outlier_component_log_priors",
    "outlier_component_means",
    "outlier_component_posterior",
    "save_bar_chart",
    "save_curve",
    "save_heatmap_row",
    "MANIFEST_FORMAT",
    "MANIFEST_NAME",
    "RECIPE_NAMES",
    "STUDY_OPTIMA",
    "ExperimentRecipe",
    "Stage",
    "default_stages",
    "derived_seed",
    "make_recipe",
    "recipe_from_doc",
    "require_sum_rule",
    "run_recipe",
    "DATASET_BUILDERS",
    "bundled_digits_dataset",
    "dataset_from_ref",
    "dataset_ref_doc",
    "load_dataset_ref",
    "make_dataset",
    "write_dataset_ref",
]
