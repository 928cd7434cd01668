"""Explanation entry points shared by the CLI.

Builds a value-function family from a method name plus the artifacts it
needs, then produces a local or global attribution. Methods that depend
on a trained auxiliary model fail with an error naming the missing
artifact. Every attribution returned here has passed its sum-rule check.
"""

from __future__ import annotations

import numpy as np

from ..datasets import Dataset
from ..errors import DataError
from ..shapley import Attribution, shapley_global, shapley_mc
from ..valuefns import (
    EmpiricalConditionalVf,
    GenerativeVf,
    OffManifoldVf,
    SurrogateVf,
    VfConfig,
)
from .recipes import derived_seed, require_sum_rule

METHOD_IDS = ("off", "empirical", "supervised", "unsupervised")

# Replacement values for "off" come from the data the model saw; the
# empirical conditional needs held-out rows so x' != x almost surely.
_BACKGROUND_PART = {"off": "train", "empirical": "test"}


def build_family(
    method: str,
    model,
    background: np.ndarray | None = None,
    imputer=None,
    surrogate=None,
    seed: int = 0,
):
    """A value-function family for one method name.

    background: replacement-draw rows (methods "off" and "empirical").
    imputer: trained conditional imputer (method "unsupervised").
    surrogate: trained masked surrogate (method "supervised").
    """
    if method == "off":
        if background is None:
            raise DataError("method 'off' needs background data for replacement draws")
        return OffManifoldVf(model, background, VfConfig(seed=seed))
    if method == "empirical":
        if background is None:
            raise DataError("method 'empirical' needs background data to condition on")
        return EmpiricalConditionalVf(model, background, warn_on_fallback=False)
    if method == "supervised":
        if surrogate is None:
            raise DataError(
                "method 'supervised' needs a trained surrogate artifact "
                "(surrogate.json from 'surrogate train'); pass --surrogate <path>"
            )
        return SurrogateVf(surrogate)
    if method == "unsupervised":
        if imputer is None:
            raise DataError(
                "method 'unsupervised' needs a trained conditional imputer artifact "
                "(imputer.json from 'imputer train'); pass --imputer <path>"
            )
        return GenerativeVf(model, imputer, VfConfig(seed=seed))
    raise DataError(f"unknown method {method!r}; expected one of {METHOD_IDS}")


def _family_for(method, model, data: Dataset, imputer, surrogate, seed):
    background = None
    part = _BACKGROUND_PART.get(method)
    if part is not None:
        background, _ = data.part(part)
    return build_family(
        method,
        model,
        background=background,
        imputer=imputer,
        surrogate=surrogate,
        seed=derived_seed(seed, "vf", method),
    )


def local_attribution(
    model,
    data: Dataset,
    method: str,
    point_index: int,
    n_samples: int = 2000,
    seed: int = 0,
    class_index: int | None = None,
    imputer=None,
    surrogate=None,
    part: str = "test",
    antithetic: bool = True,
    chunk_rows: int = 1 << 16,
) -> Attribution:
    """Per-feature Shapley values for one point; class defaults to the
    model's prediction on that point."""
    X_part, _ = data.part(part)
    if not 0 <= point_index < len(X_part):
        raise DataError(
            f"point_index {point_index} out of range for the {part} part "
            f"({len(X_part)} points)"
        )
    x = X_part[point_index]
    y = int(model.predict(x)) if class_index is None else int(class_index)
    if not 0 <= y < model.n_classes:
        raise DataError(f"class index {y} out of range for a {model.n_classes}-class model")
    family = _family_for(method, model, data, imputer, surrogate, seed)
    att = shapley_mc(
        family.bind(x, y),
        data.n_features,
        n_samples,
        seed=derived_seed(seed, "mc", method, part, point_index),
        antithetic=antithetic,
        chunk_rows=chunk_rows,
    )
    att.feature_names = data.feature_names
    return require_sum_rule(att)


def global_attribution(
    model,
    data: Dataset,
    method: str,
    n_samples: int = 10_000,
    seed: int = 0,
    imputer=None,
    surrogate=None,
    part: str = "test",
    chunk_rows: int = 1 << 18,
) -> Attribution:
    """Expected local Shapley values over the labeled part of the data."""
    X_part, y_part = data.part(part)
    if y_part is None:
        raise DataError("global attributions need labeled data")
    family = _family_for(method, model, data, imputer, surrogate, seed)
    att = shapley_global(
        family,
        X_part,
        y_part,
        n_samples,
        derived_seed(seed, "mc", method, part),
        chunk_rows=chunk_rows,
    )
    att.feature_names = data.feature_names
    return require_sum_rule(att)
