"""Metrics tests: hand-enumerated MSE, top-k error-rate edge cases,
agreement statistics, and the concentration coefficient."""

from __future__ import annotations

import numpy as np
import pytest

from onshap.datasets import gen_two_feature_data
from onshap.errors import DataError, InputShapeError
from onshap.metrics import (
    AgreementReport,
    MseReport,
    attribution_agreement,
    explanation_error_rate,
    gini_coefficient,
    mse_table_csv,
    value_function_mse,
)
from onshap.models.base import Classifier
from onshap.shapley import Attribution
from onshap.valuefns import OffManifoldVf, VfConfig


class OneFeatureModel(Classifier):
    kind = "one"
    n_features = 1
    n_classes = 2

    def _predict_proba(self, X):
        p1 = 0.2 + 0.6 * X[:, 0]
        return np.column_stack([1.0 - p1, p1])


class TableModel(Classifier):
    kind = "table"

    def __init__(self, cond):
        self.n_features = 2
        self.n_classes = 2
        self.cond = np.asarray(cond)

    def _predict_proba(self, X):
        p1 = self.cond[X[:, 0].astype(int), X[:, 1].astype(int)]
        return np.column_stack([1.0 - p1, p1])


def attribution(values, std_errors=None, names=None):
    values = np.asarray(values, dtype=np.float64)
    se = np.zeros_like(values) if std_errors is None else np.asarray(std_errors)
    return Attribution(
        values=values,
        std_errors=se,
        n_samples=1,
        scope="local",
        value_function_id="test",
        sum_rule_residual=0.0,
        mean_full_value=0.0,
        mean_empty_value=0.0,
        feature_names=names,
    )


# ------------------------------------------------------------------- MSE


def test_mse_single_feature_matches_hand_enumeration():
    # x = 1 twice as frequent as x = 0; only the empty coalition has weight,
    # so the weighted sum is (1/3)(0.4^2) + (2/3)(0.2^2) = 0.08 for either y
    data = np.array([[0.0], [1.0], [1.0]])
    model = OneFeatureModel()
    family = OffManifoldVf(model, data, VfConfig(exhaustive_background=True))
    report = value_function_mse(model, family, data, n_samples=20_000, seed=1)
    assert abs(report.mse - 0.08) < 4 * max(report.std_error, 1e-12)
    assert report.method_id == family.vf_id


def test_mse_cheating_oracle_is_zero():
    class CheatFamily:
        vf_id = "cheat"

        def evaluate(self, X, Y, masks):
            return OneFeatureModel().prob_of(X, Y)

    data = np.array([[0.0], [1.0]])
    report = value_function_mse(OneFeatureModel(), CheatFamily(), data, 500, seed=0)
    assert report.mse == 0.0
    assert report.std_error == 0.0


def test_mse_accepts_factory_for_reproducibility():
    data = np.array([[0.0], [1.0], [1.0]])
    model = OneFeatureModel()

    def factory():
        return OffManifoldVf(model, data, VfConfig(n_inner_samples=8, seed=3))

    a = value_function_mse(model, factory, data, 2_000, seed=5)
    b = value_function_mse(model, factory, data, 2_000, seed=5)
    assert a.mse == b.mse and a.std_error == b.std_error


def test_mse_invariant_under_consistent_feature_permutation():
    ds = gen_two_feature_data(n_points=4_000, seed=2)
    X = ds.features
    cond = ds.extras["table"][:, :, 1] / ds.extras["table"].sum(axis=2)
    m1, m2 = TableModel(cond), TableModel(cond.T)
    f1 = OffManifoldVf(m1, X, VfConfig(exhaustive_background=True))
    f2 = OffManifoldVf(m2, X[:, ::-1].copy(), VfConfig(exhaustive_background=True))
    r1 = value_function_mse(m1, f1, X, 30_000, seed=7)
    r2 = value_function_mse(m2, f2, X[:, ::-1].copy(), 30_000, seed=8)
    tol = 4 * np.hypot(r1.std_error, r2.std_error)
    assert abs(r1.mse - r2.mse) < tol


def test_mse_rejects_empty_data_and_tiny_sample():
    model = OneFeatureModel()
    fam = OffManifoldVf(model, np.array([[0.0]]), VfConfig())
    with pytest.raises(DataError):
        value_function_mse(model, fam, np.empty((0, 1)), 100)
    with pytest.raises(ValueError):
        value_function_mse(model, fam, np.array([[0.0]]), 1)


def test_mse_report_validation_and_csv():
    with pytest.raises(ValueError):
        MseReport(-0.1, 0.0, 10, "m")
    with pytest.raises(ValueError):
        MseReport(0.1, -0.5, 10, "m")
    reports = [
        MseReport(0.0634, 0.0, 1000, "off-manifold", "drug"),
        MseReport(0.0436, 0.0001, 1000, "empirical", "drug"),
    ]
    csv = mse_table_csv(reports)
    lines = csv.strip().split("\n")
    assert lines[0] == "dataset,method,mse,std_error"
    assert lines[1] == "drug,off-manifold,0.0634,0"
    assert len(lines) == 3


# ------------------------------------------------------------- error rate


def test_error_rate_indicator_is_zero():
    attrs = [attribution([0.0, 1.0, 1.0, 0.0])] * 3
    assert explanation_error_rate(attrs, {1, 2}) == 0.0


def test_error_rate_reversed_is_one():
    attrs = [attribution([1.0, 0.5, 0.1, 0.0])]
    assert explanation_error_rate(attrs, {2, 3}) == 1.0


def test_error_rate_mixed_fraction():
    good = attribution([0.9, 0.8, 0.0])
    bad = attribution([0.9, 0.0, 0.8])
    assert explanation_error_rate([good, bad, good, bad], {0, 1}) == 0.5


def test_error_rate_boundary_tie_counts_as_error():
    # features 1 and 2 tie at the k = 1 boundary: top-1 not well defined
    attrs = [attribution([0.0, 0.7, 0.7])]
    assert explanation_error_rate(attrs, {1}) == 1.0
    # a tie strictly inside the top-k is fine
    attrs = [attribution([0.7, 0.7, 0.0])]
    assert explanation_error_rate(attrs, {0, 1}) == 0.0


def test_error_rate_invariant_to_positive_rescaling():
    attrs = [attribution([0.3, -0.1, 0.6, 0.2])]
    scaled = [attribution([0.3 * 5 + 2, -0.1 * 5 + 2, 0.6 * 5 + 2, 0.2 * 5 + 2])]
    for truth in ({2}, {0, 2}, {0, 2, 3}):
        assert explanation_error_rate(attrs, truth) == explanation_error_rate(
            scaled, truth
        )


def test_error_rate_errors():
    with pytest.raises(DataError):
        explanation_error_rate([], {0})
    with pytest.raises(DataError):
        explanation_error_rate([attribution([1.0, 0.0])], set())
    with pytest.raises(InputShapeError):
        explanation_error_rate([attribution([1.0, 0.0])], {5})


# -------------------------------------------------------------- agreement


def test_agreement_identical():
    a = attribution([0.2, -0.1, 0.4], [0.01, 0.01, 0.01])
    rep = attribution_agreement(a, a)
    assert rep.spearman_rho == 1.0
    assert rep.max_abs_diff == 0.0
    assert rep.within_error_bars == 1.0


def test_agreement_negated():
    a = attribution([0.2, -0.1, 0.4])
    b = attribution([-0.2, 0.1, -0.4])
    rep = attribution_agreement(a, b)
    assert rep.spearman_rho == pytest.approx(-1.0)


def test_agreement_error_bar_fraction():
    a = attribution([0.0, 0.0, 0.0], [0.01, 0.01, 0.01])
    b = attribution([0.02, 0.5, 0.01], [0.01, 0.01, 0.01])
    # combined 3-sigma bar = 3 * sqrt(2) * 0.01 = 0.0424; middle feature out
    rep = attribution_agreement(a, b)
    assert rep.within_error_bars == pytest.approx(2 / 3)
    assert rep.max_abs_diff == pytest.approx(0.5)


def test_agreement_constant_identical_vectors():
    a = attribution([0.5, 0.5, 0.5])
    rep = attribution_agreement(a, attribution([0.5, 0.5, 0.5]))
    assert rep.spearman_rho == 1.0


def test_agreement_mismatches_raise():
    with pytest.raises(InputShapeError):
        attribution_agreement(attribution([1.0]), attribution([1.0, 2.0]))
    a = attribution([1.0, 2.0], names=["a", "b"])
    b = attribution([1.0, 2.0], names=["a", "c"])
    with pytest.raises(InputShapeError):
        attribution_agreement(a, b)


# ------------------------------------------------------------ concentration


def test_gini_uniform_is_zero():
    assert gini_coefficient(np.ones(7)) == pytest.approx(0.0, abs=1e-12)


def test_gini_one_hot():
    v = np.zeros(4)
    v[2] = 5.0
    assert gini_coefficient(v) == pytest.approx(3 / 4)


def test_gini_hand_value():
    # sorted (1,2,3,4): sum (2i-n-1) v_i = -3-2+3+12 = 10; 10 / (4*10) = 0.25
    assert gini_coefficient(np.array([4.0, 1.0, 3.0, 2.0])) == pytest.approx(0.25)


def test_gini_scale_and_sign_invariant():
    v = np.array([0.3, -0.7, 0.1, 0.9])
    assert gini_coefficient(v) == pytest.approx(gini_coefficient(10 * v))
    assert gini_coefficient(v) == pytest.approx(gini_coefficient(np.abs(v)))


def test_gini_zero_vector_and_shape_errors():
    assert gini_coefficient(np.zeros(3)) == 0.0
    with pytest.raises(InputShapeError):
        gini_coefficient(np.empty(0))


def test_agreement_constant_vs_nonconstant_is_nan():
    rep = attribution_agreement(attribution([0.5, 0.5]), attribution([0.1, 0.9]))
    assert np.isnan(rep.spearman_rho)
