"""Value functions against exact 4-cell enumeration oracles, plus the
retraining game and its cache."""

from __future__ import annotations

import numpy as np
import pytest

from onshap.datasets import (
    DEFAULT_TWO_FEATURE_TABLE,
    ColumnSpec,
    Dataset,
    gen_two_feature_data,
    make_split,
)
from onshap.errors import DataError, InputShapeError
from onshap.models.base import Classifier
from onshap.valuefns import (
    EmpiricalConditionalVf,
    GenerativeVf,
    OffManifoldVf,
    RetrainingGame,
    SurrogateVf,
    VfConfig,
    masked_fill,
    off_manifold_vf,
    retraining_game,
    stochastic_draw_accuracy,
)

TABLE = DEFAULT_TWO_FEATURE_TABLE
CORNERS = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
CORNER_WEIGHTS = TABLE.sum(axis=2).reshape(-1)


class TableModel(Classifier):
    """Exact conditional rates of the generating table as a classifier."""

    kind = "table"

    def __init__(self, table=TABLE):
        self.n_features = 2
        self.n_classes = 2
        p_x = table.sum(axis=2)
        self.cond = table[:, :, 1] / p_x

    def _predict_proba(self, X):
        p1 = self.cond[X[:, 0].astype(int), X[:, 1].astype(int)]
        return np.column_stack([1.0 - p1, p1])


class TableImputer:
    """Draws from the exact table conditional p(x'|x_S), then overwrites
    in-coalition slots; stands in for a perfectly trained imputer."""

    n_features = 2

    def __init__(self, table=TABLE):
        self.p_x = table.sum(axis=2).reshape(-1)

    def sample_conditional_batch(self, X, masks, k, rng):
        out = np.empty((len(X), k, 2))
        for b, (x, m) in enumerate(zip(X, masks)):
            match = np.ones(4)
            for i in range(2):
                if m[i]:
                    match *= CORNERS[:, i] == x[i]
            w = self.p_x * match
            w = w / w.sum()
            draws = CORNERS[rng.choice(4, size=k, p=w)]
            draws[:, m] = x[m]
            out[b] = draws
        return out


def exact_conditional_value(x, mask, y=1):
    """Oracle: sum over table corners of p(x'|x_S) f_y(x')."""
    model = TableModel()
    match = np.ones(4)
    for i in range(2):
        if mask[i]:
            match *= CORNERS[:, i] == x[i]
    w = CORNER_WEIGHTS * match
    w = w / w.sum()
    return float(w @ model.predict_proba(CORNERS)[:, y])


# ------------------------------------------------------------ off-manifold


def test_off_manifold_full_coalition_is_model_output():
    ds = gen_two_feature_data(n_points=500, seed=1)
    model = TableModel()
    vf = off_manifold_vf(model, ds.features[3], 1, ds.features, VfConfig(seed=5))
    full = np.ones((1, 2), dtype=bool)
    assert vf.batch_evaluate(full)[0] == pytest.approx(model.prob_of(ds.features[3], 1))


def test_off_manifold_empty_coalition_exhaustive_is_background_mean():
    ds = gen_two_feature_data(n_points=300, seed=2)
    model = TableModel()
    fam = OffManifoldVf(model, ds.features, VfConfig(exhaustive_background=True))
    v = fam.bind(ds.features[0], 1).batch_evaluate(np.zeros((1, 2), dtype=bool))[0]
    assert v == pytest.approx(model.predict_proba(ds.features)[:, 1].mean(), abs=1e-12)


def test_off_manifold_exact_corner_enumeration():
    # x = (0, 1), y = 1, coalition {x1}: exhaustive weighted background
    # reduces to sum_x0 p(x0) p(y=1 | x0, x1=1)
    model = TableModel()
    fam = OffManifoldVf(
        model,
        CORNERS,
        VfConfig(exhaustive_background=True),
        background_weights=CORNER_WEIGHTS,
    )
    handle = fam.bind(np.array([0.0, 1.0]), 1)
    got = handle.batch_evaluate(np.array([[False, True]]))[0]
    p_x0 = TABLE.sum(axis=2).sum(axis=1)
    expected = p_x0 @ model.cond[:, 1]
    assert got == pytest.approx(expected, abs=1e-12)


def test_off_manifold_sampling_matches_exhaustive():
    ds = gen_two_feature_data(n_points=2_000, seed=3)
    model = TableModel()
    sampled = OffManifoldVf(model, ds.features, VfConfig(n_inner_samples=400, seed=1))
    exact = OffManifoldVf(model, ds.features, VfConfig(exhaustive_background=True))
    x, y = ds.features[5], 1
    masks = np.array([[True, False], [False, True], [False, False]])
    vs = sampled.bind(x, y).batch_evaluate(masks)
    ve = exact.bind(x, y).batch_evaluate(masks)
    np.testing.assert_allclose(vs, ve, atol=0.06)


def test_off_manifold_values_in_unit_interval():
    ds = gen_two_feature_data(n_points=200, seed=4)
    fam = OffManifoldVf(TableModel(), ds.features, VfConfig(seed=2))
    masks = np.array([[True, False]] * 50 + [[False, True]] * 50)
    X = np.repeat(ds.features[:2], 50, axis=0)
    vals = fam.evaluate(X, np.ones(100, dtype=int), masks)
    assert vals.min() >= 0.0 and vals.max() <= 1.0


def test_off_manifold_empty_background_rejected():
    with pytest.raises(DataError):
        OffManifoldVf(TableModel(), np.empty((0, 2)))


# ---------------------------------------------------- empirical conditional


def test_empirical_full_coalition_self_match():
    ds = gen_two_feature_data(n_points=400, seed=6)
    model = TableModel()
    fam = EmpiricalConditionalVf(model, ds.features)
    x = ds.features[7]
    v = fam.bind(x, 1).batch_evaluate(np.ones((1, 2), dtype=bool))[0]
    assert v == pytest.approx(model.prob_of(x, 1), abs=1e-12)


def test_empirical_empty_equals_off_manifold_empty():
    ds = gen_two_feature_data(n_points=400, seed=7)
    model = TableModel()
    emp = EmpiricalConditionalVf(model, ds.features)
    off = OffManifoldVf(model, ds.features, VfConfig(exhaustive_background=True))
    empty = np.zeros((1, 2), dtype=bool)
    x = ds.features[0]
    assert emp.bind(x, 1).batch_evaluate(empty)[0] == pytest.approx(
        off.bind(x, 1).batch_evaluate(empty)[0], abs=1e-12
    )


def test_empirical_matches_table_conditional():
    ds = gen_two_feature_data(n_points=30_000, seed=8)
    fam = EmpiricalConditionalVf(TableModel(), ds.features)
    for x in (np.array([0.0, 1.0]), np.array([1.0, 0.0])):
        for mask in (np.array([True, False]), np.array([False, True])):
            v = fam.bind(x, 1).batch_evaluate(mask[None])[0]
            assert abs(v - exact_conditional_value(x, mask)) < 0.02
    assert fam.fallback_count == 0


def test_empirical_fallback_hamming_nearest():
    bg = np.array([[0.0, 0.0], [1.0, 1.0]])
    model = TableModel()
    fam = EmpiricalConditionalVf(model, bg, warn_on_fallback=True)
    x = np.array([0.0, 1.0])  # absent from background
    with pytest.warns(UserWarning, match="Hamming"):
        v = fam.bind(x, 1).batch_evaluate(np.ones((1, 2), dtype=bool))[0]
    # both points miss by one coordinate: average of their predictions
    expected = model.predict_proba(bg)[:, 1].mean()
    assert v == pytest.approx(expected, abs=1e-12)
    assert fam.fallback_count == 1


def test_empirical_rejects_continuous_background():
    with pytest.raises(DataError, match="discrete"):
        EmpiricalConditionalVf(TableModel(), np.array([[0.5, 0.2]]))


def test_off_and_empirical_agree_on_independent_features():
    # product distribution: conditioning changes nothing
    rng = np.random.default_rng(9)
    bg = np.column_stack(
        [rng.integers(0, 2, 4000), rng.integers(0, 2, 4000), rng.integers(0, 2, 4000)]
    ).astype(float)

    class ThreeBitModel(Classifier):
        kind = "bits"
        n_features = 3
        n_classes = 2

        def _predict_proba(self, X):
            p1 = 0.2 + 0.5 * X[:, 0] * 0.8 + 0.2 * X[:, 1] - 0.1 * X[:, 2]
            p1 = np.clip(p1, 0, 1)
            return np.column_stack([1 - p1, p1])

    model = ThreeBitModel()
    emp = EmpiricalConditionalVf(model, bg)
    off = OffManifoldVf(model, bg, VfConfig(exhaustive_background=True))
    x = bg[0]
    masks = np.array(
        [[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=bool
    )
    ve = emp.bind(x, 1).batch_evaluate(masks)
    vo = off.bind(x, 1).batch_evaluate(masks)
    np.testing.assert_allclose(ve, vo, atol=0.05)


# ---------------------------------------------------------------- generative


def test_generative_full_coalition_overwrite():
    fam = GenerativeVf(TableModel(), TableImputer(), VfConfig(n_inner_samples=3, seed=0))
    x = np.array([1.0, 0.0])
    v = fam.bind(x, 1).batch_evaluate(np.ones((1, 2), dtype=bool))[0]
    assert v == pytest.approx(TableModel().prob_of(x, 1), abs=1e-12)


def test_generative_matches_exact_conditional_oracle():
    fam = GenerativeVf(TableModel(), TableImputer(), VfConfig(n_inner_samples=4000, seed=1))
    for x in (np.array([0.0, 1.0]), np.array([1.0, 1.0])):
        for mask in (
            np.array([True, False]),
            np.array([False, True]),
            np.array([False, False]),
        ):
            v = fam.bind(x, 1).batch_evaluate(mask[None])[0]
            assert abs(v - exact_conditional_value(x, mask)) < 0.05


def test_generative_values_in_unit_interval():
    fam = GenerativeVf(TableModel(), TableImputer(), VfConfig(n_inner_samples=50, seed=2))
    masks = np.array([[False, True], [True, False], [False, False], [True, True]])
    X = np.tile(np.array([1.0, 1.0]), (4, 1))
    vals = fam.evaluate(X, np.ones(4, dtype=int), masks)
    assert vals.min() >= 0.0 and vals.max() <= 1.0


def test_generative_schema_mismatch():
    class WideImputer:
        n_features = 5

    with pytest.raises(DataError, match="features"):
        GenerativeVf(TableModel(), WideImputer())


# ----------------------------------------------------------------- surrogate


class FakeSurrogate:
    """Deterministic stand-in: output depends on the masked input only."""

    n_features = 3

    def predict_masked(self, Xm):
        score = Xm.sum(axis=1)
        p1 = 1.0 / (1.0 + np.exp(-score))
        return np.column_stack([1 - p1, p1])


def test_surrogate_deterministic_and_idempotent():
    fam = SurrogateVf(FakeSurrogate())
    x = np.array([0.3, 0.8, 0.1])
    masks = np.array([[True, False, True]])
    v1 = fam.bind(x, 1).batch_evaluate(masks)[0]
    v2 = fam.bind(x, 1).batch_evaluate(masks)[0]
    assert v1 == v2
    # masking twice changes nothing
    xm = masked_fill(x[None], masks)[0]
    assert np.array_equal(masked_fill(xm[None], masks)[0], xm)


def test_surrogate_empty_coalition_constant_across_points():
    fam = SurrogateVf(FakeSurrogate())
    empty = np.zeros((1, 3), dtype=bool)
    va = fam.bind(np.array([0.1, 0.2, 0.3]), 0).batch_evaluate(empty)[0]
    vb = fam.bind(np.array([0.9, 0.8, 0.7]), 0).batch_evaluate(empty)[0]
    assert va == vb


# ------------------------------------------------------------ retraining game


def predictive_dataset(n=300, seed=0):
    rng = np.random.default_rng(seed)
    x0 = rng.integers(0, 2, n).astype(float)
    y = rng.integers(0, 2, n)
    x1 = y.astype(float)  # feature 1 fully determines the label
    X = np.column_stack([x0, x1])
    return Dataset(
        name="predictive",
        features=X,
        schema=[ColumnSpec("noise", "binary"), ColumnSpec("signal", "binary")],
        labels=y,
        split=make_split(n, seed),
    )


def test_retraining_empty_coalition_class_balance():
    ds = predictive_dataset()
    game = RetrainingGame(ds, seed=0, n_repeats=1)
    acc, se = game.accuracy(np.array([False, False]))
    _, test_y = ds.part("test")
    freqs = np.bincount(test_y) / len(test_y)
    assert acc == pytest.approx(float((freqs**2).sum()), abs=1e-12)
    assert se == 0.0


def test_retraining_fully_predictive_feature():
    ds = predictive_dataset()
    acc, _ = retraining_game(ds, np.array([False, True]), seed=0, n_repeats=1)
    assert acc == pytest.approx(1.0, abs=1e-9)


def test_retraining_full_beats_empty():
    ds = predictive_dataset(seed=3)
    game = RetrainingGame(ds, seed=0, n_repeats=3)
    empty_acc, _ = game.accuracy(np.array([False, False]))
    full_acc, full_se = game.accuracy(np.array([True, True]))
    assert full_acc >= empty_acc - 3 * full_se


def test_retraining_cache_avoids_refits(tmp_path):
    cache = str(tmp_path / "retrain.jsonl")
    ds = predictive_dataset(seed=4)
    masks = [np.array(m) for m in ([0, 0], [0, 1], [1, 0], [1, 1])]
    game1 = RetrainingGame(ds, cache_path=cache, seed=1, n_repeats=2)
    first = [game1.accuracy(m.astype(bool)) for m in masks]
    assert game1.n_fits == 6  # three nonempty coalitions, two repeats each

    game2 = RetrainingGame(ds, cache_path=cache, seed=1, n_repeats=2)
    second = [game2.accuracy(m.astype(bool)) for m in masks]
    assert game2.n_fits == 0
    assert first == second


def test_retraining_cache_keyed_by_dataset(tmp_path):
    cache = str(tmp_path / "retrain.jsonl")
    game1 = RetrainingGame(predictive_dataset(seed=5), cache_path=cache, seed=0, n_repeats=1)
    game1.accuracy(np.array([True, False]))
    assert game1.n_fits == 1
    # different data, same cache file: no false sharing
    game2 = RetrainingGame(predictive_dataset(seed=6), cache_path=cache, seed=0, n_repeats=1)
    game2.accuracy(np.array([True, False]))
    assert game2.n_fits == 1


def test_stochastic_draw_accuracy_definition():
    model = TableModel()
    X = CORNERS[:2]
    y = np.array([1, 0])
    probs = model.predict_proba(X)
    expected = (probs[0, 1] + probs[1, 0]) / 2
    assert stochastic_draw_accuracy(model, X, y) == pytest.approx(expected)


def test_vfconfig_validation():
    with pytest.raises(ValueError):
        VfConfig(n_inner_samples=0)
