"""Imputer tests: KL oracles, finite-difference gradients, and conditional
sampling checked against the exact generating distributions."""

from __future__ import annotations

import json

import numpy as np
import pytest
from scipy.stats import wasserstein_distance

from onshap.datasets import (
    ColumnSpec,
    OutlierGenConfig,
    gen_outlier_data,
    gen_two_feature_data,
)
from onshap.errors import DataError, InputShapeError, NumericError
from onshap.imputer import (
    ImputerHyper,
    ImputerModel,
    _elbo_batch,
    _kl_diag,
    _kl_to_standard,
    default_imputer_grid,
    elbo_loss,
    sample_conditional,
    train_imputer,
)
from onshap.nn.autodiff import Tensor
from onshap.nn.net import init_dense_net, net_params
from onshap.nn.train import finite_difference_check


def tiny_imputer(schema, latent_dim=2, n_modes=1, hidden=8, beta=0.5, seed=0):
    n = len(schema)
    width = sum(c.n_categories if c.kind == "categorical" else 1 for c in schema)
    rng = np.random.default_rng(seed)
    nets = [
        init_dense_net([n, hidden, hidden, 2 * latent_dim], seed=int(rng.integers(1 << 30))),
        init_dense_net([latent_dim, hidden, hidden, width], seed=int(rng.integers(1 << 30))),
        init_dense_net(
            [n, hidden, hidden, n_modes * (2 * latent_dim + 1)],
            seed=int(rng.integers(1 << 30)),
        ),
    ]
    return ImputerModel(nets[0], nets[1], nets[2], list(schema), latent_dim, n_modes, beta)


BINARY2 = [ColumnSpec("x0", "binary"), ColumnSpec("x1", "binary")]
MIXED3 = [
    ColumnSpec("c", "continuous"),
    ColumnSpec("b", "binary"),
    ColumnSpec("k", "categorical", n_categories=3),
]


# ------------------------------------------------------------- KL oracles


def mc_kl_oracle(mu1, s1, mu2, s2, n=100_000, seed=0):
    """KL by Monte Carlo: E_{z~N(mu1,s1)}[log N(z;mu1,s1) - log N(z;mu2,s2)]."""
    rng = np.random.default_rng(seed)
    z = mu1 + s1 * rng.standard_normal((n, len(mu1)))

    def logpdf(z, mu, s):
        return (-0.5 * ((z - mu) / s) ** 2 - np.log(s) - 0.5 * np.log(2 * np.pi)).sum(1)

    return float(np.mean(logpdf(z, mu1, s1) - logpdf(z, mu2, s2)))


def test_kl_to_standard_matches_mc_oracle():
    mu = np.array([[0.3, -0.2]])
    s = np.array([[0.5, 1.2]])
    closed = _kl_to_standard(Tensor(mu), Tensor(s)).data[0]
    mc = mc_kl_oracle(mu[0], s[0], np.zeros(2), np.ones(2))
    assert abs(closed - mc) / abs(mc) < 0.01


def test_kl_diag_matches_mc_oracle():
    mu1, s1 = np.array([[0.4, -0.6]]), np.array([[0.7, 0.3]])
    mu2, s2 = np.array([[-0.1, 0.2]]), np.array([[1.4, 0.9]])
    closed = _kl_diag(Tensor(mu1), Tensor(s1), Tensor(mu2), Tensor(s2)).data[0]
    mc = mc_kl_oracle(mu1[0], s1[0], mu2[0], s2[0])
    assert abs(closed - mc) / abs(mc) < 0.01


def test_kl_of_identical_gaussians_is_zero():
    mu, s = Tensor(np.array([[0.2, 1.5]])), Tensor(np.array([[0.8, 0.4]]))
    assert _kl_diag(mu, s, mu, s).data[0] == pytest.approx(0.0, abs=1e-14)


def test_kl_to_prior_zero_for_standard_normal():
    z = Tensor(np.zeros((1, 3)))
    o = Tensor(np.ones((1, 3)))
    assert _kl_to_standard(z, o).data[0] == pytest.approx(0.0, abs=1e-14)


def test_kl_nonnegative_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mu1, mu2 = rng.normal(size=(2, 1, 3))
        s1, s2 = rng.uniform(0.1, 2.0, size=(2, 1, 3))
        assert _kl_diag(Tensor(mu1), Tensor(s1), Tensor(mu2), Tensor(s2)).data[0] >= 0
        assert _kl_to_standard(Tensor(mu1), Tensor(s1)).data[0] >= 0


# ----------------------------------------------------------- ELBO machinery


def mixed_batch(n_rows=6, seed=3):
    rng = np.random.default_rng(seed)
    X = np.column_stack(
        [
            rng.uniform(0.0, 1.0, n_rows),
            rng.integers(0, 2, n_rows).astype(float),
            rng.integers(0, 3, n_rows).astype(float),
        ]
    )
    masks = rng.random((n_rows, 3)) < 0.5
    return X, masks


@pytest.mark.parametrize("n_modes", [1, 2])
def test_elbo_gradients_match_finite_differences(n_modes):
    imp = tiny_imputer(MIXED3, latent_dim=2, n_modes=n_modes, hidden=5, beta=0.3)
    X, masks = mixed_batch()
    eps = np.random.default_rng(7).standard_normal((len(X), 2))
    enc_p = net_params(imp.encoder)
    dec_p = net_params(imp.decoder)
    menc_p = net_params(imp.masked_encoder)
    params = enc_p + dec_p + menc_p

    def loss():
        return _elbo_batch(enc_p, dec_p, menc_p, X, masks, eps, MIXED3, 2, n_modes, 0.3)

    assert finite_difference_check(loss, params, n_coords=80, eps=1e-5) < 1e-2


def test_elbo_loss_deterministic_in_seed():
    imp = tiny_imputer(MIXED3)
    X, masks = mixed_batch()
    a = elbo_loss(imp, X, masks, seed=5)
    b = elbo_loss(imp, X, masks, seed=5)
    c = elbo_loss(imp, X, masks, seed=6)
    assert a == b
    assert a != c


def test_elbo_loss_nonfinite_carries_context():
    imp = tiny_imputer(MIXED3)
    imp.encoder.weights[0][:] = 1e308  # force overflow in the forward pass
    X, masks = mixed_batch()
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericError) as err:
            elbo_loss(imp, X, masks, seed=0)
    assert err.value.context is not None


def test_elbo_loss_rejects_mismatched_mask():
    imp = tiny_imputer(MIXED3)
    with pytest.raises(InputShapeError):
        elbo_loss(imp, np.zeros((2, 3)), np.zeros((2, 2), dtype=bool))


def test_imputer_rejects_wrong_net_widths():
    with pytest.raises(InputShapeError, match="encoder"):
        ImputerModel(
            init_dense_net([2, 4, 4, 3]),  # 2d head should be 4 wide
            init_dense_net([2, 4, 4, 2]),
            init_dense_net([2, 4, 4, 5]),
            BINARY2,
            latent_dim=2,
            n_modes=1,
            beta=0.5,
        )


def test_train_rejects_sentinel_rows():
    X = np.array([[0.0, -1.0], [1.0, 0.0]])
    with pytest.raises(DataError, match="sentinel"):
        train_imputer(X, X, BINARY2, ImputerHyper(hidden_size=4, max_epochs=1))


def test_default_grid_shape():
    grid = default_imputer_grid()
    assert len(grid) == 192
    assert len(set(grid)) == 192


# ----------------------------------------------------- trained on table data


@pytest.fixture(scope="module")
def table_imputer():
    ds = gen_two_feature_data(n_points=6_000, seed=11)
    tr, va = ds.part("train")[0], ds.part("val")[0]
    hyper = ImputerHyper(
        hidden_size=32,
        learning_rate=1e-3,
        latent_dim=2,
        n_modes=1,
        beta=0.05,
        max_epochs=400,
        patience=40,
    )
    imp, hist = train_imputer(tr, va, ds.schema, hyper, seed=2)
    return imp, ds


def table_conditional(x0: int) -> float:
    from onshap.datasets import DEFAULT_TWO_FEATURE_TABLE

    joint = DEFAULT_TWO_FEATURE_TABLE.sum(axis=2)
    return joint[x0, 1] / joint[x0].sum()


@pytest.mark.parametrize("x0", [0, 1])
def test_conditional_frequency_matches_table(table_imputer, x0):
    imp, _ = table_imputer
    draws = sample_conditional(
        imp, np.array([float(x0), 0.0]), np.array([True, False]), 10_000, seed=3
    )
    freq = draws[:, 1].mean()
    assert abs(freq - table_conditional(x0)) < 0.05


def test_full_coalition_returns_input_exactly(table_imputer):
    imp, _ = table_imputer
    x = np.array([1.0, 0.0])
    draws = sample_conditional(imp, x, np.array([True, True]), 50, seed=0)
    assert np.array_equal(draws, np.tile(x, (50, 1)))


def test_mixture_weights_on_simplex_after_training(table_imputer):
    imp, ds = table_imputer
    X = ds.features[:64]
    masks = np.random.default_rng(0).random(X.shape) < 0.5
    w, _, sigmas = imp.mixture_parameters(X, masks)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(sigmas > 0)


def test_reconstruction_finite_and_prior_kl_nonnegative(table_imputer):
    imp, ds = table_imputer
    X = ds.part("train")[0][:256]
    mu, s = imp.encode(X)
    kl = (-np.log(s) + (s**2 + mu**2) / 2 - 0.5).sum(axis=1)
    assert np.all(kl >= 0)
    loss = elbo_loss(imp, X, np.ones(X.shape, dtype=bool), seed=0)
    assert np.isfinite(loss)


def test_serialization_round_trip(table_imputer):
    imp, _ = table_imputer
    doc = json.loads(json.dumps(imp.to_doc()))
    back = ImputerModel.from_doc(doc)
    for a, b in ((imp.encoder, back.encoder), (imp.decoder, back.decoder)):
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
    assert back.schema == imp.schema and back.beta == imp.beta
    x, mask = np.array([0.0, 0.0]), np.array([False, True])
    a = sample_conditional(imp, x, mask, 100, seed=9)
    b = sample_conditional(back, x, mask, 100, seed=9)
    assert np.array_equal(a, b)


# ------------------------------------------------- inlier completion (sigma)


def test_inlier_completion_near_one():
    ds = gen_outlier_data(OutlierGenConfig(sigma=0.05, n_points=3_000, seed=4))
    tr, va = ds.part("train")[0], ds.part("val")[0]
    hyper = ImputerHyper(
        hidden_size=64,
        learning_rate=1e-3,
        latent_dim=4,
        n_modes=1,
        beta=0.05,
        max_epochs=250,
        patience=25,
    )
    imp, _ = train_imputer(tr, va, ds.schema, hyper, seed=5)

    # an actual z = 1 inlier: all 20 coordinates concentrate near 1
    z = ds.extras["z"]
    inlier = np.where((z == 1) & (ds.labels == 0))[0][0]
    x = ds.features[inlier]
    mask = np.zeros(20, dtype=bool)
    mask[5:] = True  # observe the 15 trailing coordinates
    draws = sample_conditional(imp, x, mask, 400, seed=6)
    completed = draws[:, :5].mean()
    assert abs(completed - 1.0) < 0.1


# ---------------------------------------- independence and draw determinism


@pytest.fixture(scope="module")
def independent_imputer():
    rng = np.random.default_rng(21)
    X = (rng.random((4_000, 3)) < 0.5).astype(float)
    schema = [ColumnSpec(f"b{i}", "binary") for i in range(3)]
    hyper = ImputerHyper(
        hidden_size=16,
        learning_rate=1e-3,
        latent_dim=2,
        n_modes=1,
        beta=0.1,
        max_epochs=200,
        patience=25,
    )
    imp, _ = train_imputer(X[:3_400], X[3_400:], schema, hyper, seed=7)
    return imp


def test_conditioning_does_not_shift_independent_marginals(independent_imputer):
    imp = independent_imputer
    x = np.array([1.0, 0.0, 0.0])
    cond = sample_conditional(imp, x, np.array([True, False, False]), 10_000, seed=8)
    free = sample_conditional(imp, x, np.array([False, False, False]), 10_000, seed=9)
    for col in (1, 2):
        assert wasserstein_distance(cond[:, col], free[:, col]) < 0.05


def test_sampling_deterministic_in_seed(independent_imputer):
    imp = independent_imputer
    x, mask = np.array([1.0, 0.0, 1.0]), np.array([False, True, False])
    a = sample_conditional(imp, x, mask, 200, seed=3)
    b = sample_conditional(imp, x, mask, 200, seed=3)
    assert np.array_equal(a, b)
    c = sample_conditional(imp, x, mask, 200, seed=4)
    assert not np.array_equal(a, c)


def test_training_deterministic_in_seed():
    rng = np.random.default_rng(30)
    X = (rng.random((300, 2)) < 0.5).astype(float)
    hyper = ImputerHyper(hidden_size=6, latent_dim=2, max_epochs=3, patience=None)
    imp1, h1 = train_imputer(X[:250], X[250:], BINARY2, hyper, seed=9)
    imp2, h2 = train_imputer(X[:250], X[250:], BINARY2, hyper, seed=9)
    assert h1.train_losses == h2.train_losses
    for a, b in zip(imp1.encoder.weights, imp2.encoder.weights):
        assert np.array_equal(a, b)
    for a, b in zip(imp1.masked_encoder.weights, imp2.masked_encoder.weights):
        assert np.array_equal(a, b)
