"""Closed-form conditional value function for the latent-bit outlier data.

The outlier generator is a four-component Gaussian mixture: (inlier,
outlier) crossed with the latent bit z, with per-feature means 0/1 and
shared scale sigma. Conditioning on any coalition of coordinates stays
inside the family, so p(x'_notS | x_S) can be sampled exactly: compute
the component posterior given the observed coordinates, pick a
component, then draw the hidden coordinates from independent normals.
Using this as the on-manifold value function removes density-estimation
error entirely; what remains is pure explanation-method error.
"""

from __future__ import annotations

import numpy as np

from ..datasets import OutlierGenConfig
from ..errors import DataError
from ..models.base import Classifier
from ..valuefns import VfConfig, _BoundHandle, _FamilyBase

_SAMPLER_TAG = 0x0F3


def outlier_component_means(cfg: OutlierGenConfig) -> np.ndarray:
    """(4, n_features) mean vectors, rows ordered (inlier, z=0),
    (inlier, z=1), (outlier, z=0), (outlier, z=1). Outliers put the
    first flipped_features coordinates at 1 - z."""
    means = np.zeros((4, cfg.n_features))
    means[1] = 1.0
    means[2, : cfg.flipped_features] = 1.0
    means[3] = 1.0
    means[3, : cfg.flipped_features] = 0.0
    return means


def outlier_component_log_priors(cfg: OutlierGenConfig) -> np.ndarray:
    """Component weights: class split times the fair latent bit."""
    eps = cfg.outlier_fraction
    return np.log(np.array([1 - eps, 1 - eps, eps, eps]) / 2.0)


def outlier_component_posterior(
    cfg: OutlierGenConfig, X: np.ndarray, masks: np.ndarray
) -> np.ndarray:
    """(B, 4) posterior over mixture components given in-coalition coords.

    Per-feature Gaussian log likelihoods reduce to -(x - mu)^2 / (2 sigma^2);
    the normalisation constant is shared by all components of a row and
    cancels in the softmax.
    """
    X = np.asarray(X, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    means = outlier_component_means(cfg)
    sq = (X[:, None, :] - means[None, :, :]) ** 2
    loglik = -np.einsum("bcn,bn->bc", sq, masks.astype(float)) / (2.0 * cfg.sigma**2)
    logw = loglik + outlier_component_log_priors(cfg)[None, :]
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


class AnalyticConditionalVf(_FamilyBase):
    """v(S) = E[f_y(x') | x'_S = x_S] under the exact generator mixture."""

    vf_id = "on_manifold_analytic"

    def __init__(self, model: Classifier, cfg: OutlierGenConfig, vf_cfg: VfConfig = VfConfig()):
        if model.n_features != cfg.n_features:
            raise DataError(
                f"generator covers {cfg.n_features} features, model expects {model.n_features}"
            )
        self.model = model
        self.cfg = cfg
        self.vf_cfg = vf_cfg
        self.n = cfg.n_features
        self._means = outlier_component_means(cfg)
        self._rng = np.random.default_rng([vf_cfg.seed & 0x7FFFFFFF, _SAMPLER_TAG])

    def evaluate(self, X, Y, masks) -> np.ndarray:
        X, Y, masks = self._check_triples(X, Y, masks)
        k = self.vf_cfg.n_inner_samples
        b = len(X)
        posterior = outlier_component_posterior(self.cfg, X, masks)
        u = self._rng.random((b, k))
        comp = (u[:, :, None] > np.cumsum(posterior, axis=1)[:, None, :]).sum(axis=2)
        draws = self._rng.normal(self._means[comp], self.cfg.sigma)
        filled = np.where(masks[:, None, :], X[:, None, :], draws)
        probs = self.model.prob_of(filled.reshape(b * k, self.n), np.repeat(Y, k))
        return probs.reshape(b, k).mean(axis=1)


def analytic_conditional_vf_for_synthetic(
    cfg: OutlierGenConfig,
    x: np.ndarray,
    y: int,
    model: Classifier,
    vf_cfg: VfConfig = VfConfig(),
) -> _BoundHandle:
    """Per-point handle for the exact on-manifold value function."""
    return AnalyticConditionalVf(model, cfg, vf_cfg).bind(x, y)
