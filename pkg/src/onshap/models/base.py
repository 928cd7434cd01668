"""The model-to-explain abstraction: anything with class probabilities."""

from __future__ import annotations

import numpy as np

from ..errors import InputShapeError

SENTINEL = -1.0


class Classifier:
    """Base for all built-in models.

    Subclasses set kind, n_features, n_classes and implement
    _predict_proba on validated 2-D batches. predict_proba accepts a
    single feature vector or a batch and always returns rows on the
    probability simplex.
    """

    kind: str = "abstract"
    n_features: int
    n_classes: int

    def _predict_proba(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _validate(self, X) -> tuple[np.ndarray, bool]:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise InputShapeError(
                f"{self.kind} expects {self.n_features} features, got shape {X.shape}"
            )
        if (X == SENTINEL).any():
            raise InputShapeError(
                f"input contains the masking sentinel {SENTINEL}; models see full inputs only"
            )
        return X, single

    def predict_proba(self, X) -> np.ndarray:
        X, single = self._validate(X)
        probs = self._predict_proba(X)
        return probs[0] if single else probs

    def predict(self, X) -> np.ndarray:
        X, single = self._validate(X)
        labels = np.argmax(self._predict_proba(X), axis=1)
        return labels[0] if single else labels

    def prob_of(self, X, y) -> np.ndarray:
        """f_y(x): predicted probability of class y per row; y may be a
        scalar or a per-row vector."""
        X, single = self._validate(X)
        probs = self._predict_proba(X)
        y = np.broadcast_to(np.asarray(y, dtype=int), (len(X),))
        out = probs[np.arange(len(X)), y]
        return float(out[0]) if single else out

    def to_doc(self) -> dict:
        raise NotImplementedError
