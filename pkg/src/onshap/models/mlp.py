"""MLP classifier on the local autodiff engine, plus the fine-tune that
suppresses a binary feature's influence on the output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from ..nn import (
    DenseNet,
    TrainConfig,
    TrainHistory,
    cross_entropy,
    forward,
    forward_tensor,
    init_dense_net,
    net_from_doc,
    net_params,
    net_to_doc,
    one_hot,
    softmax,
    train,
)
from ..serialize import check_envelope, envelope
from .base import Classifier


class MlpClassifier(Classifier):
    kind = "mlp"

    def __init__(self, net: DenseNet, classes: np.ndarray):
        if net.output_activation != "softmax":
            raise ValueError("classifier networks need a softmax output")
        self.net = net
        self.classes = np.asarray(classes, dtype=int)
        self.n_features = net.layer_sizes[0]
        self.n_classes = net.layer_sizes[-1]
        if self.n_classes != len(self.classes):
            raise ValueError("output width does not match the class list")

    def _predict_proba(self, X: np.ndarray) -> np.ndarray:
        return forward(self.net, X)

    def copy(self) -> "MlpClassifier":
        return MlpClassifier(self.net.copy(), self.classes.copy())

    def to_doc(self) -> dict:
        return envelope(
            "mlp-classifier",
            1,
            {"classes": self.classes.tolist(), "net": net_to_doc(self.net)},
        )

    @classmethod
    def from_doc(cls, doc: dict) -> "MlpClassifier":
        check_envelope(doc, "mlp-classifier", 1)
        return cls(net_from_doc(doc["net"]), np.asarray(doc["classes"], dtype=int))


def fit_mlp(
    X,
    y,
    hidden_sizes: tuple[int, ...] = (50,),
    val: tuple[np.ndarray, np.ndarray] | None = None,
    cfg: TrainConfig | None = None,
    seed: int = 0,
) -> tuple[MlpClassifier, TrainHistory]:
    """Cross-entropy training with early stopping when val data is given."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(X) == 0:
        raise DataError("cannot fit a model on empty data")
    classes = np.unique(y)
    n_classes = int(classes.max()) + 1
    if cfg is None:
        cfg = TrainConfig(
            learning_rate=1e-3,
            max_epochs=200,
            patience=10 if val is not None else None,
            seed=seed,
        )
    net = init_dense_net(
        [X.shape[1], *hidden_sizes, n_classes], output_activation="softmax", seed=cfg.seed
    )
    params = net_params(net)

    def loss_fn(batch, rng):
        return cross_entropy(forward_tensor(params, batch[0]), batch[1])

    targets = one_hot(y, n_classes)
    if val is not None:
        val_arrays = (np.asarray(val[0], dtype=float), one_hot(np.asarray(val[1], dtype=int), n_classes))
    else:
        val_arrays = (X, targets)
    history = train(params, loss_fn, (X, targets), val_arrays, cfg)
    return MlpClassifier(net, np.arange(n_classes)), history


@dataclass
class SuppressionReport:
    """Before/after comparison for the feature-suppression fine-tune."""

    agreement: float
    accuracy_before: float
    accuracy_after: float
    mean_abs_fd_before: float
    mean_abs_fd_after: float


def _mean_abs_finite_difference(model: MlpClassifier, X: np.ndarray, feature_index: int) -> float:
    """Mean |f(x|do(feat=1)) - f(x|do(feat=0))| on the class-1 output."""
    hi = X.copy()
    hi[:, feature_index] = 1.0
    lo = X.copy()
    lo[:, feature_index] = 0.0
    return float(np.abs(model.predict_proba(hi)[:, 1] - model.predict_proba(lo)[:, 1]).mean())


def suppress_feature_finetune(
    model: MlpClassifier,
    X,
    y,
    feature_index: int,
    alpha: float = 3.0,
    epochs: int = 200,
    cfg: TrainConfig | None = None,
    eval_data: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[MlpClassifier, SuppressionReport]:
    """Fine-tune on cross-entropy plus an intervention penalty.

    The added term is alpha times the batch mean of
    |f(x|do(feat=1)) - f(x|do(feat=0))| on the class-1 probability, so
    gradient descent drives the output's direct dependence on the
    feature toward zero while the data loss holds behavior in place.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if not np.isin(X[:, feature_index], (0.0, 1.0)).all():
        raise DataError(
            f"feature {feature_index} is not binary; the do() intervention needs a binary feature"
        )
    if model.n_classes != 2:
        raise DataError("the suppression fine-tune is defined for 2-class models")
    if cfg is None:
        cfg = TrainConfig(learning_rate=1e-3, max_epochs=epochs, patience=None, seed=0)

    eval_X, eval_y = (X, y) if eval_data is None else eval_data
    eval_X = np.asarray(eval_X, dtype=float)
    eval_y = np.asarray(eval_y, dtype=int)
    before_pred = model.predict(eval_X)
    report_before = {
        "accuracy": float((before_pred == eval_y).mean()),
        "fd": _mean_abs_finite_difference(model, eval_X, feature_index),
    }

    tuned = model.copy()
    params = net_params(tuned.net)

    def loss_fn(batch, rng):
        xb, tb = batch
        data_loss = cross_entropy(forward_tensor(params, xb), tb)
        hi = xb.copy()
        hi[:, feature_index] = 1.0
        lo = xb.copy()
        lo[:, feature_index] = 0.0
        p_hi = softmax(forward_tensor(params, hi), axis=1)[:, 1]
        p_lo = softmax(forward_tensor(params, lo), axis=1)[:, 1]
        penalty = (p_hi - p_lo).abs().mean()
        return data_loss + penalty * alpha

    targets = one_hot(y, 2)
    train(params, loss_fn, (X, targets), (X, targets), cfg)

    after_pred = tuned.predict(eval_X)
    report = SuppressionReport(
        agreement=float((after_pred == before_pred).mean()),
        accuracy_before=report_before["accuracy"],
        accuracy_after=float((after_pred == eval_y).mean()),
        mean_abs_fd_before=report_before["fd"],
        mean_abs_fd_after=_mean_abs_finite_difference(tuned, eval_X, feature_index),
    )
    return tuned, report
