"""Supervised surrogate: a softmax network regressing a target classifier's
probability outputs from sentinel-masked inputs.

Minimising E_x E_S |f(x) - g(mask(x, S))|^2 over coalitions S drawn with
Shapley weights makes g(mask(x, S)) converge to the conditional expectation
E[f(x') | x'_S = x_S], i.e. the surrogate learns the on-manifold value
function directly and evaluates it with a single forward pass.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .datasets import ColumnSpec
from .errors import InputShapeError
from .nn.autodiff import Tensor, softmax
from .nn.net import (
    DenseNet,
    forward,
    init_dense_net,
    net_from_doc,
    net_params,
    net_to_doc,
    forward_tensor,
)
from .nn.train import TrainConfig, TrainHistory, train
from .serialize import check_envelope, dumps_doc, envelope
from .shapley import sample_value_query_coalitions
from .valuefns import masked_fill

FORMAT_NAME = "surrogate-model"
FORMAT_VERSION = 1

_NET_INIT_TAG = 0x2B7


@dataclass(frozen=True)
class SurrogateHyper:
    """One hyperparameter point; defaults are the drug-study optimum."""

    hidden_size: int = 512
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 300
    patience: int | None = 30

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")


def default_surrogate_grid() -> list[SurrogateHyper]:
    return [
        SurrogateHyper(h, lr)
        for h, lr in itertools.product((128, 256, 512), (1e-3, 1e-4))
    ]


def model_fingerprint(model) -> str:
    """Stable id of a serializable model (sha256 of its canonical JSON)."""
    import hashlib

    try:
        doc = model.to_doc()
    except (AttributeError, NotImplementedError):
        return "unserializable"
    return hashlib.sha256(dumps_doc(doc).encode()).hexdigest()


@dataclass
class SurrogateModel:
    net: DenseNet
    schema: list[ColumnSpec]
    target_model_id: str

    def __post_init__(self):
        if self.net.output_activation != "softmax":
            raise InputShapeError("surrogate net must end in a softmax head")
        if self.net.n_inputs != len(self.schema):
            raise InputShapeError(
                f"net takes {self.net.n_inputs} inputs but schema has "
                f"{len(self.schema)} columns"
            )

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def n_classes(self) -> int:
        return self.net.n_outputs

    def predict_masked(self, masked_X: np.ndarray) -> np.ndarray:
        """Probability rows for already-masked inputs (sentinel in place)."""
        masked_X = np.atleast_2d(np.asarray(masked_X, dtype=np.float64))
        if masked_X.shape[1] != self.n_features:
            raise InputShapeError(
                f"expected width {self.n_features}, got {masked_X.shape}"
            )
        return forward(self.net, masked_X)

    def to_doc(self) -> dict:
        return envelope(
            FORMAT_NAME,
            FORMAT_VERSION,
            {
                "target_model_id": self.target_model_id,
                "schema": [c.to_doc() for c in self.schema],
                "net": net_to_doc(self.net),
            },
        )

    @classmethod
    def from_doc(cls, doc: dict) -> "SurrogateModel":
        check_envelope(doc, FORMAT_NAME, FORMAT_VERSION)
        schema = [
            ColumnSpec(
                name=c["name"],
                kind=c["kind"],
                n_categories=c["n_categories"],
                scaled_range=tuple(c["scaled_range"]) if c["scaled_range"] else None,
            )
            for c in doc["schema"]
        ]
        return cls(
            net=net_from_doc(doc["net"]),
            schema=schema,
            target_model_id=doc["target_model_id"],
        )


def evaluate_surrogate(
    surrogate: SurrogateModel, x: np.ndarray, coalition_mask: np.ndarray, y: int
) -> float:
    """g_y(mask(x, S)): deterministic, one forward pass."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(coalition_mask, dtype=bool)
    if x.shape != (surrogate.n_features,) or mask.shape != x.shape:
        raise InputShapeError(
            f"expected ({surrogate.n_features},) point and mask, "
            f"got {x.shape} and {mask.shape}"
        )
    if not 0 <= y < surrogate.n_classes:
        raise InputShapeError(f"class {y} outside 0..{surrogate.n_classes - 1}")
    return float(surrogate.predict_masked(masked_fill(x[None], mask[None]))[0, y])


def train_surrogate(
    target_model,
    train_X: np.ndarray,
    val_X: np.ndarray,
    schema: list[ColumnSpec],
    hyper: SurrogateHyper = SurrogateHyper(),
    seed: int = 0,
    coalition_sampler=None,
) -> tuple[SurrogateModel, TrainHistory]:
    """Regress the target's probability vectors from masked inputs.

    The loss is the mean squared error across all class slots, with a
    fresh coalition per row per epoch drawn from the distribution the
    Shapley sum queries (endpoints included); validation uses one fixed
    coalition set so epochs are comparable. Targets come from
    the (fixed) ``target_model.predict_proba``; no labels are needed.
    """
    train_X = np.asarray(train_X, dtype=np.float64)
    val_X = np.asarray(val_X, dtype=np.float64)
    n = len(schema)
    for name, arr in (("train_X", train_X), ("val_X", val_X)):
        if arr.ndim != 2 or arr.shape[1] != n:
            raise InputShapeError(f"{name} must be (B, {n}), got {arr.shape}")

    train_P = target_model.predict_proba(train_X)
    val_P = target_model.predict_proba(val_X)
    n_classes = train_P.shape[1]

    init_seed = np.random.SeedSequence([seed & 0x7FFFFFFF, _NET_INIT_TAG]).generate_state(1)[0]
    h = hyper.hidden_size
    net = init_dense_net([n, h, h, n_classes], output_activation="softmax", seed=int(init_seed))
    params = net_params(net)
    sampler = coalition_sampler or sample_value_query_coalitions

    def loss_fn(batch, rng):
        Xb, Pb = batch
        masks = sampler(n, Xb.shape[0], rng)
        out = softmax(forward_tensor(params, masked_fill(Xb, masks)))
        return (out - Tensor(Pb)).square().mean()

    cfg = TrainConfig(
        learning_rate=hyper.learning_rate,
        batch_size=hyper.batch_size,
        max_epochs=hyper.max_epochs,
        patience=hyper.patience,
        seed=seed,
    )
    history = train(params, loss_fn, [train_X, train_P], [val_X, val_P], cfg)
    surrogate = SurrogateModel(
        net=net, schema=list(schema), target_model_id=model_fingerprint(target_model)
    )
    return surrogate, history
