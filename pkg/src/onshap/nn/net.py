"""Dense feed-forward networks: parameters, forward passes, serialization.

One ``DenseNet`` holds the weights for a plain multilayer perceptron with
relu hidden layers and a configurable output head. All arithmetic is
float64 and deterministic given the initialisation seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InputShapeError
from .autodiff import Tensor

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("identity", "softmax", "sigmoid")

FORMAT_NAME = "densenet"
FORMAT_VERSION = 1


@dataclass
class DenseNet:
    """Feed-forward network parameters.

    ``weights[i]`` has shape (layer_sizes[i], layer_sizes[i+1]); biases are
    row vectors. The output activation is applied by :func:`forward`;
    :func:`forward_logits` returns the pre-activation output.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    rng_seed: int = 0

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "DenseNet":
        return DenseNet(
            layer_sizes=list(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            hidden_activation=self.hidden_activation,
            output_activation=self.output_activation,
            rng_seed=self.rng_seed,
        )


def init_dense_net(
    layer_sizes: list[int],
    output_activation: str = "identity",
    seed: int = 0,
    hidden_activation: str = "relu",
) -> DenseNet:
    """He-style fan-in uniform initialisation, biases zero."""
    if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
        raise ValueError(f"layer_sizes must be >= 2 positive entries, got {layer_sizes}")
    if output_activation not in OUTPUT_ACTIVATIONS:
        raise ValueError(f"unknown output activation {output_activation!r}")
    if hidden_activation not in HIDDEN_ACTIVATIONS:
        raise ValueError(f"unknown hidden activation {hidden_activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DenseNet(
        layer_sizes=list(layer_sizes),
        weights=weights,
        biases=biases,
        hidden_activation=hidden_activation,
        output_activation=output_activation,
        rng_seed=seed,
    )


def _check_batch(net: DenseNet, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    squeeze = batch.ndim == 1
    if squeeze:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] != net.n_inputs:
        raise InputShapeError(
            f"expected batch of width {net.n_inputs}, got shape {batch.shape}"
        )
    return batch, squeeze


def stable_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_logits(net: DenseNet, batch: np.ndarray) -> np.ndarray:
    """Pre-activation output of the final layer, shape (B, n_outputs)."""
    batch, squeeze = _check_batch(net, batch)
    h = batch
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h[0] if squeeze else h


def forward(net: DenseNet, batch: np.ndarray) -> np.ndarray:
    """Network output with the configured output activation applied."""
    z = forward_logits(net, batch)
    if net.output_activation == "identity":
        return z
    if net.output_activation == "softmax":
        return stable_softmax(z)
    if net.output_activation == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown output activation {net.output_activation!r}")


def net_params(net: DenseNet) -> list[Tensor]:
    """Wrap the network arrays as trainable tensors (shared memory)."""
    params = []
    for w, b in zip(net.weights, net.biases):
        params.append(Tensor(w, requires_grad=True))
        params.append(Tensor(b, requires_grad=True))
    # Tensor(np.asarray) shares memory only when dtype already matches;
    # re-bind the net arrays so in-place optimiser updates are visible.
    for i in range(len(net.weights)):
        net.weights[i] = params[2 * i].data
        net.biases[i] = params[2 * i + 1].data
    return params


def forward_tensor(params: list[Tensor], batch: np.ndarray | Tensor) -> Tensor:
    """Differentiable forward pass producing output logits."""
    h = batch if isinstance(batch, Tensor) else Tensor(batch)
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = h.relu()
    return h


def net_to_doc(net: DenseNet) -> dict:
    """Serializable document; floats round-trip exactly via repr."""
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "hidden_activation": net.hidden_activation,
        "output_activation": net.output_activation,
        "rng_seed": net.rng_seed,
        "layers": [
            {"weights": w.tolist(), "biases": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }


def net_from_doc(doc: dict) -> DenseNet:
    if doc.get("format") != FORMAT_NAME:
        raise ValueError(f"not a dense-net document: format={doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dense-net version {doc.get('version')!r}")
    weights = [np.asarray(layer["weights"], dtype=np.float64) for layer in doc["layers"]]
    biases = [np.asarray(layer["biases"], dtype=np.float64) for layer in doc["layers"]]
    return DenseNet(
        layer_sizes=[int(s) for s in doc["layer_sizes"]],
        weights=weights,
        biases=biases,
        hidden_activation=doc["hidden_activation"],
        output_activation=doc["output_activation"],
        rng_seed=int(doc["rng_seed"]),
    )
