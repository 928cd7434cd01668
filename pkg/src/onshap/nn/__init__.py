"""Dense-network engine: autodiff, networks, losses, training."""

from .autodiff import Tensor, logsumexp, softmax, stack_logsumexp, zero_grads
from .losses import cross_entropy, mean_squared_error, one_hot
from .net import (
    DenseNet,
    forward,
    forward_logits,
    forward_tensor,
    init_dense_net,
    net_from_doc,
    net_params,
    net_to_doc,
    stable_softmax,
)
from .train import Adam, TrainConfig, TrainHistory, evaluate_loss, finite_difference_check, train

__all__ = [
    "Adam",
    "DenseNet",
    "Tensor",
    "TrainConfig",
    "TrainHistory",
    "cross_entropy",
    "evaluate_loss",
    "finite_difference_check",
    "forward",
    "forward_logits",
    "forward_tensor",
    "init_dense_net",
    "logsumexp",
    "mean_squared_error",
    "net_from_doc",
    "net_params",
    "net_to_doc",
    "one_hot",
    "softmax",
    "stable_softmax",
    "stack_logsumexp",
    "train",
    "zero_grads",
]
