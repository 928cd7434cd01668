"""Minibatch Adam training with early stopping on validation loss.

The loop is generic over a loss builder so the same machinery trains the
classifier, the surrogate, and the three-network imputer. Everything is
deterministic given (seed, data, config): per-epoch shuffles and any
stochastic parts of the loss derive their randomness from seeds spawned
off the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import TrainingError
from .autodiff import Tensor, zero_grads

# rng stream tags: keep epoch shuffles, batch noise, and validation noise apart
_SHUFFLE_TAG = 1
_BATCH_TAG = 2
_VAL_TAG = 3

LossFn = Callable[[Sequence[np.ndarray], np.random.Generator], Tensor]
"""Maps (batch arrays, rng) to a scalar loss tensor. Must be pure in params."""


@dataclass
class TrainConfig:
    learning_rate: float
    batch_size: int = 256
    max_epochs: int = 200
    patience: int | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when set")


@dataclass
class TrainHistory:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best_val_loss(self) -> float:
        return self.val_losses[self.best_epoch]


class Adam:
    """Adam optimiser state over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _epoch_rng(seed: int, tag: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0x7FFFFFFF, tag, epoch])


def evaluate_loss(
    loss_fn: LossFn,
    params: Sequence[Tensor],
    arrays: Sequence[np.ndarray],
    rng: np.random.Generator,
    chunk_size: int = 4096,
) -> float:
    """Loss averaged over ``arrays`` in chunks, weighted by chunk size."""
    n = arrays[0].shape[0]
    total = 0.0
    for start in range(0, n, chunk_size):
        sl = slice(start, min(start + chunk_size, n))
        batch = [a[sl] for a in arrays]
        loss = loss_fn(batch, rng)
        total += loss.item() * (sl.stop - sl.start)
    return total / n


def train(
    params: Sequence[Tensor],
    loss_fn: LossFn,
    train_arrays: Sequence[np.ndarray],
    val_arrays: Sequence[np.ndarray],
    cfg: TrainConfig,
) -> TrainHistory:
    """Run minibatch Adam; leaves ``params`` at the best-validation epoch.

    ``train_arrays``/``val_arrays`` are row-aligned arrays (features,
    targets, ...). Validation randomness is re-seeded identically each
    epoch so stochastic objectives stay comparable across epochs.
    """
    n = train_arrays[0].shape[0]
    if any(a.shape[0] != n for a in train_arrays):
        raise ValueError("training arrays must share their first dimension")
    opt = Adam(params, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
    history = TrainHistory()
    best_val = np.inf
    best_state = [p.data.copy() for p in params]
    last_finite = -1

    for epoch in range(cfg.max_epochs):
        order = _epoch_rng(cfg.seed, _SHUFFLE_TAG, epoch).permutation(n)
        batch_rng = _epoch_rng(cfg.seed, _BATCH_TAG, epoch)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [a[idx] for a in train_arrays]
            zero_grads(params)
            loss = loss_fn(batch, batch_rng)
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        history.train_losses.append(epoch_loss / n)

        val_loss = evaluate_loss(loss_fn, params, val_arrays, _epoch_rng(cfg.seed, _VAL_TAG, 0))
        history.val_losses.append(val_loss)
        if not np.isfinite(val_loss):
            raise TrainingError(
                f"validation loss became non-finite at epoch {epoch}",
                last_finite_epoch=last_finite,
            )
        last_finite = epoch
        if val_loss < best_val:
            best_val = val_loss
            history.best_epoch = epoch
            best_state = [p.data.copy() for p in params]
        elif cfg.patience is not None and epoch - history.best_epoch >= cfg.patience:
            history.stopped_early = True
            break

    for p, state in zip(params, best_state):
        p.data[...] = state
    return history


def finite_difference_check(
    loss_scalar: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_coords: int = 100,
    eps: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_scalar`` must rebuild the loss from the current parameter values
    on every call (any internal randomness must be frozen by the caller).
    """
    zero_grads(params)
    loss = loss_scalar()
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params])
    flat_choices = rng.integers(0, sizes.sum(), size=min(n_coords, int(sizes.sum())))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in flat_choices:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[pi])
        view = params[pi].data.reshape(-1)
        orig = view[local]
        view[local] = orig + eps
        up = loss_scalar().item()
        view[local] = orig - eps
        down = loss_scalar().item()
        view[local] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[pi].reshape(-1)[local]
        denom = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
