"""Conditional feature imputer: a VAE with an auxiliary masked encoder.

Three dense networks share one latent space. The encoder q(z|x) maps a
complete feature vector to a diagonal normal; the decoder p(x|z) emits
per-feature distribution parameters (fixed-variance normal for continuous
columns, Bernoulli for binary, categorical for coded columns); the masked
encoder r(z|x_S) maps a partially observed vector, missing slots filled
with the -1 sentinel, to a mixture of K diagonal normals. Training
maximises

    L = E_q[log p(x|z)] - KL(q(z|x) || r(z|x_S)) - beta * KL(q(z|x) || N(0, I))

with one reparameterized latent sample per point. Conditioned completions
are drawn by composing r with the decoder and overwriting the observed
coordinates, so a full coalition always reproduces the input exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .datasets import ColumnSpec
from .errors import DataError, InputShapeError, NumericError
from .nn.autodiff import Tensor, logsumexp, stack_logsumexp
from .nn.net import (
    DenseNet,
    forward,
    init_dense_net,
    net_from_doc,
    net_params,
    net_to_doc,
    forward_tensor,
    stable_softmax,
)
from .nn.train import TrainConfig, TrainHistory, train
from .serialize import check_envelope, envelope
from .shapley import sample_value_query_coalitions
from .valuefns import MASK_SENTINEL, masked_fill

CONTINUOUS_DECODER_VARIANCE = 0.1
SCALE_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)

FORMAT_NAME = "imputer-model"
FORMAT_VERSION = 1

# rng stream tags
_NET_INIT_TAG = 0x1A9
_ELBO_NOISE_TAG = 0xE15
_SAMPLE_TAG = 0xE52


def _np_softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _column_slots(schema: list[ColumnSpec]) -> list[tuple[int, int]]:
    """Per-column (offset, width) into the decoder output vector."""
    slots, offset = [], 0
    for col in schema:
        width = col.n_categories if col.kind == "categorical" else 1
        slots.append((offset, width))
        offset += width
    return slots


def decoder_output_width(schema: list[ColumnSpec]) -> int:
    off, width = _column_slots(schema)[-1]
    return off + width


@dataclass(frozen=True)
class ImputerHyper:
    """One hyperparameter point; defaults are the drug-study optimum."""

    hidden_size: int = 128
    learning_rate: float = 1e-3
    latent_dim: int = 4
    n_modes: int = 1
    beta: float = 0.5
    batch_size: int = 256
    max_epochs: int = 1000
    patience: int | None = 100

    def __post_init__(self):
        if self.latent_dim < 1 or self.n_modes < 1 or self.hidden_size < 1:
            raise ValueError("latent_dim, n_modes, hidden_size must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


def default_imputer_grid() -> list[ImputerHyper]:
    """Full scan grid: hidden x lr x latent x modes x beta (192 points)."""
    return [
        ImputerHyper(h, lr, d, k, b)
        for h, lr, d, k, b in itertools.product(
            (128, 256, 512), (1e-3, 1e-4), (2, 4, 8, 16), (1, 2), (0.05, 0.1, 0.5, 1.0)
        )
    ]


@dataclass
class ImputerModel:
    encoder: DenseNet
    decoder: DenseNet
    masked_encoder: DenseNet
    schema: list[ColumnSpec]
    latent_dim: int
    n_modes: int
    beta: float

    def __post_init__(self):
        n, d, k = len(self.schema), self.latent_dim, self.n_modes
        checks = (
            (self.encoder, n, 2 * d, "encoder"),
            (self.decoder, d, decoder_output_width(self.schema), "decoder"),
            (self.masked_encoder, n, k * (2 * d + 1), "masked_encoder"),
        )
        for net, n_in, n_out, name in checks:
            if net.n_inputs != n_in or net.n_outputs != n_out:
                raise InputShapeError(
                    f"{name} must map {n_in} -> {n_out}, "
                    f"got {net.n_inputs} -> {net.n_outputs}"
                )

    @property
    def n_features(self) -> int:
        return len(self.schema)

    # -- numpy-side heads ----------------------------------------------

    def encode(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """q(z|x) parameters: (mu, sigma), sigma strictly positive."""
        out = forward(self.encoder, np.asarray(X, dtype=np.float64))
        d = self.latent_dim
        return out[..., :d], _np_softplus(out[..., d:]) + SCALE_FLOOR

    def mixture_parameters(self, X: np.ndarray, masks: np.ndarray):
        """r(z|x_S) parameters for each row: (weights, mus, sigmas).

        Shapes (B, K), (B, K, d), (B, K, d); weights lie on the simplex.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        out = forward(self.masked_encoder, masked_fill(X, masks))
        B, (k, d) = out.shape[0], (self.n_modes, self.latent_dim)
        mus = out[:, : k * d].reshape(B, k, d)
        sigmas = _np_softplus(out[:, k * d : 2 * k * d].reshape(B, k, d)) + SCALE_FLOOR
        weights = stable_softmax(out[:, 2 * k * d :])
        return weights, mus, sigmas

    def sample_conditional_batch(
        self,
        X: np.ndarray,
        masks: np.ndarray,
        n_draws: int,
        rng: np.random.Generator,
        sample_continuous: bool = False,
    ) -> np.ndarray:
        """Draw completions consistent with the observed slots of each row.

        Returns (B, n_draws, n_features). Discrete columns are sampled from
        the decoded distribution; continuous columns use the decoded mean
        unless ``sample_continuous`` adds the decoder's fixed-variance noise.
        Observed (in-coalition) slots are overwritten with the input values.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        if X.shape != masks.shape or X.shape[1] != self.n_features:
            raise InputShapeError(
                f"need matching (B, {self.n_features}) features and masks, "
                f"got {X.shape} and {masks.shape}"
            )
        B, d = X.shape[0], self.latent_dim
        weights, mus, sigmas = self.mixture_parameters(X, masks)

        u = rng.random((B, n_draws, 1))
        comp = (u > weights.cumsum(axis=1)[:, None, :]).sum(axis=2)  # (B, k)
        rows = np.arange(B)[:, None]
        mu_sel, sig_sel = mus[rows, comp], sigmas[rows, comp]
        z = mu_sel + sig_sel * rng.standard_normal((B, n_draws, d))

        dec = forward(self.decoder, z.reshape(B * n_draws, d))
        drawn = np.empty((B * n_draws, self.n_features))
        for i, (col, (off, width)) in enumerate(zip(self.schema, _column_slots(self.schema))):
            if col.kind == "continuous":
                vals = dec[:, off]
                if sample_continuous:
                    vals = vals + math.sqrt(CONTINUOUS_DECODER_VARIANCE) * rng.standard_normal(len(vals))
                drawn[:, i] = vals
            elif col.kind == "binary":
                p1 = 1.0 / (1.0 + np.exp(-dec[:, off]))
                drawn[:, i] = (rng.random(len(p1)) < p1).astype(np.float64)
            else:
                probs = stable_softmax(dec[:, off : off + width])
                u_cat = rng.random((len(probs), 1))
                drawn[:, i] = (u_cat > probs.cumsum(axis=1)).sum(axis=1)
        drawn = drawn.reshape(B, n_draws, self.n_features)
        return np.where(masks[:, None, :], X[:, None, :], drawn)

    # -- serialization -------------------------------------------------

    def to_doc(self) -> dict:
        return envelope(
            FORMAT_NAME,
            FORMAT_VERSION,
            {
                "latent_dim": self.latent_dim,
                "n_modes": self.n_modes,
                "beta": self.beta,
                "schema": [c.to_doc() for c in self.schema],
                "encoder": net_to_doc(self.encoder),
                "decoder": net_to_doc(self.decoder),
                "masked_encoder": net_to_doc(self.masked_encoder),
            },
        )

    @classmethod
    def from_doc(cls, doc: dict) -> "ImputerModel":
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
            encoder=net_from_doc(doc["encoder"]),
            decoder=net_from_doc(doc["decoder"]),
            masked_encoder=net_from_doc(doc["masked_encoder"]),
            schema=schema,
            latent_dim=int(doc["latent_dim"]),
            n_modes=int(doc["n_modes"]),
            beta=float(doc["beta"]),
        )


def sample_conditional(
    imputer: ImputerModel,
    x: np.ndarray,
    mask: np.ndarray,
    n: int,
    seed: int = 0,
    sample_continuous: bool = False,
) -> np.ndarray:
    """n completions of one point, (n, n_features); deterministic in seed."""
    rng = np.random.default_rng([seed & 0x7FFFFFFF, _SAMPLE_TAG])
    return imputer.sample_conditional_batch(
        np.asarray(x)[None], np.asarray(mask)[None], n, rng, sample_continuous
    )[0]


# -- differentiable loss pieces ----------------------------------------


def _diag_normal(out: Tensor, d: int) -> tuple[Tensor, Tensor]:
    return out[:, :d], out[:, d:].softplus() + SCALE_FLOOR


def _kl_diag(mu1: Tensor, s1: Tensor, mu2: Tensor, s2: Tensor) -> Tensor:
    """KL(N(mu1, s1^2) || N(mu2, s2^2)) per row, summed over dimensions."""
    term = s2.log() - s1.log() + (s1.square() + (mu1 - mu2).square()) / (s2.square() * 2.0) - 0.5
    return term.sum(axis=1)

def _kl_to_standard(mu: Tensor, s: Tensor) -> Tensor:
    term = -s.log() + (s.square() + mu.square()) * 0.5 - 0.5
    return term.sum(axis=1)


def _log_normal(z: Tensor, mu: Tensor, s: Tensor) -> Tensor:
    term = ((z - mu) / s).square() * -0.5 - s.log() - 0.5 * LOG_2PI
    return term.sum(axis=1)


def _mixture_heads(out: Tensor, k: int, d: int) -> tuple[list, list, Tensor]:
    mus = [out[:, j * d : (j + 1) * d] for j in range(k)]
    sigmas = [
        out[:, k * d + j * d : k * d + (j + 1) * d].softplus() + SCALE_FLOOR
        for j in range(k)
    ]
    w_logits = out[:, 2 * k * d :]
    return mus, sigmas, w_logits


def _mixture_log_pdf(z: Tensor, mus: list, sigmas: list, w_logits: Tensor) -> Tensor:
    log_w = w_logits - logsumexp(w_logits, axis=1, keepdims=True)
    terms = [log_w[:, j] + _log_normal(z, mus[j], sigmas[j]) for j in range(len(mus))]
    return stack_logsumexp(terms)


def _reconstruction_loglik(dec_out: Tensor, X: np.ndarray, schema: list[ColumnSpec]) -> Tensor:
    B = X.shape[0]
    total = Tensor(np.zeros(B))
    for i, (col, (off, width)) in enumerate(zip(schema, _column_slots(schema))):
        xcol = X[:, i]
        if col.kind == "continuous":
            m = dec_out[:, off]
            sq = (m - Tensor(xcol)).square()
            total = total + sq * (-0.5 / CONTINUOUS_DECODER_VARIANCE) + (
                -0.5 * math.log(2.0 * math.pi * CONTINUOUS_DECODER_VARIANCE)
            )
        elif col.kind == "binary":
            logit = dec_out[:, off]
            total = total + Tensor(xcol) * logit - logit.softplus()
        else:
            logits = dec_out[:, off : off + width]
            picked = logits[np.arange(B), xcol.astype(np.int64)]
            total = total + picked - logsumexp(logits, axis=1)
    return total


def _elbo_batch(
    enc_params: list[Tensor],
    dec_params: list[Tensor],
    menc_params: list[Tensor],
    X: np.ndarray,
    masks: np.ndarray,
    eps: np.ndarray,
    schema: list[ColumnSpec],
    latent_dim: int,
    n_modes: int,
    beta: float,
) -> Tensor:
    """Mean negative ELBO, -(L0 + beta * L_reg), over the batch."""
    mu_q, s_q = _diag_normal(forward_tensor(enc_params, X), latent_dim)
    z = mu_q + s_q * Tensor(eps)
    recon = _reconstruction_loglik(forward_tensor(dec_params, z), X, schema)

    menc_out = forward_tensor(menc_params, masked_fill(X, masks))
    if n_modes == 1:
        mu_r, s_r = _diag_normal(menc_out[:, : 2 * latent_dim], latent_dim)
        kl_qr = _kl_diag(mu_q, s_q, mu_r, s_r)
    else:
        # no closed form against a mixture: single-sample estimate at z
        mus, sigmas, w_logits = _mixture_heads(menc_out, n_modes, latent_dim)
        kl_qr = _log_normal(z, mu_q, s_q) - _mixture_log_pdf(z, mus, sigmas, w_logits)

    l0 = recon - kl_qr
    l_reg = -_kl_to_standard(mu_q, s_q)
    return -(l0 + beta * l_reg).mean()


def elbo_loss(
    imputer: ImputerModel,
    x: np.ndarray,
    coalition_mask: np.ndarray,
    seed: int = 0,
    noise: np.ndarray | None = None,
) -> float:
    """Training objective at one point (or batch) and coalition.

    ``noise``, when given, fixes the reparameterization draw (shape
    (B, latent_dim)); otherwise it derives from ``seed``. Non-finite
    results raise with the offending (x, coalition) attached.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    masks = np.atleast_2d(np.asarray(coalition_mask, dtype=bool))
    if X.shape != masks.shape or X.shape[1] != imputer.n_features:
        raise InputShapeError(
            f"need matching (B, {imputer.n_features}) features and masks, "
            f"got {X.shape} and {masks.shape}"
        )
    if noise is None:
        rng = np.random.default_rng([seed & 0x7FFFFFFF, _ELBO_NOISE_TAG])
        noise = rng.standard_normal((X.shape[0], imputer.latent_dim))
    loss = _elbo_batch(
        net_params(imputer.encoder),
        net_params(imputer.decoder),
        net_params(imputer.masked_encoder),
        X,
        masks,
        np.asarray(noise, dtype=np.float64),
        imputer.schema,
        imputer.latent_dim,
        imputer.n_modes,
        imputer.beta,
    ).item()
    if not np.isfinite(loss):
        raise NumericError(
            "imputer loss is non-finite", context=(X, masks)
        )
    return loss


def train_imputer(
    train_X: np.ndarray,
    val_X: np.ndarray,
    schema: list[ColumnSpec],
    hyper: ImputerHyper = ImputerHyper(),
    seed: int = 0,
    coalition_sampler=None,
) -> tuple[ImputerModel, TrainHistory]:
    """Fit the three networks jointly; early stop on validation loss.

    Each minibatch row is paired with a fresh coalition drawn from the
    distribution of coalitions the Shapley sum queries, endpoints included
    (override via ``coalition_sampler(n, n_rows, rng)``), and a fresh
    latent noise draw. Validation re-uses one
    fixed set of coalitions and noise so epochs are comparable. Divergence
    surfaces as a training error with the last finite epoch attached.
    """
    train_X = np.asarray(train_X, dtype=np.float64)
    val_X = np.asarray(val_X, dtype=np.float64)
    n = len(schema)
    for name, arr in (("train_X", train_X), ("val_X", val_X)):
        if arr.ndim != 2 or arr.shape[1] != n:
            raise InputShapeError(f"{name} must be (B, {n}), got {arr.shape}")
        if np.any(arr == MASK_SENTINEL):
            raise DataError(f"{name} contains the {MASK_SENTINEL} sentinel")

    d, k, h = hyper.latent_dim, hyper.n_modes, hyper.hidden_size
    init_seeds = np.random.SeedSequence([seed & 0x7FFFFFFF, _NET_INIT_TAG]).generate_state(3)
    encoder = init_dense_net([n, h, h, 2 * d], seed=int(init_seeds[0]))
    decoder = init_dense_net([d, h, h, decoder_output_width(schema)], seed=int(init_seeds[1]))
    masked_encoder = init_dense_net([n, h, h, k * (2 * d + 1)], seed=int(init_seeds[2]))
    imputer = ImputerModel(encoder, decoder, masked_encoder, list(schema), d, k, hyper.beta)

    enc_p = net_params(encoder)
    dec_p = net_params(decoder)
    menc_p = net_params(masked_encoder)
    sampler = coalition_sampler or sample_value_query_coalitions

    def loss_fn(batch, rng):
        (Xb,) = batch
        masks = sampler(n, Xb.shape[0], rng)
        eps = rng.standard_normal((Xb.shape[0], d))
        return _elbo_batch(
            enc_p, dec_p, menc_p, Xb, masks, eps, schema, d, k, hyper.beta
        )

    cfg = TrainConfig(
        learning_rate=hyper.learning_rate,
        batch_size=hyper.batch_size,
        max_epochs=hyper.max_epochs,
        patience=hyper.patience,
        seed=seed,
    )
    history = train(enc_p + dec_p + menc_p, loss_fn, [train_X], [val_X], cfg)
    return imputer, history
