"""The four value-function families and the model-retraining game.

Every family scores (point, class, coalition) triples in one vectorized
call and can bind a single (x, y) into a per-point handle for the
Shapley estimators. Families that sample own their random stream,
seeded at construction, so rebuilding a family replays its draws.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset
from .errors import DataError, InputShapeError
from .models.base import Classifier
from .models.trees import fit_random_forest
from .serialize import append_jsonl, read_jsonl

MASK_SENTINEL = -1.0


@dataclass(frozen=True)
class VfConfig:
    """Shared knobs for value-function construction."""

    n_inner_samples: int = 1
    seed: int = 0
    exhaustive_background: bool = False

    def __post_init__(self):
        if self.n_inner_samples < 1:
            raise ValueError("n_inner_samples must be >= 1")


def masked_fill(X: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Replace out-of-coalition entries with the mask sentinel."""
    return np.where(masks, X, MASK_SENTINEL)


class _BoundHandle:
    """Per-point handle delegating to a family's batched evaluator."""

    def __init__(self, family, x: np.ndarray, y: int):
        self.family = family
        self.x = np.asarray(x, dtype=float)
        self.y = int(y)
        self.n = family.n
        self.vf_id = family.vf_id

    def batch_evaluate(self, masks: np.ndarray) -> np.ndarray:
        masks = np.asarray(masks, dtype=bool)
        X = np.broadcast_to(self.x, (len(masks), self.n))
        Y = np.full(len(masks), self.y)
        return self.family.evaluate(X, Y, masks)


class _FamilyBase:
    vf_id = "abstract"
    n: int

    def bind(self, x, y) -> _BoundHandle:
        return _BoundHandle(self, x, y)

    def _check_triples(self, X, Y, masks):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=int)
        masks = np.asarray(masks, dtype=bool)
        if X.ndim != 2 or X.shape[1] != self.n:
            raise InputShapeError(f"{self.vf_id}: expected points of width {self.n}, got {X.shape}")
        if masks.shape != X.shape:
            raise InputShapeError(f"{self.vf_id}: masks shape {masks.shape} != points {X.shape}")
        if len(Y) != len(X):
            raise InputShapeError(f"{self.vf_id}: {len(Y)} labels for {len(X)} points")
        return X, Y, masks


class OffManifoldVf(_FamilyBase):
    """v(S) = E_{x' ~ background}[ f_y(x_S spliced into x') ].

    Out-of-coalition features come from independently drawn background
    points, so the spliced inputs generally leave the data manifold.
    With exhaustive_background the mean runs over every background point
    (optionally weighted) instead of n_inner_samples draws.
    """

    vf_id = "off_manifold"

    def __init__(
        self,
        model: Classifier,
        background: np.ndarray,
        cfg: VfConfig = VfConfig(),
        background_weights: np.ndarray | None = None,
        chunk_rows: int = 1 << 18,
    ):
        background = np.asarray(background, dtype=float)
        if background.ndim != 2 or len(background) == 0:
            raise DataError("off-manifold value function needs a nonempty background sample")
        self.model = model
        self.background = background
        self.cfg = cfg
        self.n = background.shape[1]
        self.chunk_rows = chunk_rows
        if background_weights is not None:
            w = np.asarray(background_weights, dtype=float)
            if w.shape != (len(background),) or (w < 0).any() or w.sum() <= 0:
                raise DataError("background weights must be nonnegative and sum positive")
            self.background_weights = w / w.sum()
        else:
            self.background_weights = None
        self._rng = np.random.default_rng([cfg.seed & 0x7FFFFFFF, 0x0F1])

    def evaluate(self, X, Y, masks) -> np.ndarray:
        X, Y, masks = self._check_triples(X, Y, masks)
        if self.cfg.exhaustive_background:
            return self._evaluate_exhaustive(X, Y, masks)
        k = self.cfg.n_inner_samples
        out = np.empty(len(X))
        chunk = max(1, self.chunk_rows // k)
        for start in range(0, len(X), chunk):
            sl = slice(start, min(start + chunk, len(X)))
            xb, yb, mb = X[sl], Y[sl], masks[sl]
            b = len(xb)
            if self.background_weights is None:
                idx = self._rng.integers(0, len(self.background), size=(b, k))
            else:
                idx = self._rng.choice(
                    len(self.background), size=(b, k), p=self.background_weights
                )
            spliced = np.where(mb[:, None, :], xb[:, None, :], self.background[idx])
            probs = self.model.prob_of(spliced.reshape(b * k, self.n), np.repeat(yb, k))
            out[sl] = probs.reshape(b, k).mean(axis=1)
        return out

    def _evaluate_exhaustive(self, X, Y, masks) -> np.ndarray:
        nbg = len(self.background)
        w = (
            np.full(nbg, 1.0 / nbg)
            if self.background_weights is None
            else self.background_weights
        )
        out = np.empty(len(X))
        chunk = max(1, self.chunk_rows // nbg)
        for start in range(0, len(X), chunk):
            sl = slice(start, min(start + chunk, len(X)))
            xb, yb, mb = X[sl], Y[sl], masks[sl]
            b = len(xb)
            spliced = np.where(mb[:, None, :], xb[:, None, :], self.background[None, :, :])
            probs = self.model.prob_of(
                spliced.reshape(b * nbg, self.n), np.repeat(yb, nbg)
            ).reshape(b, nbg)
            out[sl] = probs @ w
        return out


class EmpiricalConditionalVf(_FamilyBase):
    """v(S) = mean of f_y(x') over background points with x'_S = x_S.

    The full-data empirical conditional; feasible only for discrete
    features. When no background point matches a coalition exactly, the
    handle backs off to the Hamming-nearest matches (minimum mismatch
    count on in-coalition features, averaged) and counts the fallback.
    """

    vf_id = "empirical_conditional"

    def __init__(
        self,
        model: Classifier,
        background: np.ndarray,
        chunk_rows: int = 2048,
        warn_on_fallback: bool = True,
    ):
        background = np.asarray(background, dtype=float)
        if background.ndim != 2 or len(background) == 0:
            raise DataError("empirical conditional needs a nonempty background sample")
        if not np.equal(np.mod(background, 1), 0).all():
            raise DataError(
                "empirical conditional conditioning needs discrete features; "
                "background contains non-integral values"
            )
        self.model = model
        self.background = background
        self.n = background.shape[1]
        self.chunk_rows = chunk_rows
        self.warn_on_fallback = warn_on_fallback
        self.fallback_count = 0
        # fix the background predictions once; classes indexed directly
        self._bg_probs = model.predict_proba(background)

    def evaluate(self, X, Y, masks) -> np.ndarray:
        X, Y, masks = self._check_triples(X, Y, masks)
        out = np.empty(len(X))
        new_fallbacks = 0
        for start in range(0, len(X), self.chunk_rows):
            sl = slice(start, min(start + self.chunk_rows, len(X)))
            xb, yb, mb = X[sl], Y[sl], masks[sl]
            neq = (xb[:, None, :] != self.background[None, :, :]).astype(np.uint16)
            mism = np.einsum("bjn,bn->bj", neq, mb.astype(np.uint16))
            best = mism.min(axis=1)
            new_fallbacks += int((best > 0).sum())
            match = mism == best[:, None]
            counts = match.sum(axis=1)
            vals = np.empty(len(xb))
            for c in np.unique(yb):
                rows = yb == c
                vals[rows] = match[rows] @ self._bg_probs[:, c] / counts[rows]
            out[sl] = vals
        if new_fallbacks:
            self.fallback_count += new_fallbacks
            if self.warn_on_fallback:
                warnings.warn(
                    f"{new_fallbacks} coalition(s) had no exact background match; "
                    "used Hamming-nearest averaging",
                    stacklevel=2,
                )
        return out


class GenerativeVf(_FamilyBase):
    """v(S) = mean over imputer draws x' ~ p(.|x_S) of f_y(x').

    Draws come from the trained conditional imputer; in-coalition
    features are overwritten with their true values, so only the
    out-of-coalition block is generated.
    """

    vf_id = "generative"

    def __init__(self, model: Classifier, imputer, cfg: VfConfig = VfConfig()):
        if imputer.n_features != model.n_features:
            raise DataError(
                f"imputer covers {imputer.n_features} features, "
                f"model expects {model.n_features}"
            )
        self.model = model
        self.imputer = imputer
        self.cfg = cfg
        self.n = model.n_features
        self._rng = np.random.default_rng([cfg.seed & 0x7FFFFFFF, 0x0F2])

    def evaluate(self, X, Y, masks) -> np.ndarray:
        X, Y, masks = self._check_triples(X, Y, masks)
        k = self.cfg.n_inner_samples
        draws = self.imputer.sample_conditional_batch(X, masks, k, self._rng)
        b = len(X)
        probs = self.model.prob_of(draws.reshape(b * k, self.n), np.repeat(Y, k))
        return probs.reshape(b, k).mean(axis=1)


class SurrogateVf(_FamilyBase):
    """v(S) = g_y(mask(x, S)): one deterministic surrogate forward pass."""

    vf_id = "surrogate"

    def __init__(self, surrogate):
        self.surrogate = surrogate
        self.n = surrogate.n_features

    def evaluate(self, X, Y, masks) -> np.ndarray:
        X, Y, masks = self._check_triples(X, Y, masks)
        probs = self.surrogate.predict_masked(masked_fill(X, masks))
        return probs[np.arange(len(X)), Y]


# ---------------------------------------------------- spec-style handles


def off_manifold_vf(model, x, y, background, cfg: VfConfig = VfConfig()) -> _BoundHandle:
    return OffManifoldVf(model, background, cfg).bind(x, y)


def empirical_conditional_vf(model, x, y, background, cfg: VfConfig = VfConfig()) -> _BoundHandle:
    return EmpiricalConditionalVf(model, background).bind(x, y)


def generative_vf(model, x, y, imputer, cfg: VfConfig = VfConfig()) -> _BoundHandle:
    return GenerativeVf(model, imputer, cfg).bind(x, y)


def surrogate_vf(surrogate_model, x, y) -> _BoundHandle:
    return SurrogateVf(surrogate_model).bind(x, y)


# --------------------------------------------------------------------------
# Model-retraining game
# --------------------------------------------------------------------------


def stochastic_draw_accuracy(model: Classifier, X: np.ndarray, y: np.ndarray) -> float:
    """Accuracy when predictions are sampled from the model's predicted
    distribution: the mean predicted probability of the true label."""
    return float(np.mean(model.prob_of(X, y)))


def default_retraining_trainer(X, y, seed):
    return fit_random_forest(X, y, n_trees=100, max_features_mode="all", seed=seed)


class RetrainingGame:
    """A(g_S): refit accuracy as a dataset-level value function.

    For each coalition a fresh model is fit on the training split
    restricted to the coalition's columns and scored by stochastic-draw
    accuracy on the test split. The empty coalition needs no model: a
    marginal predictor scores sum_y p(y)^2 on the test labels. Results
    are cached in an append-only JSONL file keyed by dataset
    fingerprint, coalition bitmask, seed, and repeat count.
    """

    vf_id = "retraining"

    def __init__(
        self,
        dataset: Dataset,
        trainer=None,
        trainer_id: str = "random-forest-default",
        cache_path: str | None = None,
        seed: int = 0,
        n_repeats: int = 3,
    ):
        if dataset.labels is None:
            raise DataError("the retraining game needs a labeled dataset")
        if n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")
        self.dataset = dataset
        self.trainer = trainer or default_retraining_trainer
        self.trainer_id = trainer_id
        self.cache_path = cache_path
        self.seed = seed
        self.n_repeats = n_repeats
        self.n = dataset.n_features
        self.train_X, self.train_y = dataset.part("train")
        self.test_X, self.test_y = dataset.part("test")
        self.n_fits = 0
        self._cache: dict[int, tuple[float, float]] = {}
        if cache_path:
            self._load_cache()

    def _key_matches(self, rec) -> bool:
        return (
            rec.get("dataset_fingerprint") == self.dataset.fingerprint
            and rec.get("seed") == self.seed
            and rec.get("n_repeats") == self.n_repeats
            and rec.get("trainer_id") == self.trainer_id
        )

    def _load_cache(self):
        for rec in read_jsonl(self.cache_path):
            if self._key_matches(rec):
                self._cache[int(rec["bits"], 16)] = (rec["accuracy"], rec["std_error"])

    def _store(self, bits: int, acc: float, se: float):
        self._cache[bits] = (acc, se)
        if self.cache_path:
            append_jsonl(
                self.cache_path,
                {
                    "bits": f"{bits:#x}",
                    "accuracy": acc,
                    "std_error": se,
                    "seed": self.seed,
                    "n_repeats": self.n_repeats,
                    "trainer_id": self.trainer_id,
                    "dataset_fingerprint": self.dataset.fingerprint,
                },
            )

    def _empty_value(self) -> tuple[float, float]:
        freqs = np.bincount(self.test_y) / len(self.test_y)
        return float((freqs**2).sum()), 0.0

    def accuracy(self, mask: np.ndarray) -> tuple[float, float]:
        mask = np.asarray(mask, dtype=bool)
        bits = int(sum(1 << int(i) for i in np.nonzero(mask)[0]))
        if bits in self._cache:
            return self._cache[bits]
        if bits == 0:
            value = self._empty_value()
        else:
            cols = np.nonzero(mask)[0]
            accs = []
            for r in range(self.n_repeats):
                fit_seed = int(
                    np.random.SeedSequence([self.seed, bits, r]).generate_state(1)[0]
                    & 0x7FFFFFFF
                )
                model = self.trainer(self.train_X[:, cols], self.train_y, fit_seed)
                self.n_fits += 1
                accs.append(stochastic_draw_accuracy(model, self.test_X[:, cols], self.test_y))
            accs = np.asarray(accs)
            se = accs.std(ddof=1) / np.sqrt(len(accs)) if len(accs) > 1 else 0.0
            value = (float(accs.mean()), float(se))
        self._store(bits, *value)
        return value

    def batch_evaluate(self, masks: np.ndarray) -> np.ndarray:
        return np.array([self.accuracy(m)[0] for m in np.asarray(masks, dtype=bool)])


def retraining_game(dataset: Dataset, coalition_mask, trainer=None, seed: int = 0, **kw):
    """One-shot accuracy A(g_S) for a single coalition."""
    game = RetrainingGame(dataset, trainer=trainer, seed=seed, **kw)
    return game.accuracy(np.asarray(coalition_mask, dtype=bool))
