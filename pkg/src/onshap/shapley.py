"""Exact and Monte Carlo Shapley attribution over arbitrary value functions.

A value function assigns a real number to every coalition (subset) of
features. Local attributions distribute v(N) - v(empty) over features by
the Shapley formula; global attributions average local ones over a
labeled sample. The Monte Carlo scheme samples uniformly random feature
orderings: one ordering yields a marginal contribution for every feature
and the per-ordering marginals telescope, so the local sum rule holds
exactly per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import DataError
from .serialize import check_envelope, envelope

MAX_EXACT_FEATURES = 20


@dataclass(frozen=True)
class Coalition:
    """A subset of the n features, stored as a bitmask."""

    bits: int
    n: int

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"feature count must be >= 0, got {self.n}")
        if not 0 <= self.bits < (1 << self.n):
            raise ValueError(f"bitmask {self.bits:#x} has set positions >= n={self.n}")

    @classmethod
    def empty(cls, n: int) -> "Coalition":
        return cls(0, n)

    @classmethod
    def full(cls, n: int) -> "Coalition":
        return cls((1 << n) - 1, n)

    @classmethod
    def from_indices(cls, indices: Sequence[int], n: int) -> "Coalition":
        bits = 0
        for i in indices:
            bits |= 1 << i
        return cls(bits, n)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "Coalition":
        mask = np.asarray(mask, dtype=bool)
        bits = sum(1 << int(i) for i in np.nonzero(mask)[0])
        return cls(bits, mask.shape[0])

    @property
    def size(self) -> int:
        return bin(self.bits).count("1")

    def indices(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n) if self.bits >> i & 1)

    def mask(self) -> np.ndarray:
        return np.array([bool(self.bits >> i & 1) for i in range(self.n)])

    def contains(self, i: int) -> bool:
        return bool(self.bits >> i & 1)

    def add(self, i: int) -> "Coalition":
        return Coalition(self.bits | (1 << i), self.n)

    def remove(self, i: int) -> "Coalition":
        return Coalition(self.bits & ~(1 << i), self.n)


class ValueFunctionHandle(Protocol):
    """A value function bound to one data point and class.

    batch_evaluate takes a (m, n) boolean coalition-membership matrix and
    returns m values. Stochastic handles own their random stream (seeded
    at construction), so rebuilding a handle replays it.
    """

    n: int
    vf_id: str

    def batch_evaluate(self, masks: np.ndarray) -> np.ndarray: ...


class ValueFunctionFamily(Protocol):
    """A value-function method over a whole dataset.

    evaluate scores (point, class, coalition) triples in one vectorized
    call; bind fixes (x, y) and returns a per-point handle.
    """

    vf_id: str
    n: int

    def bind(self, x: np.ndarray, y: int) -> ValueFunctionHandle: ...

    def evaluate(self, X: np.ndarray, Y: np.ndarray, masks: np.ndarray) -> np.ndarray: ...


class FunctionHandle:
    """Adapt a plain callable on coalition masks to the handle protocol."""

    def __init__(self, fn: Callable, n: int, vf_id: str = "game", vectorized: bool = False):
        self.fn = fn
        self.n = n
        self.vf_id = vf_id
        self.vectorized = vectorized

    def batch_evaluate(self, masks: np.ndarray) -> np.ndarray:
        masks = np.asarray(masks, dtype=bool)
        if masks.ndim != 2 or masks.shape[1] != self.n:
            raise ValueError(f"expected masks of shape (m, {self.n}), got {masks.shape}")
        if self.vectorized:
            return np.asarray(self.fn(masks), dtype=float)
        return np.array([float(self.fn(m)) for m in masks], dtype=float)

    def evaluate(self, coalition: Coalition) -> float:
        return float(self.batch_evaluate(coalition.mask()[None, :])[0])


@dataclass
class Attribution:
    """Per-feature Shapley estimates with standard errors and metadata.

    mean_full_value / mean_empty_value are the Monte Carlo estimates of
    v(N) and v(empty) taken over the same samples as the values, so
    sum(values) - (mean_full_value - mean_empty_value) telescopes to
    zero for permutation sampling; that difference is stored as
    sum_rule_residual. rhs_std_error is the standard error of
    mean_full_value - mean_empty_value.
    """

    values: np.ndarray
    std_errors: np.ndarray
    n_samples: int
    scope: str
    value_function_id: str
    sum_rule_residual: float
    mean_full_value: float
    mean_empty_value: float
    rhs_std_error: float = 0.0
    residual_std_error: float = 0.0
    seed: int | None = None
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.std_errors = np.asarray(self.std_errors, dtype=float)
        if self.values.shape != self.std_errors.shape:
            raise ValueError("values and std_errors must have matching shapes")
        if (self.std_errors < 0).any():
            raise ValueError("standard errors must be nonnegative")
        if self.scope not in ("local", "global"):
            raise ValueError(f"scope must be 'local' or 'global', got {self.scope!r}")

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    def to_doc(self) -> dict:
        return envelope(
            "attribution",
            1,
            {
                "scope": self.scope,
                "value_function_id": self.value_function_id,
                "feature_names": self.feature_names,
                "values": self.values.tolist(),
                "std_errors": self.std_errors.tolist(),
                "n_samples": self.n_samples,
                "seed": self.seed,
                "sum_rule_residual": self.sum_rule_residual,
                "diagnostics": {
                    "mean_full_value": self.mean_full_value,
                    "mean_empty_value": self.mean_empty_value,
                    "rhs_std_error": self.rhs_std_error,
                    "residual_std_error": self.residual_std_error,
                },
            },
        )

    @classmethod
    def from_doc(cls, doc: dict) -> "Attribution":
        check_envelope(doc, "attribution", 1)
        diag = doc.get("diagnostics", {})
        return cls(
            values=np.array(doc["values"], dtype=float),
            std_errors=np.array(doc["std_errors"], dtype=float),
            n_samples=int(doc["n_samples"]),
            scope=doc["scope"],
            value_function_id=doc["value_function_id"],
            sum_rule_residual=float(doc["sum_rule_residual"]),
            mean_full_value=float(diag.get("mean_full_value", 0.0)),
            mean_empty_value=float(diag.get("mean_empty_value", 0.0)),
            rhs_std_error=float(diag.get("rhs_std_error", 0.0)),
            residual_std_error=float(diag.get("residual_std_error", 0.0)),
            seed=doc.get("seed"),
            feature_names=doc.get("feature_names"),
        )


@dataclass
class SumRuleReport:
    residual: float
    std_error: float
    scope: str
    value_function_id: str


@dataclass
class SummandCurve:
    """Average marginal contribution v(S+i) - v(S), binned by |S|."""

    sizes: np.ndarray
    means: np.ndarray
    std_errors: np.ndarray
    n_samples: int


def all_coalition_masks(n: int) -> np.ndarray:
    """(2^n, n) membership matrix; row index equals the bitmask."""
    bits = np.arange(1 << n, dtype=np.int64)
    return ((bits[:, None] >> np.arange(n)) & 1).astype(bool)


def shapley_exact(v: ValueFunctionHandle, n: int) -> Attribution:
    """Exact Shapley values by full coalition enumeration (2^n evaluations)."""
    if n > MAX_EXACT_FEATURES:
        raise ValueError(
            f"exact computation needs 2^{n} evaluations; "
            f"limit is n <= {MAX_EXACT_FEATURES}, use shapley_mc instead"
        )
    masks = all_coalition_masks(n)
    vals = np.asarray(v.batch_evaluate(masks), dtype=float)
    sizes = masks.sum(axis=1)
    bits = np.arange(1 << n, dtype=np.int64)
    # weight for coalitions of size s that exclude i: s!(n-1-s)!/n!
    fact_n = math.factorial(n)
    weights = np.array(
        [math.factorial(s) * math.factorial(n - 1 - s) / fact_n for s in range(n)]
    )
    values = np.empty(n)
    for i in range(n):
        without = ~masks[:, i]
        sub = bits[without]
        values[i] = float(np.sum(weights[sizes[without]] * (vals[sub | (1 << i)] - vals[sub])))
    full_value = float(vals[-1])
    empty_value = float(vals[0])
    residual = float(values.sum() - (full_value - empty_value))
    return Attribution(
        values=values,
        std_errors=np.zeros(n),
        n_samples=1 << n,
        scope="local",
        value_function_id=getattr(v, "vf_id", "unknown"),
        sum_rule_residual=residual,
        mean_full_value=full_value,
        mean_empty_value=empty_value,
    )


def permutation_prefix_masks(perms: np.ndarray) -> np.ndarray:
    """(B, n) orderings -> (B, n+1, n) nested prefix coalition masks.

    Row k of each block holds the features at ordering positions < k, so
    block rows run from the empty coalition to the full one.
    """
    B, n = perms.shape
    positions = np.argsort(perms, axis=1)  # positions[b, j] = slot of feature j
    return positions[:, None, :] < np.arange(n + 1)[None, :, None]


def sample_shapley_coalitions(n: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Draw (n_samples, n) coalition masks with the weights of the Shapley sum.

    A uniform ordering plus a uniform cut position in {0, ..., n-1} gives
    each coalition S (of size <= n-1) probability |S|!(n-|S|)!/(n*n!), the
    combinatorial Shapley weight marginalized over the explained feature.
    The full coalition never appears; it is not a summation coalition.
    """
    perms = rng.permuted(np.tile(np.arange(n), (n_samples, 1)), axis=1)
    cuts = rng.integers(0, n, size=n_samples)
    positions = np.argsort(perms, axis=1)
    return positions < cuts[:, None]


def sample_value_query_coalitions(n: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Masks distributed like the value-function arguments of the Shapley sum.

    Each marginal contribution evaluates both v(S) and v(S + {i}), so the
    queried coalitions are an even mixture of a summation coalition and its
    one-feature extension: prefix length 0 and n each with probability
    1/(2n), every intermediate length with probability 1/n. Training on
    this distribution covers everything attribution later asks for,
    including the empty and full coalitions.
    """
    perms = rng.permuted(np.tile(np.arange(n), (n_samples, 1)), axis=1)
    cuts = rng.integers(0, n, size=n_samples) + (rng.random(n_samples) < 0.5)
    positions = np.argsort(perms, axis=1)
    return positions < cuts[:, None]


def _sample_stats(total: np.ndarray, total_sq: np.ndarray, count: int):
    mean = total / count
    if count < 2:
        return mean, np.zeros_like(mean)
    var = (total_sq - count * mean**2) / (count - 1)
    se = np.sqrt(np.maximum(var, 0.0) / count)
    return mean, se


def shapley_mc(
    v: ValueFunctionHandle,
    n: int,
    n_samples: int,
    seed: int,
    antithetic: bool = False,
    chunk_rows: int = 1 << 18,
) -> Attribution:
    """Monte Carlo Shapley values from uniformly random feature orderings.

    n_samples counts orderings. Each ordering contributes one marginal
    per feature; standard errors are sample std over orderings divided
    by sqrt(orderings). With antithetic=True orderings are drawn in
    (ordering, reversed ordering) pairs and each pair averages into one
    sample unit, so n_samples must be even.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if antithetic and n_samples % 2:
        raise ValueError("antithetic sampling pairs orderings; n_samples must be even")
    n_units = n_samples // 2 if antithetic else n_samples
    draws_per_unit = 2 if antithetic else 1

    chunk_units = max(1, chunk_rows // ((n + 1) * draws_per_unit))
    marg_total = np.zeros(n)
    marg_total_sq = np.zeros(n)
    rhs_total = 0.0
    rhs_total_sq = 0.0
    res_total = 0.0
    res_total_sq = 0.0
    full_total = 0.0
    empty_total = 0.0

    done = 0
    chunk_idx = 0
    base = np.arange(n)
    while done < n_units:
        b = min(chunk_units, n_units - done)
        rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x5A, chunk_idx])
        perms = rng.permuted(np.tile(base, (b, 1)), axis=1)
        if antithetic:
            both = np.empty((2 * b, n), dtype=perms.dtype)
            both[0::2] = perms
            both[1::2] = perms[:, ::-1]
            perms = both
        masks = permutation_prefix_masks(perms)
        vals = np.asarray(
            v.batch_evaluate(masks.reshape(-1, n)), dtype=float
        ).reshape(perms.shape[0], n + 1)
        diffs = vals[:, 1:] - vals[:, :-1]
        marg = np.zeros_like(diffs)
        np.put_along_axis(marg, perms, diffs, axis=1)
        rhs = vals[:, n] - vals[:, 0]
        full = vals[:, n]
        empty = vals[:, 0]
        if antithetic:
            marg = 0.5 * (marg[0::2] + marg[1::2])
            rhs = 0.5 * (rhs[0::2] + rhs[1::2])
            full = 0.5 * (full[0::2] + full[1::2])
            empty = 0.5 * (empty[0::2] + empty[1::2])
        res = marg.sum(axis=1) - rhs
        marg_total += marg.sum(axis=0)
        marg_total_sq += (marg**2).sum(axis=0)
        rhs_total += rhs.sum()
        rhs_total_sq += (rhs**2).sum()
        full_total += full.sum()
        empty_total += empty.sum()
        res_total += res.sum()
        res_total_sq += (res**2).sum()
        done += b
        chunk_idx += 1

    values, std_errors = _sample_stats(marg_total, marg_total_sq, n_units)
    rhs_mean, rhs_se = _sample_stats(
        np.array(rhs_total), np.array(rhs_total_sq), n_units
    )
    _, res_se = _sample_stats(np.array(res_total), np.array(res_total_sq), n_units)
    return Attribution(
        values=values,
        std_errors=std_errors,
        n_samples=n_samples,
        scope="local",
        value_function_id=getattr(v, "vf_id", "unknown"),
        sum_rule_residual=float(values.sum() - rhs_mean),
        mean_full_value=float(full_total / n_units),
        mean_empty_value=float(empty_total / n_units),
        rhs_std_error=float(rhs_se),
        residual_std_error=float(res_se),
        seed=seed,
    )


def _full_empty_estimate(v: ValueFunctionHandle, n: int):
    """One fresh evaluation of the full and empty coalitions, for reporting."""
    pair = np.zeros((2, n), dtype=bool)
    pair[0] = True
    vals = np.asarray(v.batch_evaluate(pair), dtype=float)
    return float(vals[0]), float(vals[1])


def shapley_global(
    family: ValueFunctionFamily,
    X: np.ndarray,
    Y: np.ndarray,
    n_samples: int,
    seed: int,
    chunk_rows: int = 1 << 18,
) -> Attribution:
    """Global Shapley values: average local values over (x, y) draws.

    Samples n_samples labeled points with replacement and uses a single
    random ordering per point, so the per-feature cost is one marginal
    per sampled point. Standard errors are over sampled points.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y)
    if X.ndim != 2 or len(X) == 0:
        raise DataError("shapley_global needs a nonempty 2-D labeled sample")
    if len(X) != len(Y):
        raise DataError(f"X has {len(X)} rows but Y has {len(Y)} labels")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = X.shape[1]

    point_rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x61])
    idx = point_rng.integers(0, len(X), size=n_samples)

    chunk_points = max(1, chunk_rows // (n + 1))
    marg_total = np.zeros(n)
    marg_total_sq = np.zeros(n)
    rhs_total = rhs_total_sq = 0.0
    full_total = empty_total = 0.0
    res_total = res_total_sq = 0.0

    base = np.arange(n)
    chunk_idx = 0
    for start in range(0, n_samples, chunk_points):
        sel = idx[start : start + chunk_points]
        b = len(sel)
        rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x62, chunk_idx])
        perms = rng.permuted(np.tile(base, (b, 1)), axis=1)
        masks = permutation_prefix_masks(perms)  # (b, n+1, n)
        X_rep = np.repeat(X[sel], n + 1, axis=0)
        Y_rep = np.repeat(Y[sel], n + 1)
        vals = np.asarray(
            family.evaluate(X_rep, Y_rep, masks.reshape(-1, n)), dtype=float
        ).reshape(b, n + 1)
        diffs = vals[:, 1:] - vals[:, :-1]
        marg = np.zeros_like(diffs)
        np.put_along_axis(marg, perms, diffs, axis=1)
        rhs = vals[:, n] - vals[:, 0]
        res = marg.sum(axis=1) - rhs
        marg_total += marg.sum(axis=0)
        marg_total_sq += (marg**2).sum(axis=0)
        rhs_total += rhs.sum()
        rhs_total_sq += (rhs**2).sum()
        full_total += vals[:, n].sum()
        empty_total += vals[:, 0].sum()
        res_total += res.sum()
        res_total_sq += (res**2).sum()
        chunk_idx += 1

    values, std_errors = _sample_stats(marg_total, marg_total_sq, n_samples)
    rhs_mean, rhs_se = _sample_stats(
        np.array(rhs_total), np.array(rhs_total_sq), n_samples
    )
    _, res_se = _sample_stats(np.array(res_total), np.array(res_total_sq), n_samples)
    return Attribution(
        values=values,
        std_errors=std_errors,
        n_samples=n_samples,
        scope="global",
        value_function_id=getattr(family, "vf_id", "unknown"),
        sum_rule_residual=float(values.sum() - rhs_mean),
        mean_full_value=float(full_total / n_samples),
        mean_empty_value=float(empty_total / n_samples),
        rhs_std_error=float(rhs_se),
        residual_std_error=float(res_se),
        seed=seed,
    )


def sum_rule_check(attribution: Attribution, v: ValueFunctionHandle | None = None) -> SumRuleReport:
    """Residual of sum(values) against v(N) - v(empty).

    With v=None the right-hand side comes from the estimates stored with
    the attribution (same samples, so permutation sampling telescopes
    and the residual is float roundoff). Passing a handle re-evaluates
    the full and empty coalitions independently.
    """
    total = float(attribution.values.sum())
    if v is None:
        rhs = attribution.mean_full_value - attribution.mean_empty_value
        se = attribution.residual_std_error
    else:
        full, empty = _full_empty_estimate(v, attribution.n_features)
        rhs = full - empty
        se = attribution.rhs_std_error
    return SumRuleReport(
        residual=total - rhs,
        std_error=se,
        scope=attribution.scope,
        value_function_id=attribution.value_function_id,
    )


def summand_by_coalition_size(
    family: ValueFunctionFamily,
    X: np.ndarray,
    Y: np.ndarray,
    n_samples: int,
    seed: int,
    chunk_rows: int = 1 << 18,
) -> SummandCurve:
    """Average marginal contribution as a function of coalition size.

    Position k of a sampled ordering inserts one feature into a size-k
    coalition; averaging the position-k differences over orderings and
    sampled points gives the size-k bin (uniform over features).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y)
    if X.ndim != 2 or len(X) == 0:
        raise DataError("summand_by_coalition_size needs a nonempty 2-D labeled sample")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = X.shape[1]

    point_rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x63])
    idx = point_rng.integers(0, len(X), size=n_samples)

    chunk_points = max(1, chunk_rows // (n + 1))
    total = np.zeros(n)
    total_sq = np.zeros(n)
    base = np.arange(n)
    chunk_idx = 0
    for start in range(0, n_samples, chunk_points):
        sel = idx[start : start + chunk_points]
        b = len(sel)
        rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x64, chunk_idx])
        perms = rng.permuted(np.tile(base, (b, 1)), axis=1)
        masks = permutation_prefix_masks(perms)
        X_rep = np.repeat(X[sel], n + 1, axis=0)
        Y_rep = np.repeat(Y[sel], n + 1)
        vals = np.asarray(
            family.evaluate(X_rep, Y_rep, masks.reshape(-1, n)), dtype=float
        ).reshape(b, n + 1)
        diffs = vals[:, 1:] - vals[:, :-1]  # column k: insertion into |S| = k
        total += diffs.sum(axis=0)
        total_sq += (diffs**2).sum(axis=0)
        chunk_idx += 1

    means, std_errors = _sample_stats(total, total_sq, n_samples)
    return SummandCurve(
        sizes=np.arange(n),
        means=means,
        std_errors=std_errors,
        n_samples=n_samples,
    )
