"""Quality metrics: the coalition-weighted value-function MSE, the top-k
explanation error rate, agreement statistics between attribution vectors,
and a concentration coefficient.

The MSE treats the model's full-input output f_y(x) as the regression
target: a value function that equals E[f_y(x') | x'_S = x_S] minimises it,
so lower MSE means a better estimate of the on-manifold conditional.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .errors import DataError, InputShapeError
from .serialize import envelope
from .shapley import Attribution, sample_shapley_coalitions

_POINT_TAG = 0x4E1
_COALITION_TAG = 0x4E2
_LABEL_TAG = 0x4E3


@dataclass(frozen=True)
class MseReport:
    mse: float
    std_error: float
    n_samples: int
    method_id: str
    dataset_id: str = ""

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError(f"mse must be nonnegative, got {self.mse}")
        if self.std_error < 0:
            raise ValueError(f"std_error must be nonnegative, got {self.std_error}")

    def to_doc(self) -> dict:
        return envelope(
            "mse-report",
            1,
            {
                "mse": self.mse,
                "std_error": self.std_error,
                "n_samples": self.n_samples,
                "method_id": self.method_id,
                "dataset_id": self.dataset_id,
            },
        )


def mse_table_csv(reports: list[MseReport]) -> str:
    """One row per report: dataset, method, mse, std_error."""
    out = io.StringIO()
    out.write("dataset,method,mse,std_error\n")
    for r in reports:
        out.write(f"{r.dataset_id},{r.method_id},{r.mse:.6g},{r.std_error:.6g}\n")
    return out.getvalue()


def value_function_mse(
    target_model,
    vf_factory,
    data: np.ndarray,
    n_samples: int,
    seed: int = 0,
    dataset_id: str = "",
    chunk_rows: int = 4096,
) -> MseReport:
    """MC estimate of E_x E_S E_y |f_y(x) - v_hat_{f_y(x)}(S)|^2.

    Points are drawn from ``data``, coalitions with the combinatorial
    weights of the Shapley sum (the full coalition never appears), and the
    class label y uniformly. ``vf_factory`` is either a value-function
    family or a zero-argument callable building a fresh one; pass a
    callable when the family draws inner samples, so repeated calls see
    identical streams.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise DataError(f"data must be a nonempty 2-D array, got shape {data.shape}")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2 for a std error")
    family = vf_factory() if not hasattr(vf_factory, "evaluate") else vf_factory
    n = data.shape[1]

    base = seed & 0x7FFFFFFF
    idx = np.random.default_rng([base, _POINT_TAG]).integers(0, len(data), n_samples)
    masks = sample_shapley_coalitions(
        n, n_samples, np.random.default_rng([base, _COALITION_TAG])
    )
    n_classes = np.asarray(target_model.predict_proba(data[:1])).shape[-1]
    Y = np.random.default_rng([base, _LABEL_TAG]).integers(0, n_classes, n_samples)

    X = data[idx]
    sq = np.empty(n_samples)
    for start in range(0, n_samples, chunk_rows):
        sl = slice(start, min(start + chunk_rows, n_samples))
        fvals = target_model.prob_of(X[sl], Y[sl])
        vhat = family.evaluate(X[sl], Y[sl], masks[sl])
        sq[sl] = (np.asarray(fvals) - np.asarray(vhat)) ** 2
    mse = float(sq.mean())
    se = float(sq.std(ddof=1) / np.sqrt(n_samples))
    return MseReport(mse, se, n_samples, getattr(family, "vf_id", "unknown"), dataset_id)


def explanation_error_rate(
    attributions: list[Attribution], ground_truth_features
) -> float:
    """Fraction of attributions whose top-k features miss the ground truth.

    k is the ground-truth size; a value tie straddling the k-th rank counts
    as an error (conservative: the top-k set is then not well defined).
    """
    if len(attributions) == 0:
        raise DataError("need at least one attribution")
    truth = frozenset(int(i) for i in ground_truth_features)
    k = len(truth)
    if k == 0:
        raise DataError("ground truth feature set is empty")
    errors = 0
    for attr in attributions:
        values = np.asarray(attr.values, dtype=np.float64)
        if max(truth) >= len(values):
            raise InputShapeError(
                f"ground truth feature {max(truth)} outside 0..{len(values) - 1}"
            )
        order = np.argsort(-values, kind="stable")
        boundary_tie = k < len(values) and values[order[k - 1]] == values[order[k]]
        if boundary_tie or frozenset(order[:k].tolist()) != truth:
            errors += 1
    return errors / len(attributions)


@dataclass(frozen=True)
class AgreementReport:
    spearman_rho: float
    max_abs_diff: float
    within_error_bars: float  # fraction of features, at n_sigmas combined SEs


def attribution_agreement(
    a: Attribution, b: Attribution, n_sigmas: float = 3.0
) -> AgreementReport:
    """Rank correlation and per-feature closeness of two attribution vectors."""
    va, vb = np.asarray(a.values), np.asarray(b.values)
    if va.shape != vb.shape:
        raise InputShapeError(f"feature counts differ: {va.shape} vs {vb.shape}")
    if a.feature_names and b.feature_names and a.feature_names != b.feature_names:
        raise InputShapeError("feature names differ between attributions")
    if np.array_equal(va, vb):
        rho = 1.0  # covers constant vectors, where spearman is undefined
    elif np.ptp(va) == 0 or np.ptp(vb) == 0:
        rho = float("nan")
    else:
        rho = float(spearmanr(va, vb).statistic)
    diff = np.abs(va - vb)
    combined = n_sigmas * np.sqrt(
        np.asarray(a.std_errors) ** 2 + np.asarray(b.std_errors) ** 2
    )
    return AgreementReport(
        spearman_rho=rho,
        max_abs_diff=float(diff.max()),
        within_error_bars=float((diff <= combined).mean()),
    )


def gini_coefficient(values: np.ndarray) -> float:
    """Concentration of |values| in [0, 1]: 0 spread evenly, 1 on one entry."""
    v = np.sort(np.abs(np.asarray(values, dtype=np.float64)))
    if v.ndim != 1 or len(v) == 0:
        raise InputShapeError("values must be a nonempty 1-D array")
    total = v.sum()
    if total == 0.0:
        return 0.0
    n = len(v)
    ranks = np.arange(1, n + 1)
    return float(((2 * ranks - n - 1) * v).sum() / (n * total))
