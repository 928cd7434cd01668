"""Synthetic data generators, tabular/IDX loaders, preprocessing, splits.

All generated and loaded datasets satisfy two invariants: no feature
value equals -1 (that value is reserved as the missing-feature sentinel
by the conditional imputer), and train/val/test splits are disjoint and
reproducible from the seed.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError
from .serialize import envelope, fingerprint_arrays

SENTINEL = -1.0
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass(frozen=True)
class ColumnSpec:
    """Post-preprocessing description of one feature column."""

    name: str
    kind: str  # "binary" | "categorical" | "continuous"
    n_categories: int | None = None
    scaled_range: tuple[float, float] | None = None  # original (lo, hi) for continuous

    def __post_init__(self):
        if self.kind not in ("binary", "categorical", "continuous"):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.kind == "categorical" and (self.n_categories is None or self.n_categories < 2):
            raise ValueError(f"categorical column {self.name!r} needs n_categories >= 2")

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "n_categories": self.n_categories,
            "scaled_range": list(self.scaled_range) if self.scaled_range else None,
        }


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        parts = [np.asarray(p, dtype=np.int64) for p in (self.train, self.val, self.test)]
        object.__setattr__(self, "train", parts[0])
        object.__setattr__(self, "val", parts[1])
        object.__setattr__(self, "test", parts[2])
        combined = np.concatenate(parts)
        if len(np.unique(combined)) != len(combined):
            raise DataError("split index sets overlap")


def make_split(n: int, seed: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Split:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be 3 nonnegative values summing to 1, got {fractions}")
    order = np.random.default_rng([seed & 0x7FFFFFFF, 0x517]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return Split(order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])


@dataclass
class Dataset:
    name: str
    features: np.ndarray
    schema: list[ColumnSpec]
    labels: np.ndarray | None
    split: Split
    fingerprint: str = ""
    seed: int | None = None
    source: str | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if len(self.schema) != self.features.shape[1]:
            raise DataError(
                f"schema has {len(self.schema)} columns, features have {self.features.shape[1]}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.features):
                raise DataError("labels length does not match features")
        if (self.features == SENTINEL).any():
            raise DataError(
                f"dataset {self.name!r} contains the reserved sentinel value {SENTINEL}"
            )
        for part in (self.split.train, self.split.val, self.split.test):
            if len(part) and (part.min() < 0 or part.max() >= len(self.features)):
                raise DataError("split indices out of range")
        if not self.fingerprint:
            arrays = [self.features]
            if self.labels is not None:
                arrays.append(np.asarray(self.labels))
            self.fingerprint = fingerprint_arrays(*arrays)

    @property
    def n_points(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        if self.labels is None:
            raise DataError(f"dataset {self.name!r} is unlabeled")
        return int(np.max(self.labels)) + 1

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.schema]

    def part(self, which: str) -> tuple[np.ndarray, np.ndarray | None]:
        idx = getattr(self.split, which)
        y = self.labels[idx] if self.labels is not None else None
        return self.features[idx], y

    def manifest(self) -> dict:
        return envelope(
            "dataset-manifest",
            1,
            {
                "name": self.name,
                "source": self.source,
                "seed": self.seed,
                "n_points": self.n_points,
                "n_features": self.n_features,
                "schema": [c.to_doc() for c in self.schema],
                "labeled": self.labels is not None,
                "split_sizes": {
                    "train": len(self.split.train),
                    "val": len(self.split.val),
                    "test": len(self.split.test),
                },
                "fingerprint": self.fingerprint,
            },
        )


# --------------------------------------------------------------------------
# Synthetic: latent-bit outlier process
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OutlierGenConfig:
    sigma: float
    n_points: int = 10_000
    outlier_fraction: float = 0.01
    n_features: int = 20
    flipped_features: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must lie in (0, 1)")
        if not 0 < self.flipped_features <= self.n_features:
            raise ValueError("flipped_features must lie in [1, n_features]")


def gen_outlier_data(cfg: OutlierGenConfig) -> Dataset:
    """Inliers draw every feature around a shared latent bit z; outliers
    draw the first flipped_features features around 1 - z instead.

    The outlier count is the deterministic rounded fraction (a 99:1 split
    at the defaults), label 1 marks outliers, and rows are shuffled.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_points
    n_out = int(round(cfg.outlier_fraction * n))
    z = rng.integers(0, 2, size=n).astype(float)
    X = rng.normal(loc=z[:, None], scale=cfg.sigma, size=(n, cfg.n_features))
    is_out = np.zeros(n, dtype=bool)
    is_out[:n_out] = True
    flipped = np.arange(cfg.flipped_features)
    X[np.ix_(is_out, flipped)] = rng.normal(
        loc=(1.0 - z[is_out])[:, None], scale=cfg.sigma, size=(n_out, cfg.flipped_features)
    )
    order = rng.permutation(n)
    X, z, is_out = X[order], z[order], is_out[order]
    schema = [ColumnSpec(f"f{i:02d}", "continuous") for i in range(cfg.n_features)]
    return Dataset(
        name=f"outlier-sigma{cfg.sigma:g}",
        features=X,
        schema=schema,
        labels=is_out.astype(int),
        split=make_split(n, cfg.seed),
        seed=cfg.seed,
        extras={
            "z": z,
            "flipped_columns": flipped.tolist(),
            "sigma": cfg.sigma,
            "outlier_fraction": cfg.outlier_fraction,
        },
    )


# --------------------------------------------------------------------------
# Synthetic: correlated two-feature process
# --------------------------------------------------------------------------


def two_feature_table(joint_x: np.ndarray, p_y1_given_x: np.ndarray) -> np.ndarray:
    """Assemble p[x0, x1, y] from p(x0, x1) and p(y=1 | x0, x1)."""
    joint_x = np.asarray(joint_x, dtype=float)
    cond = np.asarray(p_y1_given_x, dtype=float)
    table = np.empty((2, 2, 2))
    table[:, :, 1] = joint_x * cond
    table[:, :, 0] = joint_x * (1.0 - cond)
    return table


# Strongly correlated features; at fixed x0, setting x1 = 1 slightly
# lowers p(y=1). The second feature then hurts off-manifold value
# (spliced x1 breaks the correlation) while still carrying predictive
# information on-manifold through x0.
DEFAULT_TWO_FEATURE_TABLE = two_feature_table(
    joint_x=[[0.45, 0.05], [0.05, 0.45]],
    p_y1_given_x=[[0.10, 0.06], [0.90, 0.86]],
)


def check_two_feature_table(table: np.ndarray) -> dict:
    """Structure report: feature correlation sign and the x1 effect signs."""
    p_x = table.sum(axis=2)
    e0 = p_x[1, :].sum()
    e1 = p_x[:, 1].sum()
    cov = p_x[1, 1] - e0 * e1
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = table[:, :, 1] / p_x
    return {
        "correlation_positive": bool(cov > 0),
        "x1_lowers_rate_at_x0_0": bool(cond[0, 1] < cond[0, 0]),
        "x1_lowers_rate_at_x0_1": bool(cond[1, 1] < cond[1, 0]),
    }


def validate_two_feature_table(table: np.ndarray) -> np.ndarray:
    table = np.asarray(table, dtype=float)
    if table.shape != (2, 2, 2):
        raise DataError(f"two-feature table must have shape (2, 2, 2), got {table.shape}")
    if (table < 0).any():
        raise DataError("two-feature table has negative cells")
    if abs(table.sum() - 1.0) > 1e-9:
        raise DataError(f"two-feature table sums to {table.sum():.12g}, expected 1")
    return table


def gen_two_feature_data(
    table: np.ndarray | None = None, n_points: int = 10_000, seed: int = 0
) -> Dataset:
    """I.i.d. draws of (x0, x1, y) from a 4-cell joint distribution."""
    table = validate_two_feature_table(DEFAULT_TWO_FEATURE_TABLE if table is None else table)
    rng = np.random.default_rng(seed)
    flat = table.reshape(-1)
    cells = rng.choice(8, size=n_points, p=flat)
    x0 = cells >> 2 & 1
    x1 = cells >> 1 & 1
    y = cells & 1
    X = np.column_stack([x0, x1]).astype(float)
    schema = [ColumnSpec("x0", "binary"), ColumnSpec("x1", "binary")]
    return Dataset(
        name="two-feature",
        features=X,
        schema=schema,
        labels=y.astype(int),
        split=make_split(n_points, seed),
        seed=seed,
        extras={"table": table},
    )


# --------------------------------------------------------------------------
# Synthetic: census-style stand-in with a correlated sensitive feature
# --------------------------------------------------------------------------


def gen_censuslike_data(n_points: int = 8_000, seed: int = 0) -> Dataset:
    """Income-style classification with a binary sensitive feature.

    A scalar latent "propensity" drives four noisy continuous covariates,
    the binary sensitive feature, and the label, so the sensitive feature
    is a strong proxy that a model can use but does not strictly need.
    Three independent uniform noise columns pad the feature set.
    """
    rng = np.random.default_rng(seed)
    t = rng.normal(size=n_points)

    def noisy_view(a, b):
        return 1.0 / (1.0 + np.exp(-(a * t + b * rng.normal(size=n_points))))

    age = noisy_view(0.6, 0.8)
    education = noisy_view(0.9, 0.55)
    hours = noisy_view(0.7, 0.7)
    capital = noisy_view(0.5, 0.9)
    sensitive = (1.2 * t + 0.5 * rng.normal(size=n_points) > 0).astype(float)
    noise = rng.uniform(size=(n_points, 3))
    y = (t + 0.25 * rng.normal(size=n_points) > 0.6).astype(int)

    X = np.column_stack([age, education, hours, capital, sensitive, noise])
    schema = [
        ColumnSpec("age", "continuous", scaled_range=(0.0, 1.0)),
        ColumnSpec("education", "continuous", scaled_range=(0.0, 1.0)),
        ColumnSpec("hours", "continuous", scaled_range=(0.0, 1.0)),
        ColumnSpec("capital", "continuous", scaled_range=(0.0, 1.0)),
        ColumnSpec("sensitive", "binary"),
        ColumnSpec("noise0", "continuous", scaled_range=(0.0, 1.0)),
        ColumnSpec("noise1", "continuous", scaled_range=(0.0, 1.0)),
        ColumnSpec("noise2", "continuous", scaled_range=(0.0, 1.0)),
    ]
    return Dataset(
        name="census-standin",
        features=X,
        schema=schema,
        labels=y,
        split=make_split(n_points, seed),
        seed=seed,
        extras={"sensitive_column": 4},
    )


# --------------------------------------------------------------------------
# Tabular loading
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnRule:
    """How to turn one source column into one feature column.

    transform, when given, maps the raw string column to floats and the
    kind describes the transformed values. Without it: continuous parses
    floats and min-max scales to [0, 1]; binary requires {0, 1} values;
    categorical integer-codes the sorted distinct strings.
    """

    name: str
    source_index: int
    kind: str
    transform: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class LabelRule:
    """How to derive the integer label column, if any."""

    name: str
    source_index: int
    transform: Callable[[np.ndarray], np.ndarray]


def _parse_continuous(name: str, raw: np.ndarray) -> np.ndarray:
    try:
        return raw.astype(float)
    except ValueError:
        for i, v in enumerate(raw):
            try:
                float(v)
            except ValueError:
                raise DataError(f"column {name!r}, row {i}: cannot parse {v!r} as a number")
        raise


def _minmax_scale(values: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values), (lo, hi)
    return (values - lo) / (hi - lo), (lo, hi)


def load_tabular(
    path: str,
    columns: Sequence[ColumnRule],
    label: LabelRule | None,
    delimiter: str = ",",
    name: str | None = None,
    seed: int = 0,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    missing_token: str | None = None,
    download_hint: str = "",
) -> Dataset:
    """Load a delimited text file under explicit per-column rules."""
    if not os.path.exists(path):
        hint = f" {download_hint}" if download_hint else ""
        raise DataError(f"data file not found: {path}.{hint}")
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            rows.append([cell.strip() for cell in line.split(delimiter)])
    if not rows:
        raise DataError(f"{path}: no data rows")
    needed = [c.source_index for c in columns] + ([label.source_index] if label else [])
    width = max(needed) + 1
    for i, row in enumerate(rows):
        if len(row) < width:
            raise DataError(f"{path}: row {i} has {len(row)} fields, need at least {width}")
    raw = np.array([[row[j] for j in range(width)] for row in rows], dtype=object)

    n_dropped = 0
    if missing_token is not None:
        used = raw[:, needed]
        keep = ~(used == missing_token).any(axis=1)
        n_dropped = int((~keep).sum())
        raw = raw[keep]
        if len(raw) == 0:
            raise DataError(f"{path}: every row contains the missing token {missing_token!r}")

    feature_cols = []
    schema = []
    for rule in columns:
        col = raw[:, rule.source_index].astype(str)
        if rule.transform is not None:
            values = np.asarray(rule.transform(col), dtype=float)
            spec = ColumnSpec(rule.name, rule.kind)
        elif rule.kind == "continuous":
            values, rng_pair = _minmax_scale(_parse_continuous(rule.name, col))
            spec = ColumnSpec(rule.name, "continuous", scaled_range=rng_pair)
        elif rule.kind == "binary":
            values = _parse_continuous(rule.name, col)
            if not np.isin(values, (0.0, 1.0)).all():
                raise DataError(f"column {rule.name!r}: binary column has values outside {{0,1}}")
            spec = ColumnSpec(rule.name, "binary")
        else:
            levels = sorted(set(col))
            codes = {v: i for i, v in enumerate(levels)}
            values = np.array([codes[v] for v in col], dtype=float)
            spec = ColumnSpec(rule.name, "categorical", n_categories=len(levels))
        feature_cols.append(values)
        schema.append(spec)

    labels = None
    if label is not None:
        labels = np.asarray(label.transform(raw[:, label.source_index].astype(str)), dtype=int)

    X = np.column_stack(feature_cols)
    return Dataset(
        name=name or os.path.basename(path),
        features=X,
        schema=schema,
        labels=labels,
        split=make_split(len(X), seed, fractions),
        seed=seed,
        source=path,
        extras={"n_rows_dropped_missing": n_dropped},
    )


# ---------------------------------------------------------------- presets


def _ever_consumed(values: np.ndarray) -> np.ndarray:
    """Usage-class strings: CL0 means never used; anything else counts."""
    bad = set(values) - {f"CL{i}" for i in range(7)}
    if bad:
        raise DataError(f"unexpected usage classes {sorted(bad)!r}; expected CL0..CL6")
    return (values != "CL0").astype(float)


# Source column order in the UCI drug-consumption file: id, 12 quantified
# demographic/personality columns, then 19 usage-class columns. The ten
# feature drugs below (plus the label drug) are the recreational
# substances; legal everyday ones (alcohol, caffeine, chocolate,
# nicotine) and the fictitious control column are left out.
DRUG_SOURCE_COLUMNS = {
    "amphetamines": 14,
    "benzodiazepines": 16,
    "cannabis": 18,
    "cocaine": 20,
    "crack": 21,
    "ecstasy": 22,
    "heroin": 23,
    "ketamine": 24,
    "meth": 27,
    "mushrooms": 28,
}
DRUG_LABEL_COLUMN = 26  # LSD


def drug_column_rules() -> list[ColumnRule]:
    return [
        ColumnRule(name, idx, "binary", transform=_ever_consumed)
        for name, idx in DRUG_SOURCE_COLUMNS.items()
    ]


def load_drug(path: str, seed: int = 0) -> Dataset:
    """Ten ever-consumed drug indicators; label: ever consumed LSD."""
    return load_tabular(
        path,
        drug_column_rules(),
        LabelRule("lsd", DRUG_LABEL_COLUMN, lambda v: _ever_consumed(v).astype(int)),
        name="drug",
        seed=seed,
        download_hint=(
            "Supply the UCI drug consumption (quantified) data file "
            "(drug_consumption.data, comma-delimited, 32 columns)."
        ),
    )


def _older_than_median(values: np.ndarray) -> np.ndarray:
    rings = values.astype(float)
    return (rings > np.median(rings)).astype(int)


def abalone_column_rules() -> list[ColumnRule]:
    names = [
        ("sex", 0, "categorical"),
        ("length", 1, "continuous"),
        ("diameter", 2, "continuous"),
        ("height", 3, "continuous"),
        ("whole_weight", 4, "continuous"),
        ("shucked_weight", 5, "continuous"),
        ("viscera_weight", 6, "continuous"),
        ("shell_weight", 7, "continuous"),
    ]
    return [ColumnRule(n, i, k) for n, i, k in names]


def load_abalone(path: str, seed: int = 0) -> Dataset:
    """Eight physical measurements; label: older than the median age."""
    return load_tabular(
        path,
        abalone_column_rules(),
        LabelRule("older_than_median", 8, _older_than_median),
        name="abalone",
        seed=seed,
        download_hint="Supply the UCI abalone.data file (comma-delimited, 9 columns).",
    )


def _income_over_50k(values: np.ndarray) -> np.ndarray:
    return np.array([1 if v.rstrip(".").endswith(">50K") else 0 for v in values], dtype=int)


def census_column_rules() -> list[ColumnRule]:
    # 13 of the 14 source columns; the sampling-weight column is dropped
    names = [
        ("age", 0, "continuous"),
        ("workclass", 1, "categorical"),
        ("education", 3, "categorical"),
        ("education_num", 4, "continuous"),
        ("marital_status", 5, "categorical"),
        ("occupation", 6, "categorical"),
        ("relationship", 7, "categorical"),
        ("race", 8, "categorical"),
        ("sex", 9, "categorical"),
        ("capital_gain", 10, "continuous"),
        ("capital_loss", 11, "continuous"),
        ("hours_per_week", 12, "continuous"),
        ("native_country", 13, "categorical"),
    ]
    return [ColumnRule(n, i, k) for n, i, k in names]


def load_census(path: str, seed: int = 0) -> Dataset:
    """Thirteen demographic features; label: income over 50k."""
    return load_tabular(
        path,
        census_column_rules(),
        LabelRule("income_over_50k", 14, _income_over_50k),
        name="census",
        seed=seed,
        missing_token="?",
        download_hint="Supply the UCI adult.data file (comma-delimited, 15 columns).",
    )


# --------------------------------------------------------------------------
# IDX image loading
# --------------------------------------------------------------------------


def _read_idx(path: str, expected_magic: int, what: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise DataError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">i", header)
        if magic != expected_magic:
            raise DataError(
                f"{path}: bad IDX magic {magic:#x} for {what} (expected {expected_magic:#x})"
            )
        n_dims = magic & 0xFF
        dims = struct.unpack(f">{n_dims}i", fh.read(4 * n_dims))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    expected = int(np.prod(dims))
    if data.size != expected:
        raise DataError(f"{path}: payload has {data.size} bytes, header promises {expected}")
    return data.reshape(dims)


def load_binary_mnist(
    images_path: str,
    labels_path: str,
    threshold: float = 0.5,
    seed: int = 0,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    name: str = "binary-mnist",
) -> Dataset:
    """IDX image/label pair, pixels thresholded to {0,1} at a fraction
    of the maximum intensity (255)."""
    images = _read_idx(images_path, 0x00000803, "images")
    labels = _read_idx(labels_path, 0x00000801, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    n, h, w = images.shape
    X = (images.reshape(n, h * w).astype(float) / 255.0 > threshold).astype(float)
    schema = [ColumnSpec(f"px{r:02d}_{c:02d}", "binary") for r in range(h) for c in range(w)]
    return Dataset(
        name=name,
        features=X,
        schema=schema,
        labels=labels.astype(int),
        split=make_split(n, seed, fractions),
        seed=seed,
        source=images_path,
        extras={"image_shape": (h, w), "threshold": threshold},
    )
