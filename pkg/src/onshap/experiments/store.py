"""Dataset references: small JSON documents that rebuild a dataset.

Datasets are deterministic functions of a builder name plus parameters
(a generator seed, or a source file path), so artifacts store the recipe
for the data rather than the data itself. Rebuilding verifies the
recorded fingerprint, which catches both changed source files and
builder drift.
"""

from __future__ import annotations

from typing import Callable

from ..datasets import (
    ColumnSpec,
    Dataset,
    OutlierGenConfig,
    gen_censuslike_data,
    gen_outlier_data,
    gen_two_feature_data,
    load_abalone,
    load_binary_mnist,
    load_census,
    load_drug,
    make_split,
)
from ..errors import DataError
from ..serialize import envelope, read_json, write_json_atomic

DATASET_REF_FORMAT = "dataset-ref"


def bundled_digits_dataset(seed: int = 0, threshold: float = 0.5) -> Dataset:
    """The 8x8 handwritten digits shipped with scikit-learn, binarized.

    A stand-in for user-supplied IDX digit files: same structure (binary
    pixel grid, 10 classes), two orders of magnitude smaller.
    """
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = bunch.images
    n, h, w = images.shape
    X = (images.reshape(n, h * w) / 16.0 > threshold).astype(float)
    schema = [ColumnSpec(f"px{r:02d}_{c:02d}", "binary") for r in range(h) for c in range(w)]
    return Dataset(
        name="digits8x8-standin",
        features=X,
        schema=schema,
        labels=bunch.target.astype(int),
        split=make_split(n, seed),
        seed=seed,
        extras={"image_shape": (h, w), "threshold": threshold},
    )


def _build_outlier(params: dict) -> Dataset:
    return gen_outlier_data(OutlierGenConfig(**params))


def _build_mnist(params: dict) -> Dataset:
    return load_binary_mnist(
        params["images_path"],
        params["labels_path"],
        threshold=params.get("threshold", 0.5),
        seed=params.get("seed", 0),
    )


DATASET_BUILDERS: dict[str, Callable[[dict], Dataset]] = {
    "outlier": _build_outlier,
    "two_feature": lambda p: gen_two_feature_data(**p),
    "census_standin": lambda p: gen_censuslike_data(**p),
    "digits": lambda p: bundled_digits_dataset(**p),
    "drug": lambda p: load_drug(**p),
    "abalone": lambda p: load_abalone(**p),
    "census": lambda p: load_census(**p),
    "mnist": _build_mnist,
}


def make_dataset(kind: str, params: dict) -> Dataset:
    if kind not in DATASET_BUILDERS:
        raise DataError(
            f"unknown dataset kind {kind!r}; expected one of {sorted(DATASET_BUILDERS)}"
        )
    return DATASET_BUILDERS[kind](dict(params))


def dataset_ref_doc(kind: str, params: dict, dataset: Dataset) -> dict:
    return envelope(
        DATASET_REF_FORMAT,
        1,
        {
            "kind": kind,
            "params": dict(params),
            "fingerprint": dataset.fingerprint,
            "manifest": dataset.manifest(),
        },
    )


def dataset_from_ref(doc: dict, verify: bool = True) -> Dataset:
    from ..serialize import check_envelope

    check_envelope(doc, DATASET_REF_FORMAT, 1)
    dataset = make_dataset(doc["kind"], doc["params"])
    if verify and dataset.fingerprint != doc["fingerprint"]:
        raise DataError(
            f"rebuilt dataset fingerprint {dataset.fingerprint[:12]} does not match "
            f"the reference {doc['fingerprint'][:12]}; the source data changed"
        )
    return dataset


def write_dataset_ref(path: str, kind: str, params: dict, dataset: Dataset) -> dict:
    doc = dataset_ref_doc(kind, params, dataset)
    write_json_atomic(path, doc)
    return doc


def load_dataset_ref(path: str, verify: bool = True) -> Dataset:
    return dataset_from_ref(read_json(path, DATASET_REF_FORMAT), verify=verify)
