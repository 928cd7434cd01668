"""Versioned JSON documents, atomic file writes, content fingerprints.

Every artifact on disk is a JSON object carrying "format" and "version"
keys so readers can refuse documents they do not understand. Floats are
serialized with Python's repr (shortest round-trip representation), so a
dump/load cycle is lossless at full float64 precision.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from typing import Any

import numpy as np

from .errors import SchemaError


def envelope(fmt: str, version: int, payload: dict[str, Any]) -> dict[str, Any]:
    doc: dict[str, Any] = {"format": fmt, "version": version}
    doc.update(payload)
    return doc


def check_envelope(doc: dict[str, Any], fmt: str, max_version: int) -> int:
    """Validate format/version keys; return the document version."""
    if not isinstance(doc, dict):
        raise SchemaError(f"expected a JSON object, got {type(doc).__name__}")
    got_fmt = doc.get("format")
    if got_fmt != fmt:
        raise SchemaError(f"expected format {fmt!r}, got {got_fmt!r}")
    version = doc.get("version")
    if not isinstance(version, int) or not 1 <= version <= max_version:
        raise SchemaError(
            f"unsupported {fmt} version {version!r} (this build reads <= {max_version})"
        )
    return version


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy scalars/arrays so json.dumps accepts them."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def dumps_doc(doc: dict[str, Any]) -> str:
    return json.dumps(to_jsonable(doc), indent=2, sort_keys=True) + "\n"


def write_json_atomic(path: str, doc: dict[str, Any]) -> None:
    """Write via a temp file in the same directory, then rename over path."""
    text = dumps_doc(doc)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path: str, fmt: str | None = None, max_version: int = 1) -> dict[str, Any]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    if fmt is not None:
        check_envelope(doc, fmt, max_version)
    return doc


def append_jsonl(path: str, record: dict[str, Any]) -> None:
    """Append one record to a line-delimited JSON file (flush per line)."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    line = json.dumps(to_jsonable(record), sort_keys=True)
    with open(path, "a") as fh:
        fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_jsonl(path: str) -> list[dict[str, Any]]:
    records = []
    if not os.path.exists(path):
        return records
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: bad JSONL record ({exc})") from exc
    return records


def fingerprint_arrays(*arrays: np.ndarray) -> str:
    """SHA-256 over dtype, shape, and C-order bytes of each array."""
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def fingerprint_file(path: str, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()
