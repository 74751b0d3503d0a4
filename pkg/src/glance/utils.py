"""Seeding, hashing and input validation helpers shared across modules."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .exceptions import DivergenceError


def stream_seed(seed: int, name: str) -> list[int]:
    """Derive an independent entropy list for the named component stream."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return [int(seed), tag]


def make_rng(seed: int, name: str = "", *extra: int) -> np.random.Generator:
    """Seeded generator for one named stream; ``extra`` ints split it further."""
    return np.random.default_rng(stream_seed(seed, name) + [int(e) for e in extra])


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: str | Path) -> str:
    return sha256_hex(Path(path).read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def check_finite(arr: np.ndarray, what: str, epoch: int | None = None) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values in {what}", epoch=epoch)
    return arr


def check_2d(X, n_cols: int | None = None, what: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{what} must be 2-D, got shape {X.shape}")
    if n_cols is not None and X.shape[1] != n_cols:
        raise ValueError(f"{what} has {X.shape[1]} columns, expected {n_cols}")
    return X


def check_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be a 1-D integer array")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))
