"""Input validation helpers shared by estimators and pipelines."""

from __future__ import annotations

import numpy as np


def check_feature_matrix(X, n_features: int | None = None) -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally pinning the width."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite entries")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def check_labels(y, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"expected a 1-D label vector, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != y.astype(np.int64)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ValueError(f"label {y.max()} outside {n_classes} classes")
    return y


def check_token_ids(tokens, vocab_size: int | None = None) -> list[int]:
    ids = [int(t) for t in tokens]
    if vocab_size is not None:
        for t in ids:
            if not 0 <= t < vocab_size:
                raise ValueError(f"token id {t} outside vocabulary of size {vocab_size}")
    return ids


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value
