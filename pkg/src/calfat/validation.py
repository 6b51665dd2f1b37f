"""Input validation helpers shared by the estimator and the data layer."""

from __future__ import annotations

import numpy as np


def check_feature_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    Xa = np.asarray(X, dtype=np.float64)
    if Xa.ndim == 1:
        Xa = Xa[:, None]
    if Xa.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {Xa.shape}")
    if Xa.shape[0] == 0:
        raise ValueError(f"{name} has no rows")
    if not np.all(np.isfinite(Xa)):
        raise ValueError(f"{name} contains NaN or infinite entries")
    return Xa


def check_labels(y, n_rows: int, name: str = "y") -> np.ndarray:
    """Coerce to a 1-D integer-like label array of the expected length."""
    ya = np.asarray(y)
    if ya.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {ya.shape}")
    if ya.shape[0] != n_rows:
        raise ValueError(f"{name} has {ya.shape[0]} entries for {n_rows} rows")
    return ya


def check_fitted(obj, attr: str) -> None:
    if not hasattr(obj, attr):
        from sklearn.exceptions import NotFittedError

        raise NotFittedError(
            f"This {type(obj).__name__} instance is not fitted yet; call fit first."
        )
