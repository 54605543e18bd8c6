"""Input checks shared by the estimator API and the CLI."""

from pathlib import Path

import numpy as np
from sklearn.utils.validation import check_array

from .dataset import Dataset


def check_positions(X, name="X", min_rows=1):
    """Finite (n, 3) float array."""
    X = check_array(X, dtype=float, ensure_2d=True, ensure_min_samples=min_rows,
                    input_name=name)
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have 3 columns, got {X.shape[1]}")
    return X


def check_times(t, name="times", strict=False):
    """Finite 1-D float array in (strictly, if asked) increasing order."""
    t = check_array(np.asarray(t, dtype=float).reshape(-1, 1), dtype=float,
                    input_name=name).ravel()
    d = np.diff(t)
    if np.any(d <= 0 if strict else d < 0):
        raise ValueError(f"{name} must be {'strictly ' if strict else ''}increasing")
    return t


def check_paired(X, y, min_rows=3):
    X = check_positions(X, "X", min_rows)
    y = check_positions(y, "y", min_rows)
    if len(X) != len(y):
        raise ValueError(f"X and y differ in length ({len(X)} vs {len(y)})")
    return X, y


def check_dataset(data):
    """A :class:`Dataset`, reading it first when given a manifest path."""
    if isinstance(data, Dataset):
        return data
    if isinstance(data, (str, Path)):
        from .flowio import read_dataset
        return read_dataset(data)
    raise TypeError(f"expected a Dataset or manifest path, got {type(data).__name__}")


def check_positive(value, name, allow_zero=False):
    value = float(value)
    if not np.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}")
    return value
