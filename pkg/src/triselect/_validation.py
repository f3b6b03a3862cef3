"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .errors import AsymmetricInput, InvalidSigma


def check_positive(value, name, error=ValueError):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise error(f"{name} must be a finite positive number, got {value!r}")
    return float(value)


def check_sigma(sigma, name="sigma"):
    return check_positive(sigma, name, error=InvalidSigma)


def check_unit_interval(value, name, *, low_open=False):
    ok = isinstance(value, numbers.Real) and np.isfinite(value)
    ok = ok and (0 < value <= 1 if low_open else 0 <= value <= 1)
    if not ok:
        bounds = "(0, 1]" if low_open else "[0, 1]"
        raise ValueError(f"{name} must lie in {bounds}, got {value!r}")
    return float(value)


def check_features(X, *, min_samples=1):
    """Validate a (n, 4) view-feature matrix."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_samples)
    if X.shape[1] != 4:
        raise ValueError(f"view features must have 4 columns, got {X.shape[1]}")
    return X


def check_square_symmetric(S, name="similarity", atol=1e-9):
    S = check_array(S, dtype=np.float64, ensure_min_samples=0, ensure_min_features=0)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got shape {S.shape}")
    if S.size and np.max(np.abs(S - S.T)) > atol:
        raise AsymmetricInput(f"{name} is not symmetric within {atol}")
    return S


def check_pids(pids, n):
    if pids is None:
        return np.arange(n, dtype=np.int64)
    pids = np.asarray(pids, dtype=np.int64)
    if pids.shape != (n,):
        raise ValueError(f"expected {n} pids, got shape {pids.shape}")
    if len(np.unique(pids)) != n:
        raise ValueError("pids must be unique")
    return pids
