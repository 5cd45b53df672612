"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .location_prior import LocationDistribution
from .mesh_env import EnvDescriptor


def check_observations(X) -> np.ndarray:
    """Stack of observation volumes, shape ``(n, T, X, Y, C_f)``."""
    if isinstance(X, (list, tuple)) and X and hasattr(X[0], "obs"):
        X = np.stack([ep.obs for ep in X])
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim != 5:
        raise ValueError(f"expected observations of shape (n, T, X, Y, C), got {X.shape}")
    return X


def check_labels(y, n_samples: int, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be 1-D with {n_samples} entries")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer action ids")
    y = y.astype(np.int64)
    if y.min() < 0 or (n_classes is not None and y.max() >= n_classes):
        raise ValueError("labels must lie in [0, n_classes)")
    return y


def check_priors(priors, n_samples: int, dims) -> np.ndarray:
    """Stack of prior distributions ``(n, W, D, H)``; ``None`` means uniform."""
    dims = tuple(dims)
    if priors is None:
        return np.full((n_samples,) + dims, 1.0 / np.prod(dims))
    if isinstance(priors, (list, tuple)):
        priors = np.stack([p.probs if isinstance(p, LocationDistribution) else np.asarray(p)
                           for p in priors])
    priors = check_array(priors, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if priors.shape[0] != n_samples:
        raise ValueError("priors and observations differ in length")
    if np.any(priors < 0):
        raise ValueError("priors must be non-negative")
    sums = priors.reshape(n_samples, -1).sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("each prior must sum to 1")
    return priors


def check_env(env) -> EnvDescriptor:
    if not isinstance(env, EnvDescriptor):
        raise TypeError(f"env must be an EnvDescriptor, got {type(env).__name__}")
    return env
