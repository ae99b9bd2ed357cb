"""Input validation helpers used by the estimator layer and the CLI."""

import numpy as np

from .errors import ConfigurationError, NumericError


def check_patch_array(X, name="X"):
    """Validate a stacked patch array of shape (N, C, H, W) and return it."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ConfigurationError(
            f"{name} must have shape (n_samples, channels, height, width), got {X.shape}")
    if X.shape[0] == 0:
        raise ConfigurationError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise NumericError(f"{name} contains non-finite values")
    return X


def check_labels(y, n_categories, name="y"):
    """Validate integer category labels in [0, n_categories) and return them."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ConfigurationError(f"{name} must be 1-d, got shape {y.shape}")
    if y.size and (y.dtype.kind not in "iu" or y.min() < 0 or y.max() >= n_categories):
        raise ConfigurationError(
            f"{name} must hold integer labels in [0, {n_categories})")
    return y.astype(np.int64)
