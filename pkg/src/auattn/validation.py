"""Input checks shared by the estimator and the CLI."""

import numpy as np

from .exceptions import ContractError, DimensionError
from .objective import as_label_array


def check_images(X, size=None, channels=3):
    """Return a float array of shape (N, S, S, channels) with values in [0, 1].

    uint8 input is scaled by 1/255; a single (S, S, C) image gains a batch axis.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != channels or X.shape[1] != X.shape[2]:
        raise DimensionError(f"expected images of shape (N, S, S, {channels}), got {X.shape}")
    if size is not None and X.shape[1] != size:
        raise DimensionError(f"expected {size}x{size} images, got {X.shape[1]}x{X.shape[2]}")
    if X.dtype == np.uint8:
        return X.astype(np.float32) / np.float32(255)
    if X.dtype.kind not in "fiu":
        raise ContractError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False) if X.dtype != np.float64 else X
    if X.size and (not np.isfinite(X).all() or X.min() < 0 or X.max() > 1):
        raise ContractError("image values must be finite and lie in [0, 1]")
    return X


def check_labels(y, n_samples=None, n_aus=None):
    y = as_label_array(y)
    if n_samples is not None and len(y) != n_samples:
        raise DimensionError(f"got {len(y)} label rows for {n_samples} images")
    if n_aus is not None and y.shape[1] != n_aus:
        raise DimensionError(f"expected {n_aus} AU columns, got {y.shape[1]}")
    return y
