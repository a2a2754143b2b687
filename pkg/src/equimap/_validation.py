"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np


def check_image(x, name="image"):
    """Return ``x`` as a float64 ``(H, W)`` or ``(H, W, 3)`` array in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[:, :, 0]
    if x.ndim not in (2, 3) or (x.ndim == 3 and x.shape[2] != 3):
        raise ValueError(f"{name} must have shape (H, W) or (H, W, 3), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return x


def check_images(X, name="images"):
    """Stack a batch of images into an ``(N, H, W[, 3])`` float64 array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim not in (3, 4):
        raise ValueError(f"{name} must be a batch of images, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contain non-finite values")
    return X


def check_finite(a, name="array"):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_random_state(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
