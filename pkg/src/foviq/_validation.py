"""Input validation helpers used by the estimators and the functional API."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import InvalidArgumentError


def check_positive(value, name, *, allow_zero=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise InvalidArgumentError(f"{name} must be a finite real number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise InvalidArgumentError(f"{name} must be {bound}, got {value!r}")
    return float(value)


def check_eccentricity(E, name="eccentricity"):
    arr = np.asarray(E, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidArgumentError(f"{name} must be finite and >= 0, got {E!r}")
    return arr


def check_ecc_bins(bins):
    """Return eccentricity bin left edges as a float array.

    Bins must be non-empty, strictly increasing and start at 0 dva.
    """
    arr = np.atleast_1d(np.asarray(bins, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidArgumentError("ecc_bins must be a non-empty 1D sequence")
    if arr[0] != 0.0:
        raise InvalidArgumentError(f"ecc_bins must start at 0, got {arr[0]}")
    if np.any(np.diff(arr) <= 0):
        raise InvalidArgumentError("ecc_bins must be strictly increasing")
    return arr


def parse_bins(text):
    """Parse ``start:step:stop`` (inclusive stop) into bin left edges."""
    try:
        start, step, stop = (float(p) for p in str(text).split(":"))
    except ValueError:
        raise InvalidArgumentError(f"bins must look like start:step:stop, got {text!r}") from None
    if step <= 0 or stop < start:
        raise InvalidArgumentError(f"bad bin range {text!r}")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return check_ecc_bins(start + step * np.arange(n))


def parse_dims(text, n=3):
    """Parse ``WxH`` or ``WxHxD`` into a tuple of positive ints."""
    try:
        dims = tuple(int(p) for p in str(text).lower().split("x"))
    except ValueError:
        raise InvalidArgumentError(f"dims must look like {'x'.join('N' * n)}, got {text!r}") from None
    if len(dims) != n or any(d < 1 for d in dims):
        raise InvalidArgumentError(f"expected {n} positive dims, got {text!r}")
    return dims


def check_patches(X, patch_shape=None):
    """Validate a stack of image patches, shape ``(n_samples, *patch_shape)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim < 3:
        raise InvalidArgumentError(f"expected a stack of 2D or 3D patches, got shape {X.shape}")
    if patch_shape is not None and X.shape[1:] != tuple(patch_shape):
        raise InvalidArgumentError(f"patch shape {X.shape[1:]} does not match {tuple(patch_shape)}")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("patches contain non-finite values")
    return X


def check_same_shape(a, b, what="arrays"):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"{what} shape mismatch: {a.shape} vs {b.shape}")
    return a, b
