"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np


def check_image_batch(X, name="X", min_side=1) -> np.ndarray:
    """Coerce ``X`` to a float ``(n, H, W, 3)`` array of gamma-encoded values in [0, 1].

    A single ``H x W x 3`` image is promoted to a batch of one.
    """
    if isinstance(X, (list, tuple)):
        shapes = {np.shape(x) for x in X}
        if len(shapes) > 1:
            raise ValueError(f"{name}: images in a batch must share a shape, got {sorted(shapes)}")
    arr = np.asarray(X)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif not np.issubdtype(arr.dtype, np.floating):
        raise TypeError(f"{name}: expected float or uint8 pixels, got dtype {arr.dtype}")
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name}: expected shape (n, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name}: empty batch")
    if min(arr.shape[1:3]) < min_side:
        raise ValueError(f"{name}: images must be at least {min_side}x{min_side}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains NaN or inf")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: gamma-encoded pixels must lie in [0, 1]")
    return arr


def check_paired(X, y):
    X = check_image_batch(X, "X")
    y = check_image_batch(y, "y")
    if X.shape != y.shape:
        raise ValueError(f"X and y shapes differ: {X.shape} vs {y.shape}")
    return X, y


def check_alphas(alpha, n: int):
    if alpha is None:
        return None
    a = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if a.size == 1:
        a = np.repeat(a, n)
    if a.size != n:
        raise ValueError(f"expected {n} alphas, got {a.size}")
    if not np.all((a > 0.0) & (a <= 1.0)):
        raise ValueError("alphas must lie in (0, 1]")
    return a
