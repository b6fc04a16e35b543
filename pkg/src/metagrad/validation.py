"""Input validation helpers shared by estimators, attacks, and the CLI.

All images live in the 0-255 pixel domain as float32 [N,C,H,W] (or
[1,C,H,W] for single-image attack entry points).  Validators return the
canonical form and raise `ShapeError`/`ValueError` with messages that
name the offending argument.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate a batch of images: 4-d, finite, inside [0,255]."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ShapeError(
            f"{name} must be a 4-d array [N,C,H,W], got shape {X.shape}"
        )
    X = np.ascontiguousarray(X, dtype=np.float32)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite pixel values")
    if X.size and (X.min() < PIXEL_MIN or X.max() > PIXEL_MAX):
        raise ValueError(
            f"{name} pixels must lie in [{PIXEL_MIN:.0f},{PIXEL_MAX:.0f}], "
            f"got [{X.min():.3f},{X.max():.3f}]"
        )
    return X


def check_single_image(x, name: str = "x") -> np.ndarray:
    """Validate one image; accepts [C,H,W] or [1,C,H,W], returns [1,C,H,W]."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(
            f"{name} must be a single image [C,H,W] or [1,C,H,W], "
            f"got shape {x.shape}"
        )
    return check_images(x, name=name)


def check_labels(y, n_classes: int, name: str = "y") -> np.ndarray:
    """Validate integer class labels in [0, n_classes)."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"{name} must be 1-d, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.issubdtype(y.dtype, np.floating) and np.all(y == y.astype(np.int64)):
            y = y.astype(np.int64)
        else:
            raise ValueError(f"{name} must hold integer class labels")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(
            f"{name} labels must lie in [0,{n_classes}), got "
            f"[{y.min()},{y.max()}]"
        )
    return y


def check_matching_lengths(X: np.ndarray, y: np.ndarray) -> None:
    if X.shape[0] != y.shape[0]:
        raise ShapeError(
            f"X has {X.shape[0]} rows but y has {y.shape[0]} labels"
        )
