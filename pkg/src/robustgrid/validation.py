"""Input-validation helpers shared by the estimator and the public API."""

from __future__ import annotations

import numpy as np


def as_image_batch(X, image: tuple[int, int, int] | None = None) -> np.ndarray:
    """Coerce X to a float64 (B, C, H, W) image batch.

    Accepts a 4-D batch directly, or a 2-D (n_samples, n_features) matrix
    together with an explicit ``image=(C, H, W)`` shape to unflatten it.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4:
        if image is not None and tuple(X.shape[1:]) != tuple(image):
            raise ValueError(
                f"image batch has shape {X.shape[1:]}, expected {tuple(image)}")
        return X
    if X.ndim == 2:
        if image is None:
            raise ValueError(
                "2-D input needs an explicit image=(C, H, W) shape to unflatten")
        c, h, w = image
        if X.shape[1] != c * h * w:
            raise ValueError(
                f"cannot reshape {X.shape[1]} features to image {tuple(image)} "
                f"({c * h * w} values)")
        return X.reshape(X.shape[0], c, h, w)
    raise ValueError(f"expected a 2-D or 4-D array, got shape {X.shape}")


def check_labels(y, n_samples: int) -> np.ndarray:
    """Coerce y to a 1-D label vector aligned with the batch."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {y.shape}")
    if y.shape[0] != n_samples:
        raise ValueError(f"got {y.shape[0]} labels for {n_samples} samples")
    return y


def encode_labels(y) -> tuple[np.ndarray, np.ndarray]:
    """Map arbitrary label values to contiguous indices.

    Returns (classes, indices) where ``classes`` is the sorted unique label
    array and ``indices[i]`` is the position of y[i] in it.
    """
    classes, indices = np.unique(y, return_inverse=True)
    if classes.shape[0] < 2:
        raise ValueError(f"need at least 2 classes, got {classes.shape[0]}")
    return classes, indices.astype(np.int64)
