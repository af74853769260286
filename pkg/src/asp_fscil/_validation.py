"""Input validation for image batches and labels."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError
from .vit import ViTConfig


def check_images(X, config: ViTConfig) -> np.ndarray:
    """(N, H, W, C) float32 images in [0, 1] matching the backbone geometry."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    want = (config.image_size, config.image_size, config.channels)
    if X.ndim != 4 or X.shape[1:] != want:
        raise DimensionError(f"expected images of shape (N, {want[0]}, {want[1]}, {want[2]}), "
                             f"got {X.shape}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_images_labels(X, y, config: ViTConfig):
    X = check_images(X, config)
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise DimensionError(f"labels {y.shape} do not match {X.shape[0]} images")
    if y.size == 0:
        raise ValueError("empty training set")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class ids")
    return X, y.astype(np.int64)
