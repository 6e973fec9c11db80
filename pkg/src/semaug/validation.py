"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .numerics import DTYPE


def check_images(images, min_size: int = 1, divisible_by: int | None = None,
                 check_range: bool = False) -> np.ndarray:
    """Return a float64 (B, H, W, 3) batch; a single (H, W, 3) image is promoted."""
    x = np.asarray(images, dtype=DTYPE)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected images shaped (B, H, W, 3), got {x.shape}")
    if x.shape[1] < min_size or x.shape[2] < min_size:
        raise ValueError(f"images must be at least {min_size}x{min_size}")
    if divisible_by and (x.shape[1] % divisible_by or x.shape[2] % divisible_by):
        raise ValueError(f"image size {x.shape[1]}x{x.shape[2]} not divisible by {divisible_by}")
    if not np.all(np.isfinite(x)):
        raise ValueError("images contain non-finite values")
    if check_range and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return x


def check_annotations(annotations, n_images: int, n_categories: int):
    """Normalize per-image annotations to (labels (G,), boxes (G, 4)) pairs."""
    if len(annotations) != n_images:
        raise ValueError(f"{len(annotations)} annotation lists for {n_images} images")
    out = []
    for ann in annotations:
        if isinstance(ann, tuple) and len(ann) == 2 and isinstance(ann[0], np.ndarray):
            labels, boxes = ann
        else:
            labels = np.array([a[0] for a in ann], dtype=int)
            boxes = np.array([a[1] for a in ann], dtype=DTYPE).reshape(-1, 4)
        labels = np.asarray(labels, dtype=int).reshape(-1)
        boxes = np.asarray(boxes, dtype=DTYPE).reshape(-1, 4)
        if len(labels) != len(boxes):
            raise ValueError("label and box counts differ")
        if len(labels) and (labels.min() < 0 or labels.max() >= n_categories):
            raise ValueError("category index out of range")
        out.append((labels, boxes))
    return out
