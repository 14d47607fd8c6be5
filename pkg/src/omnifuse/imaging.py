"""Channel-first float image helpers (``[3, H, W]`` arrays in ``[0, 1]``)."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import PreprocessingError


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise PreprocessingError(f"expected a [3, H, W] image, got shape {img.shape}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise PreprocessingError(f"image has an empty side: {img.shape}")
    return img


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping.

    Same-size calls return an exact copy; an exact 2x downscale averages
    each 2x2 block.
    """
    img = check_image(img)
    _, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    ys = np.clip((np.arange(height) + 0.5) * (h / height) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * (w / width) - 0.5, 0, w - 1)
    grid = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([map_coordinates(c, grid, order=1, mode="nearest") for c in img])


def fit_size(w: int, h: int, box_w: int, box_h: int) -> tuple[int, int]:
    """Aspect-preserving size of a ``w x h`` image scaled to fit in ``box_w x box_h``.

    Integer arithmetic, round half up, so exact ratios stay exact.
    """
    if box_w * h <= box_h * w:  # width is the binding side
        return box_w, max(1, min(box_h, (2 * h * box_w + w) // (2 * w)))
    return max(1, min(box_w, (2 * w * box_h + h) // (2 * h))), box_h


def letterbox(img: np.ndarray, resolution: int) -> np.ndarray:
    """Aspect-preserving resize to fit a square, centred on a zero canvas."""
    img = check_image(img)
    _, h, w = img.shape
    new_w, new_h = fit_size(w, h, resolution, resolution)
    scaled = resize_bilinear(img, new_h, new_w)
    canvas = np.zeros((3, resolution, resolution))
    top = (resolution - new_h) // 2
    left = (resolution - new_w) // 2
    canvas[:, top:top + new_h, left:left + new_w] = scaled
    return canvas
