"""PNG and float-array image I/O. PNGs are 8-bit; tests that need lossless
values use .npy float32 files instead."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import IoFailure


def save_png(image: np.ndarray, path) -> None:
    """Write an image in [0,1] (HxW or HxWx3) as an 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    q = np.clip(np.rint(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if q.ndim == 2 else "RGB"
    try:
        Image.fromarray(q, mode=mode).save(path)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_png(path) -> np.ndarray:
    """Read a PNG into float64 [0,1]; RGB images come back (H, W, 3)."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im, dtype=np.float64) / 255.0
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def save_float(image: np.ndarray, path) -> None:
    np.save(path, np.asarray(image, dtype=np.float32))


def load_float(path) -> np.ndarray:
    return np.load(path).astype(np.float64)


def tile_grid(images: list[np.ndarray], cols: int | None = None) -> np.ndarray:
    """Pack same-size images into a row-major grid (for preview sheets)."""
    if not images:
        raise ValueError("no images to tile")
    h, w = images[0].shape[:2]
    n = len(images)
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.zeros((rows * h, cols * w, 3))
    for k, img in enumerate(images):
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        r, c = divmod(k, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    return grid
