"""Small seeded synthetic datasets and their ``.npz`` file format (arrays ``x``, ``y``)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError


def xor_dataset(n: int = 200, seed: int = 0, noise: float = 0.1):
    """Two-feature XOR with MSE targets in {0, 1}; ``y`` has shape ``(n, 1)``."""
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(n, 2))
    x = bits * 2.0 - 1.0 + rng.normal(0, noise, size=(n, 2))
    y = (bits[:, 0] ^ bits[:, 1]).astype(np.float64)[:, None]
    return x, y


def blobs(n: int = 200, seed: int = 0, dim: int = 4, n_classes: int = 2, spread: float = 0.5):
    """Linearly separable Gaussian clusters with integer labels."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 3.0, size=(n_classes, dim))
    y = rng.integers(0, n_classes, size=n)
    x = centers[y] + rng.normal(0, spread, size=(n, dim))
    return x, y


def _pattern(label: int, size: int, rng) -> np.ndarray:
    img = np.zeros((size, size))
    a = int(rng.integers(1, size - 3))
    w = 2
    if label == 0:  # horizontal bar
        img[a : a + w, 1:-1] = 1.0
    elif label == 1:  # vertical bar
        img[1:-1, a : a + w] = 1.0
    elif label == 2:  # diagonal
        off = int(rng.integers(-2, 3))
        for i in range(size):
            for d in range(w):
                j = i + off + d
                if 0 <= j < size:
                    img[i, j] = 1.0
    else:  # hollow square
        r = int(rng.integers(0, size // 2 - 3))
        lo, hi = r + 1, size - r - 2
        img[lo, lo : hi + 1] = img[hi, lo : hi + 1] = 1.0
        img[lo : hi + 1, lo] = img[lo : hi + 1, hi] = 1.0
    return img


def shapes_dataset(n: int = 400, seed: int = 0, size: int = 12, noise: float = 0.35):
    """Four-class ``1 x size x size`` images: horizontal, vertical, diagonal, square."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 4, size=n)
    x = np.stack([_pattern(int(c), size, rng) for c in y])[:, None]
    x = x + rng.normal(0, noise, size=x.shape)
    return x, y


def save_dataset(path, x, y) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, x=x, y=y)


def load_dataset(path):
    path = Path(path)
    try:
        with np.load(path) as f:
            return f["x"], f["y"]
    except (OSError, KeyError, ValueError) as exc:
        raise ParseError(f"{path}: not a dataset archive with arrays x and y ({exc})") from exc
