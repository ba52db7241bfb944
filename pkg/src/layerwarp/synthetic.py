"""Synthetic images with disk-shaped salient objects, for smoke tests and demos."""
from __future__ import annotations

from pathlib import Path

import numpy as np


STRIPE = 0.5


def soft_disk(height, width, center, radius, edge=1.0):
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    d = np.hypot(y - center[0], x - center[1])
    return np.clip((radius - d) / edge + 0.5, 0.0, 1.0)


def make_toy_image(rng: np.random.Generator, size=64):
    """One ``(3, H, W)`` image in ``[-1, 1]`` and its ``(1, H, W)`` disk mask.

    The background mixes a colour gradient with oriented stripes so that
    non-uniform stretching is visible; the disk sits near the centre.
    """
    h = w = size
    y, x = np.mgrid[0:h, 0:w].astype(np.float64) / size
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(3.0, 6.0)
    stripes = np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)))
    base = rng.uniform(-0.5, 0.5, size=3)
    slope = rng.uniform(-0.4, 0.4, size=(3, 2))
    bg = base[:, None, None] + slope[:, 0, None, None] * (y - 0.5) + slope[:, 1, None, None] * (x - 0.5)
    bg = bg + STRIPE * stripes[None]
    radius = rng.uniform(0.12, 0.18) * size
    center = (h / 2 + rng.uniform(-0.06, 0.06) * size, w / 2 + rng.uniform(-0.06, 0.06) * size)
    mask = soft_disk(h, w, center, radius)
    color = rng.uniform(-0.9, 0.9, size=3)
    img = bg * (1 - mask[None]) + color[:, None, None] * mask[None]
    return np.clip(img, -1, 1).astype(np.float32), mask[None].astype(np.float32)


def make_toy_arrays(n=16, size=64, seed=0):
    rng = np.random.default_rng(seed)
    pairs = [make_toy_image(rng, size) for _ in range(n)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def write_toy_dataset(root, n=16, size=64, seed=0):
    """Write ``images/``, ``masks/`` in the dataset layout expected by ingestion."""
    from .imageio import save_image, save_mask

    root = Path(root)
    images, masks = make_toy_arrays(n, size, seed)
    for i, (img, m) in enumerate(zip(images, masks)):
        stem = f"toy{i:03d}"
        save_image(root / "images" / f"{stem}.png", img)
        save_mask(root / "masks" / f"{stem}.png", m)
    return root
