"""8-bit image files <-> float arrays.

Images live in ``[-1, 1]`` as ``(C, H, W)`` float32, masks in ``[0, 1]`` as
``(1, H, W)``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def load_image(path, channels=3) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr / 127.5 - 1.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr[None] / 255.0


def to_uint8(image) -> np.ndarray:
    """``(C, H, W)`` in ``[-1, 1]`` to ``(H, W, C)`` uint8, clamping."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.clip((np.asarray(image, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    arr = np.rint(arr).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def save_image(path, image) -> None:
    arr = to_uint8(image)
    if arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def save_mask(path, mask) -> None:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    arr = np.rint(np.clip(np.asarray(mask, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.reshape(arr.shape[-2:])).save(path, format="PNG")


def find_image(directory, stem) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        p = Path(directory) / f"{stem}{suffix}"
        if p.exists():
            return p
    return None
