"""Saliency layer decomposition, inpainting backends and layered composition."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import sparse
from scipy.sparse.linalg import cg

from .errors import ShapeError
from .geometry import warp

__all__ = [
    "LayerSet",
    "decompose",
    "inpaint",
    "compose",
    "InpainterBackend",
    "DiffuseInpainter",
    "FileInpainter",
    "build_layers",
]


def _to_unit(x):
    return (x + 1.0) * 0.5


def _from_unit(x):
    return x * 2.0 - 1.0


def _check_pair(image, mask):
    if image.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(
            f"image {tuple(image.shape[-2:])} and mask {tuple(mask.shape[-2:])} differ in size"
        )


def decompose(image: torch.Tensor, mask: torch.Tensor):
    """Split ``image`` into salient and non-salient layers.

    The products are taken on ``[0, 1]`` intensities and mapped back to
    ``[-1, 1]``, so an empty region reads as black (-1). ``mask`` has a
    single channel and broadcasts over the image channels.
    """
    _check_pair(image, mask)
    unit = _to_unit(image)
    salient = _from_unit(unit * mask)
    non_salient = _from_unit(unit * (1.0 - mask))
    return salient, non_salient


class InpainterBackend:
    """Fills the salient hole of a non-salient layer.

    Subclasses implement :meth:`fill`; :func:`inpaint` takes care of keeping
    known pixels untouched.
    """

    name = "base"

    def fill(self, non_salient: np.ndarray, hole: np.ndarray, stem: str | None = None):
        raise NotImplementedError


class DiffuseInpainter(InpainterBackend):
    """Discrete harmonic fill: every hole pixel ends up as the mean of its 4 neighbours.

    The sparse linear system is solved with conjugate gradients, started from
    a coarse-to-fine guess. ``tol`` is the relative residual and ``max_iter``
    caps the solver iterations. Pixels with no path to a known pixel are left
    as they are.
    """

    name = "diffuse"

    def __init__(self, tol=1e-8, max_iter=5000, min_coarse=8):
        self.tol = tol
        self.max_iter = max_iter
        self.min_coarse = min_coarse

    def fill(self, non_salient, hole, stem=None):
        # non_salient: (C, H, W) float64, hole: (H, W) bool
        img = np.array(non_salient, dtype=np.float64)
        if not hole.any():
            return img
        if hole.all():
            warnings.warn("diffuse inpainting: no known pixels, hole left unfilled")
            return img
        init = self._initial_guess(img, hole)
        out, converged = self._relax(img, hole, init)
        if not converged:
            warnings.warn(
                f"diffuse inpainting did not converge in {self.max_iter} iterations"
            )
        return out

    def _initial_guess(self, img, hole):
        c, h, w = img.shape
        if min(h, w) < 2 * self.min_coarse:
            mean = img[:, ~hole].mean(axis=1)
            guess = img.copy()
            guess[:, hole] = mean[:, None]
            return guess
        # half-resolution solve, known pixels averaged over 2x2 cells
        h2, w2 = (h + 1) // 2, (w + 1) // 2
        pad = ((0, 0), (0, h2 * 2 - h), (0, w2 * 2 - w))
        known = np.pad(~hole, pad[1:], mode="edge").astype(np.float64)
        vals = np.pad(np.where(hole, 0.0, img), pad, mode="edge")
        ksum = known.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
        vsum = (vals * known).reshape(c, h2, 2, w2, 2).sum(axis=(2, 4))
        coarse_hole = ksum == 0
        coarse = vsum / np.maximum(ksum, 1.0)
        coarse = self.fill(coarse, coarse_hole) if coarse_hole.any() else coarse
        up = np.repeat(np.repeat(coarse, 2, axis=1), 2, axis=2)[:, :h, :w]
        guess = img.copy()
        guess[:, hole] = up[:, hole]
        return guess

    def _relax(self, img, hole, x):
        c = img.shape[0]
        h, w = hole.shape
        ys, xs = np.nonzero(hole)
        n = ys.size
        index = np.full((h, w), -1, dtype=np.int64)
        index[ys, xs] = np.arange(n)
        # count * x_i - sum(hole neighbours) = sum(known neighbours), out-of-image neighbours ignored
        diag = np.zeros(n)
        rows, cols = [], []
        rhs = np.zeros((c, n))
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = ys + dy, xs + dx
            inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            src, ny, nx = np.nonzero(inside)[0], ny[inside], nx[inside]
            diag[src] += 1.0
            j = index[ny, nx]
            unknown = j >= 0
            rows.append(src[unknown])
            cols.append(j[unknown])
            rhs[:, src[~unknown]] += img[:, ny[~unknown], nx[~unknown]]
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        a = sparse.csr_matrix(
            (np.concatenate([diag, -np.ones(rows.size)]), (np.concatenate([np.arange(n), rows]),
                                                           np.concatenate([np.arange(n), cols]))),
            shape=(n, n),
        )
        converged = True
        for ch in range(c):
            sol, info = cg(a, rhs[ch], x0=x[ch, hole], rtol=self.tol, atol=self.tol, maxiter=self.max_iter)
            converged = converged and info == 0
            x[ch, hole] = sol
        return x, converged


class FileInpainter(InpainterBackend):
    """Loads precomputed inpainted layers named ``<stem>.inpainted.png``."""

    name = "file"

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, stem):
        return self.directory / f"{stem}.inpainted.png"

    def fill(self, non_salient, hole, stem=None):
        from .imageio import load_image

        if stem is None:
            raise ValueError("file inpainter needs the image stem")
        path = self.path_for(stem)
        if not path.exists():
            raise FileNotFoundError(f"no inpainted layer at {path}")
        filled = load_image(path, channels=non_salient.shape[0])
        if filled.shape[1:] != non_salient.shape[1:]:
            raise ShapeError(f"{path} has size {filled.shape[1:]}, expected {non_salient.shape[1:]}")
        return filled.astype(np.float64)


def inpaint(non_salient, mask, backend: InpainterBackend | None = None, stem=None, threshold=0.5):
    """Fill the hole ``mask > threshold`` of a non-salient layer.

    Pixels outside the hole are returned unchanged. Accepts ``(C, H, W)``
    arrays or tensors and returns the same kind.
    """
    backend = backend or DiffuseInpainter()
    is_tensor = isinstance(non_salient, torch.Tensor)
    arr = non_salient.detach().cpu().numpy() if is_tensor else np.asarray(non_salient)
    m = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    m = m.reshape(m.shape[-2:])
    if arr.shape[-2:] != m.shape:
        raise ShapeError("non-salient layer and mask differ in size")
    hole = m > threshold
    filled = backend.fill(arr, hole, stem=stem)
    out = np.where(hole[None], filled, arr).astype(arr.dtype)
    if is_tensor:
        return torch.from_numpy(out).to(non_salient.device)
    return out


@dataclass
class LayerSet:
    salient: torch.Tensor
    non_salient: torch.Tensor
    non_salient_inpainted: torch.Tensor
    mask: torch.Tensor


def build_layers(image, mask, backend=None, stem=None, inpainted=None) -> LayerSet:
    """Decompose and inpaint one ``(C, H, W)`` image.

    A mask that is a hole everywhere (all values above 0.5, e.g. all-one)
    skips inpainting: there is nothing to fill from, so the layer stays as is.
    ``inpainted`` short-circuits the backend with a ready-made layer.
    """
    sl, nsl = decompose(image, mask)
    if inpainted is not None:
        nsli = torch.as_tensor(inpainted, dtype=image.dtype)
        hole = mask > 0.5
        nsli = torch.where(hole, nsli, nsl)
    elif bool((mask > 0.5).all()):
        nsli = nsl
    else:
        nsli = inpaint(nsl, mask, backend, stem=stem)
    return LayerSet(sl, nsl, nsli, mask)


def compose(layers: LayerSet, grid_salient, grid_non_salient, return_mask=False):
    """Warp both layers and blend them with the warped mask.

    ``I' = warp(I_SL, F_SL) * M' + warp(I_NSLI, F_NSL) * (1 - M')`` with
    ``M' = clamp(warp(M, F_SL), 0, 1)``. With ``return_mask`` the result is
    ``(I', M')``.
    """
    if grid_salient.shape[-3:-1] != grid_non_salient.shape[-3:-1]:
        raise ShapeError("salient and non-salient grids target different sizes")
    warped_mask = warp(layers.mask, grid_salient).clamp(0.0, 1.0)
    fg = warp(layers.salient, grid_salient)
    bg = warp(layers.non_salient_inpainted, grid_non_salient)
    out = fg * warped_mask + bg * (1.0 - warped_mask)
    return (out, warped_mask) if return_mask else out
