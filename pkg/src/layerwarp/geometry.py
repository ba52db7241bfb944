"""Differentiable geometry: affine parameterisation, sampling grids, bilinear warping.

Conventions used throughout the package:

* images are ``(B, C, H, W)`` or ``(C, H, W)`` tensors;
* sampling grids are ``(B, H', W', 2)`` or ``(H', W', 2)`` tensors holding
  ``(y, x)`` source positions in normalized coordinates, where ``-1`` and ``+1``
  are the centers of the first and last pixel row/column (corner-aligned);
* warping is backward: output pixel ``(i, j)`` samples the source at
  ``grid[i, j]`` with bilinear interpolation and zero padding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidParameterError, InvalidSizeError, ShapeError

__all__ = [
    "AffineParams",
    "AugmentParams",
    "affine_from_raw",
    "identity_grid",
    "grid_from_affine",
    "warp",
    "resize",
    "augment_matrix",
    "sample_augment",
    "layout_augment",
    "pixel_jacobian",
]


@dataclass(frozen=True)
class AffineParams:
    raw: torch.Tensor
    rotation: torch.Tensor
    scale_x: torch.Tensor
    scale_y: torch.Tensor
    shift_x: torch.Tensor
    shift_y: torch.Tensor
    matrix: torch.Tensor  # (..., 2, 3)


def affine_from_raw(raw) -> AffineParams:
    """Build the 2x3 affine matrix from five unconstrained head outputs.

    ``r = pi * tanh(o1)``, ``s_x = exp(o2)``, ``s_y = exp(o3)``, ``t_x = o4``,
    ``t_y = o5`` and::

        A = [[s_x cos r, -s_y sin r, t_x],
             [s_y sin r,  s_x cos r, t_y]]

    The lower-right entry uses ``s_x`` (not ``s_y``); when ``o2 == o3`` the
    result is a similarity transform. Works on any leading batch shape.
    """
    raw = torch.as_tensor(raw)
    if not raw.is_floating_point():
        raw = raw.to(torch.get_default_dtype())
    if raw.shape[-1:] != (5,):
        raise ShapeError(f"expected trailing dimension 5, got shape {tuple(raw.shape)}")
    if not torch.isfinite(raw).all():
        raise InvalidParameterError("affine parameters must be finite")

    o1, o2, o3, o4, o5 = raw.unbind(-1)
    r = math.pi * torch.tanh(o1)
    sx = torch.exp(o2)
    sy = torch.exp(o3)
    cos, sin = torch.cos(r), torch.sin(r)
    row0 = torch.stack([sx * cos, -sy * sin, o4], dim=-1)
    row1 = torch.stack([sy * sin, sx * cos, o5], dim=-1)
    matrix = torch.stack([row0, row1], dim=-2)
    return AffineParams(raw, r, sx, sy, o4, o5, matrix)


def _axis(n: int, dtype, device) -> torch.Tensor:
    if n == 1:
        return torch.zeros(1, dtype=dtype, device=device)
    return torch.arange(n, dtype=dtype, device=device) * (2.0 / (n - 1)) - 1.0


def identity_grid(height: int, width: int, dtype=None, device=None) -> torch.Tensor:
    """``(H, W, 2)`` grid whose entry ``(i, j)`` is ``(2i/(H-1) - 1, 2j/(W-1) - 1)``."""
    dtype = dtype or torch.get_default_dtype()
    ys = _axis(height, dtype, device)
    xs = _axis(width, dtype, device)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([yy, xx], dim=-1)


def _as_matrix(affine) -> torch.Tensor:
    if isinstance(affine, AffineParams):
        return affine.matrix
    m = torch.as_tensor(affine)
    if not m.is_floating_point():
        m = m.to(torch.get_default_dtype())
    if m.shape[-2:] != (2, 3):
        raise ShapeError(f"expected (..., 2, 3) affine matrix, got {tuple(m.shape)}")
    return m


def grid_from_affine(affine, height: int, width: int) -> torch.Tensor:
    """Apply ``A`` to the identity grid of size ``height x width``.

    ``affine`` is an :class:`AffineParams` or a ``(..., 2, 3)`` matrix; the
    result has shape ``(..., height, width, 2)``.
    """
    if height < 2 or width < 2:
        raise InvalidSizeError(f"target size must be at least 2x2, got {height}x{width}")
    m = _as_matrix(affine)
    base = identity_grid(height, width, dtype=m.dtype, device=m.device)
    lin = m[..., :2]
    shift = m[..., 2]
    out = torch.einsum("...ab,hwb->...hwa", lin, base)
    return out + shift[..., None, None, :]


def warp(src: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``src`` at ``grid`` with zero padding.

    Differentiable with respect to both ``src`` and ``grid``. Unbatched inputs
    give unbatched output; a batch of one is broadcast against the other.
    Sampling runs in the wider dtype of the two inputs and the result has the
    dtype of ``src``.
    """
    unbatched = src.dim() == 3
    if unbatched:
        src = src.unsqueeze(0)
    if grid.dim() == 3:
        grid = grid.unsqueeze(0)
    elif unbatched and grid.dim() == 4 and grid.shape[0] != 1:
        unbatched = False
    if src.dim() != 4 or grid.dim() != 4 or grid.shape[-1] != 2:
        raise ShapeError(f"bad shapes for warp: src {tuple(src.shape)}, grid {tuple(grid.shape)}")
    b = max(src.shape[0], grid.shape[0])
    if src.shape[0] != b:
        if src.shape[0] != 1:
            raise ShapeError("batch sizes of src and grid differ")
        src = src.expand(b, -1, -1, -1)
    if grid.shape[0] != b:
        if grid.shape[0] != 1:
            raise ShapeError("batch sizes of src and grid differ")
        grid = grid.expand(b, -1, -1, -1)
    # sample in the wider of the two dtypes so a float64 grid keeps its precision
    work = torch.promote_types(src.dtype, grid.dtype)
    out_dtype = src.dtype
    grid = grid.to(work)
    if grid.shape[1:3] == src.shape[-2:]:
        # grid_sample's unnormalization rounds, so an exact identity grid is special-cased
        ident = identity_grid(src.shape[-2], src.shape[-1], dtype=grid.dtype, device=grid.device)
        if torch.equal(grid.detach(), ident.expand_as(grid)):
            out = src.clone()
            if grid.requires_grad:
                # value stays exactly src; the grid still gets grid_sample's gradient
                gs = F.grid_sample(
                    src.detach().to(work), grid.flip(-1), mode="bilinear", padding_mode="zeros",
                    align_corners=True,
                )
                out = out + (gs - gs.detach()).to(out_dtype)
            return out[0] if unbatched else out
    # grid_sample wants (x, y) order
    out = F.grid_sample(
        src.to(work), grid.flip(-1), mode="bilinear", padding_mode="zeros", align_corners=True
    ).to(out_dtype)
    return out[0] if unbatched else out


def resize(src: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize under the same corner-aligned convention as :func:`warp`."""
    if src.shape[-2:] == (height, width):
        return src
    grid = identity_grid(height, width, dtype=src.dtype, device=src.device)
    return warp(src, grid)


@dataclass(frozen=True)
class AugmentParams:
    """Uniform scale + small translation used to build a pseudo ground truth.

    ``shift`` is a fraction of the target frame along ``(y, x)``.
    """

    scale: float
    shift: tuple[float, float]
    source_size: tuple[int, int]
    target_size: tuple[int, int]

    @property
    def k_x(self) -> float:
        """Height ratio, as a ratio of pixel-center spans ``(H'-1)/(H-1)``."""
        (h, _), (th, _) = self.source_size, self.target_size
        return (th - 1) / (h - 1)

    @property
    def k_y(self) -> float:
        """Width ratio ``(W'-1)/(W-1)``."""
        (_, w), (_, tw) = self.source_size, self.target_size
        return (tw - 1) / (w - 1)


def augment_matrix(p: AugmentParams, dtype=torch.float64) -> torch.Tensor:
    """Diagonal 2x3 layout matrix ``[[s k_x, 0, 2 t1], [0, s k_y, 2 t2]]``.

    With the corner-aligned spans in ``k_x``/``k_y`` the induced pixel-space
    map is exactly ``s`` times the identity, so the result is undistorted.
    """
    if not (p.scale > 0 and math.isfinite(p.scale)):
        raise InvalidParameterError(f"scale must be positive, got {p.scale}")
    if min(p.source_size) < 2 or min(p.target_size) < 2:
        raise InvalidSizeError("source and target sizes must be at least 2x2")
    t1, t2 = p.shift
    return torch.tensor(
        [[p.scale * p.k_x, 0.0, 2.0 * t1], [0.0, p.scale * p.k_y, 2.0 * t2]], dtype=dtype
    )


def pixel_jacobian(matrix, source_size, target_size) -> np.ndarray:
    """d(source pixel)/d(output pixel) of the map induced by a 2x3 grid matrix."""
    m = np.asarray(torch.as_tensor(matrix).detach().cpu(), dtype=np.float64)
    (h, w), (th, tw) = source_size, target_size
    to_px = np.diag([(h - 1) / 2.0, (w - 1) / 2.0])
    from_px = np.diag([2.0 / (th - 1), 2.0 / (tw - 1)])
    return to_px @ m[..., :2] @ from_px


def sample_augment(
    rng: np.random.Generator,
    source_size: tuple[int, int],
    target_size: tuple[int, int],
    scale_range: tuple[float, float] = (0.9, 1.5),
    shift_range: float = 0.01,
) -> AugmentParams:
    s = float(rng.uniform(*scale_range))
    t1 = float(rng.uniform(-shift_range, shift_range))
    t2 = float(rng.uniform(-shift_range, shift_range))
    return AugmentParams(s, (t1, t2), tuple(source_size), tuple(target_size))


def layout_augment(image: torch.Tensor, params: AugmentParams | Sequence[AugmentParams]):
    """Warp ``image`` to the target size with a uniform scale and small shift.

    Pass one :class:`AugmentParams` per batch element, or a single one shared
    by the whole batch.
    """
    if isinstance(params, AugmentParams):
        d = augment_matrix(params, dtype=image.dtype).to(image.device)
        th, tw = params.target_size
    else:
        params = list(params)
        sizes = {p.target_size for p in params}
        if len(sizes) != 1:
            raise ShapeError("all augmentations in a batch must share one target size")
        th, tw = sizes.pop()
        d = torch.stack([augment_matrix(p, dtype=image.dtype) for p in params]).to(image.device)
        if image.dim() != 4 or image.shape[0] != len(params):
            raise ShapeError("need one augmentation per batch element")
    src_size = tuple(image.shape[-2:])
    first = params if isinstance(params, AugmentParams) else params[0]
    if tuple(first.source_size) != src_size:
        raise ShapeError(f"augmentation built for {first.source_size}, image is {src_size}")
    return warp(image, grid_from_affine(d, th, tw))
