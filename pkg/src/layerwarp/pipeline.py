"""End-to-end retargeting of a single image with a trained checkpoint."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import torch

from .checkpoint import load_checkpoint
from .errors import InvalidParameterError, InvalidSizeError, ShapeError
from .flows import export_flows, import_flows
from .imageio import load_image, load_mask, save_image
from .layering import DiffuseInpainter, LayerSet, build_layers, compose
from .training import target_size


@dataclass
class RetargetRequest:
    input: str
    checkpoint: str
    output: str
    mask: str | None = None
    inpainted: str | None = None
    factor: float | None = None
    axis: str | None = None
    height: int | None = None
    width: int | None = None
    export_flows: bool = False

    def __post_init__(self):
        by_factor = self.factor is not None or self.axis is not None
        by_size = self.height is not None or self.width is not None
        if by_factor == by_size:
            raise InvalidParameterError("give either factor and axis, or height and width")
        if by_factor:
            if self.factor is None or self.axis is None:
                raise InvalidParameterError("factor and axis must be given together")
            if not self.factor > 0:
                raise InvalidParameterError(f"factor must be > 0, got {self.factor}")
            if self.axis not in ("height", "width"):
                raise InvalidParameterError(f"axis must be 'height' or 'width', got {self.axis!r}")
        else:
            if self.height is None or self.width is None:
                raise InvalidParameterError("height and width must be given together")
            if self.height < 2 or self.width < 2:
                raise InvalidSizeError(f"target size must be at least 2x2, got {self.height}x{self.width}")

    def resolve_size(self, source_size):
        if self.factor is None:
            return int(self.height), int(self.width)
        h, w = source_size
        if self.factor == 1.0:
            return h, w
        return target_size(source_size, self.factor, self.axis)

    def flow_path(self):
        return Path(self.output).with_suffix(".flows")


class RetargetResult(NamedTuple):
    image: torch.Tensor  # (C, H', W') float in [-1, 1]
    mask: torch.Tensor  # warped saliency mask
    grid_salient: torch.Tensor
    grid_non_salient: torch.Tensor
    flow_path: Path | None


def load_layers(image_path, mask_path=None, inpainted_path=None, inpainter=None):
    """Read an image and build its layers; returns ``(image, LayerSet)``."""
    image = torch.from_numpy(load_image(image_path))
    if mask_path is None:
        mask = torch.ones((1,) + tuple(image.shape[-2:]))
    else:
        mask = torch.from_numpy(load_mask(mask_path))
        if mask.shape[-2:] != image.shape[-2:]:
            raise ShapeError(
                f"mask {mask_path} is {tuple(mask.shape[-2:])}, image is {tuple(image.shape[-2:])}"
            )
    inpainted = None
    if inpainted_path is not None:
        inpainted = torch.from_numpy(load_image(inpainted_path))
        if inpainted.shape != image.shape:
            raise ShapeError(f"inpainted layer {inpainted_path} does not match the image size")
    stem = Path(image_path).stem
    return image, build_layers(image, mask, backend=inpainter or DiffuseInpainter(), stem=stem, inpainted=inpainted)


def _batched(layers: LayerSet) -> LayerSet:
    return LayerSet(*(t[None] for t in (layers.salient, layers.non_salient, layers.non_salient_inpainted, layers.mask)))


@torch.no_grad()
def retarget_layers(model, image, layers: LayerSet, height, width):
    """One network evaluation followed by the layered composition."""
    model.eval()
    grid_sl, grid_nsl = model(image[None], height, width)
    out, m = compose(_batched(layers), grid_sl, grid_nsl, return_mask=True)
    return out[0], m[0], grid_sl[0], grid_nsl[0]


def retarget(req: RetargetRequest, model=None, inpainter=None) -> RetargetResult:
    """Retarget ``req.input`` and write the 8-bit result (and optionally the flows)."""
    if model is None:
        model = load_checkpoint(req.checkpoint).build_model()
    image, layers = load_layers(req.input, req.mask, req.inpainted, inpainter)
    h, w = req.resolve_size(tuple(image.shape[-2:]))
    out, m, gsl, gnsl = retarget_layers(model, image, layers, h, w)
    save_image(req.output, out)
    flow_path = None
    if req.export_flows:
        flow_path = export_flows(req.flow_path(), gsl, gnsl)
    return RetargetResult(out, m, gsl, gnsl, flow_path)


def apply_flows(flow_path, image_path, mask_path=None, inpainted_path=None, inpainter=None):
    """Recompose an image from exported flows without any network."""
    gsl, gnsl = import_flows(flow_path)
    _, layers = load_layers(image_path, mask_path, inpainted_path, inpainter)
    return compose(_batched(layers), gsl[None], gnsl[None])[0]


def saliency_retention(mask, affine) -> float:
    """Fraction of saliency mass whose forward image under an affine grid lands in frame.

    ``affine`` maps normalized output coordinates to normalized source
    coordinates; the inverse sends every mask pixel to its output position.
    """
    m = torch.as_tensor(mask, dtype=torch.float64).reshape(mask.shape[-2:])
    a = torch.as_tensor(affine, dtype=torch.float64).reshape(2, 3)
    h, w = m.shape
    ys = torch.linspace(-1, 1, h, dtype=torch.float64) if h > 1 else torch.zeros(1, dtype=torch.float64)
    xs = torch.linspace(-1, 1, w, dtype=torch.float64) if w > 1 else torch.zeros(1, dtype=torch.float64)
    pts = torch.stack(torch.meshgrid(ys, xs, indexing="ij"), -1).reshape(-1, 2)
    fwd = torch.linalg.solve(a[:, :2], (pts - a[:, 2]).T).T
    inside = (fwd.abs() <= 1 + 1e-12).all(dim=1).reshape(h, w)
    total = m.sum()
    if total <= 0:
        return 1.0
    return float((m * inside).sum() / total)

