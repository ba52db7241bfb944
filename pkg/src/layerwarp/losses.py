"""Perceptual structure loss over layout-augmented targets, background regularizer, total loss."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import BackendNotInstalledError
from .geometry import layout_augment, resize, warp

__all__ = [
    "PerceptualBackend",
    "FlattenBackend",
    "RandConvBackend",
    "ExternalEmbeddings",
    "write_embedding",
    "read_embedding",
    "perceptual_distance",
    "cosine_similarity",
    "pssl",
    "nsreg",
    "total_loss",
    "LossReport",
    "BACKENDS",
    "get_backend",
]

COSINE_EPS = 1e-8


class PerceptualBackend:
    """Maps images to feature vectors compared by cosine similarity.

    Inputs of any size are first resized to ``preprocess_size`` squared.
    """

    name = "base"
    version = "1"

    def __init__(self, preprocess_size=224):
        self.preprocess_size = preprocess_size

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        unbatched = images.dim() == 3
        if unbatched:
            images = images.unsqueeze(0)
        s = self.preprocess_size
        if s is not None:
            images = resize(images, s, s)
        out = self.features(images)
        return out[0] if unbatched else out

    def __repr__(self):
        return f"{type(self).__name__}(preprocess_size={self.preprocess_size})"


class FlattenBackend(PerceptualBackend):
    """Raw pixels as the embedding."""

    name = "flatten"

    def features(self, x):
        return x.flatten(1)


class RandConvBackend(PerceptualBackend):
    """Frozen random convolutional pyramid; a deterministic stand-in for a learned metric.

    Each stage is a strided 3x3 convolution followed by a tanh. The embedding
    concatenates, per stage, channel means pooled over a ``grid x grid``
    layout of cells, so it responds to both texture statistics and where they
    sit in the frame.
    """

    name = "randconv"

    def __init__(self, preprocess_size=224, channels=(16, 32, 64), grid=4, seed=0, in_channels=3):
        super().__init__(preprocess_size)
        self.channels = tuple(channels)
        self.grid = grid
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.weights = []
        cin = in_channels
        for cout in self.channels:
            w = torch.randn(cout, cin, 3, 3, generator=gen, dtype=torch.float64)
            w = w - w.mean(dim=(1, 2, 3), keepdim=True)  # zero-DC filters respond to structure
            w = w * math.sqrt(2.0 / (cin * 9))
            self.weights.append(w)
            cin = cout

    def features(self, x):
        parts = []
        y = x
        for w in self.weights:
            y = torch.tanh(F.conv2d(y, w.to(dtype=y.dtype, device=y.device), stride=2, padding=1))
            parts.append(F.adaptive_avg_pool2d(y, self.grid).flatten(1))
        return torch.cat(parts, dim=1)

    def __repr__(self):
        return (
            f"RandConvBackend(preprocess_size={self.preprocess_size}, channels={self.channels}, "
            f"grid={self.grid}, seed={self.seed})"
        )


def write_embedding(path, vector, source, backend, version="1"):
    """Write a little-endian float32 vector plus a ``.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.asarray(vector, dtype="<f4").ravel().tofile(path)
    meta = {"source": str(source), "backend": backend, "version": str(version)}
    path.with_name(path.name + ".json").write_text(json.dumps(meta, sort_keys=True))


def read_embedding(path):
    path = Path(path)
    vec = np.fromfile(path, dtype="<f4")
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    return vec, meta


class ExternalEmbeddings:
    """Precomputed embeddings on disk, looked up by image stem.

    Layout: ``<root>/<group>/<stem>.emb`` with ``<stem>.emb.json`` sidecars,
    where ``group`` is ``input`` or ``output``. Not differentiable, so only
    usable for evaluation.
    """

    name = "external"

    def __init__(self, root):
        self.root = Path(root)

    def lookup(self, group, stem) -> torch.Tensor:
        path = self.root / group / f"{stem}.emb"
        if not path.exists():
            raise FileNotFoundError(f"no precomputed embedding at {path}")
        vec, _ = read_embedding(path)
        return torch.from_numpy(vec.astype(np.float64))

    def embed(self, images):
        raise TypeError("external embeddings are looked up by stem, not computed from pixels")


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(a, b, dim=-1, eps=COSINE_EPS)


def perceptual_distance(a, b, backend: PerceptualBackend):
    """``1 - cos(embed(a), embed(b))``, one value per batch element."""
    return (1.0 - cosine_similarity(backend.embed(a), backend.embed(b))).clamp_min(0.0)


def pssl(output, image, aug, backend: PerceptualBackend, return_target=False):
    """Perceptual distance between the output and a layout-augmented copy of the input.

    ``aug`` is one :class:`~layerwarp.geometry.AugmentParams` per batch
    element (or one for the whole batch). Returns the batch mean.
    """
    target = layout_augment(image, aug)
    loss = perceptual_distance(output, target, backend).mean()
    return (loss, target) if return_target else loss


def nsreg(inpainted, grid_non_salient):
    """``||I_NSLI - resize(warp(I_NSLI, F_NSL))||_2 / (H * W)``, averaged over the batch.

    The norm runs over all channels; the normaliser counts spatial pixels.
    """
    h, w = inpainted.shape[-2:]
    warped = warp(inpainted, grid_non_salient)
    back = resize(warped, h, w)
    diff = inpainted - back
    if diff.dim() == 3:
        return torch.linalg.vector_norm(diff) / (h * w)
    return (torch.linalg.vector_norm(diff.flatten(1), dim=1) / (h * w)).mean()


@dataclass
class LossReport:
    pssl: object
    nsreg: object
    total: object
    lambda_nsreg: float
    n_pixel: int | None = None

    def as_floats(self):
        return {k: float(getattr(self, k)) for k in ("pssl", "nsreg", "total")}


def total_loss(pssl_value, nsreg_value, lambda_nsreg=2.0, n_pixel=None) -> LossReport:
    """``pssl + lambda * nsreg``; with ``lambda == 0`` the regularizer is left out entirely."""
    if lambda_nsreg == 0:
        total = pssl_value
    else:
        total = pssl_value + lambda_nsreg * nsreg_value
    return LossReport(pssl_value, nsreg_value, total, lambda_nsreg, n_pixel)


class AestheticsSlot:
    """Placeholder for a learned aesthetics scorer that is not bundled."""

    def __init__(self, name):
        self.name = name

    def score(self, images):
        raise BackendNotInstalledError(
            f"aesthetics backend '{self.name}' not installed; register one via a plugin"
        )


BACKENDS = {
    "flatten": FlattenBackend,
    "randconv": RandConvBackend,
}


def get_backend(spec, **kwargs):
    """Resolve ``"flatten"``, ``"randconv"`` or ``"external:<dir>"`` to a backend."""
    if isinstance(spec, (PerceptualBackend, ExternalEmbeddings)):
        return spec
    if spec.startswith("external:"):
        return ExternalEmbeddings(spec.split(":", 1)[1])
    from .plugins import load_plugins

    load_plugins()
    try:
        factory = BACKENDS[spec]
    except KeyError:
        raise BackendNotInstalledError(f"backend '{spec}' not installed") from None
    return factory(**kwargs)
