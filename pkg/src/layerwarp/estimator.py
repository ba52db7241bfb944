"""scikit-learn style wrapper around training and retargeting."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint
from .errors import InvalidParameterError, InvalidSizeError, ShapeError
from .layering import DiffuseInpainter, build_layers
from .pipeline import retarget_layers
from .training import PROFILES, Trainer, TrainConfig, index_from_arrays, target_size


def check_image(image, name="image") -> np.ndarray:
    """Validate one ``(C, H, W)`` image in ``[-1, 1]``; returns float32."""
    arr = np.asarray(image.detach().cpu() if isinstance(image, torch.Tensor) else image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError(f"{name} must be (C, H, W) with C in (1, 3), got shape {arr.shape}")
    if arr.shape[1] < 2 or arr.shape[2] < 2:
        raise InvalidSizeError(f"{name} must be at least 2x2, got {arr.shape[1:]}")
    if not np.isfinite(arr).all():
        raise InvalidParameterError(f"{name} contains non-finite values")
    if arr.min() < -1 - 1e-6 or arr.max() > 1 + 1e-6:
        raise InvalidParameterError(f"{name} values must lie in [-1, 1]")
    return arr


def check_mask(mask, size, name="mask") -> np.ndarray:
    """Validate a saliency mask in ``[0, 1]`` of spatial size ``size``; ``None`` means all-one."""
    if mask is None:
        return np.ones((1,) + tuple(size), dtype=np.float32)
    arr = np.asarray(mask.detach().cpu() if isinstance(mask, torch.Tensor) else mask, dtype=np.float32)
    arr = arr.reshape(arr.shape[-2:]) if arr.ndim == 3 and arr.shape[0] == 1 else arr
    if arr.ndim != 2 or arr.shape != tuple(size):
        raise ShapeError(f"{name} must be (H, W) = {tuple(size)}, got {arr.shape}")
    if arr.min() < 0 or arr.max() > 1 or not np.isfinite(arr).all():
        raise InvalidParameterError(f"{name} values must lie in [0, 1]")
    return arr[None]


def check_images(X, masks=None):
    images = [check_image(x, f"X[{i}]") for i, x in enumerate(X)]
    if not images:
        raise InvalidParameterError("X is empty")
    if masks is not None and len(masks) != len(images):
        raise InvalidParameterError(f"{len(masks)} masks for {len(images)} images")
    ms = [check_mask(None if masks is None else masks[i], x.shape[1:], f"masks[{i}]") for i, x in enumerate(images)]
    return images, ms


class LayeredRetargeter(TransformerMixin, BaseEstimator):
    """Fit a flow network on a set of images, then retarget images with it.

    The target size is either ``factor`` along ``axis`` or an explicit
    ``(target_height, target_width)``. ``fit`` trains for ``steps`` steps
    (starting from ``checkpoint`` if given); with ``steps=0`` it only loads
    or initializes the model.
    """

    def __init__(
        self,
        factor=0.75,
        axis="width",
        target_height=None,
        target_width=None,
        checkpoint=None,
        profile="desk",
        steps=0,
        lambda_nsreg=2.0,
        learning_rate=None,
        batch_size=None,
        single_transformation=False,
        backend="randconv",
        seed=0,
    ):
        self.factor = factor
        self.axis = axis
        self.target_height = target_height
        self.target_width = target_width
        self.checkpoint = checkpoint
        self.profile = profile
        self.steps = steps
        self.lambda_nsreg = lambda_nsreg
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.single_transformation = single_transformation
        self.backend = backend
        self.seed = seed

    def _validate_params(self):
        explicit = self.target_height is not None or self.target_width is not None
        if explicit:
            if self.target_height is None or self.target_width is None:
                raise InvalidParameterError("target_height and target_width go together")
            if self.target_height < 2 or self.target_width < 2:
                raise InvalidSizeError("target size must be at least 2x2")
        else:
            if self.factor is None or not self.factor > 0:
                raise InvalidParameterError(f"factor must be > 0, got {self.factor}")
            if self.axis not in ("height", "width"):
                raise InvalidParameterError(f"axis must be 'height' or 'width', got {self.axis!r}")
        if self.profile not in PROFILES:
            raise InvalidParameterError(f"unknown profile {self.profile!r}")
        if self.steps < 0:
            raise InvalidParameterError("steps must be >= 0")

    def _config(self) -> TrainConfig:
        overrides = dict(
            lambda_nsreg=self.lambda_nsreg,
            single_transformation=self.single_transformation,
            backend=self.backend,
            seed=self.seed,
            max_steps=self.steps,
        )
        if self.learning_rate is not None:
            overrides["initial_lr"] = self.learning_rate
        if self.batch_size is not None:
            overrides["batch_size"] = self.batch_size
        return TrainConfig(**{**PROFILES[self.profile], **overrides})

    def target_size_for(self, source_size):
        if self.target_height is not None:
            return int(self.target_height), int(self.target_width)
        if self.factor == 1.0:
            return tuple(source_size)
        return target_size(tuple(source_size), self.factor, self.axis)

    def fit(self, X, y=None, masks=None):
        self._validate_params()
        cfg = self._config()
        model = load_checkpoint(self.checkpoint).build_model() if self.checkpoint else None
        if self.steps > 0:
            images, ms = check_images(X, masks)
            index = index_from_arrays(images, ms, bin_width=cfg.aspect_bin_width)
            trainer = Trainer(index, cfg, model=model, out_dir=None)
            # keep the estimator free of side effects on disk
            trainer._append_log = lambda rows: None
            trainer.save = lambda path=None: None
            trainer.run(self.steps)
            model = trainer.model
            self.loss_history_ = [r["total"] for r in trainer.history]
        else:
            if X is not None:
                check_images(X, masks)
            if model is None:
                from .network import MultiFlowNetwork

                model = MultiFlowNetwork(cfg.network_config())
            self.loss_history_ = []
        self.model_ = model.eval()
        return self

    def transform(self, X, masks=None):
        """Retarget each image; returns a list of ``(C, H', W')`` float32 arrays."""
        check_is_fitted(self, "model_")
        self._validate_params()
        images, ms = check_images(X, masks)
        inpainter = DiffuseInpainter()
        out = []
        for img, m in zip(images, ms):
            image, mask = torch.from_numpy(img), torch.from_numpy(m)
            layers = build_layers(image, mask, backend=inpainter)
            h, w = self.target_size_for(img.shape[1:])
            res, _, _, _ = retarget_layers(self.model_, image, layers, h, w)
            out.append(res.numpy())
        return out
