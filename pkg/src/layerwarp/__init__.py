"""Layered affine image retargeting: a flow network, layer composition, losses and tooling."""
from .errors import (
    BackendNotInstalledError,
    CheckpointError,
    ConfigError,
    FlowFormatError,
    InvalidParameterError,
    InvalidSizeError,
    LayerwarpError,
    NonFiniteLossError,
    ShapeError,
)
from .estimator import LayeredRetargeter, check_image, check_mask
from .evaluation import EvalReport, evaluate
from .flows import export_flows, import_flows
from .geometry import (
    AffineParams,
    AugmentParams,
    affine_from_raw,
    augment_matrix,
    grid_from_affine,
    identity_grid,
    layout_augment,
    resize,
    warp,
)
from .layering import DiffuseInpainter, FileInpainter, LayerSet, build_layers, compose, decompose, inpaint
from .losses import FlattenBackend, RandConvBackend, get_backend, nsreg, pssl, total_loss
from .network import MultiFlowNetwork, NetworkConfig
from .pipeline import RetargetRequest, retarget
from .training import PROFILES, TrainConfig, Trainer, lr_at, load_config, train

__version__ = "0.1.0"
