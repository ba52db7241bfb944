"""Multi-flow network: shared CNN encoder, cross-attention blocks, two affine heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidSizeError, ShapeError
from .geometry import affine_from_raw, grid_from_affine, resize

__all__ = [
    "NetworkConfig",
    "FeatureMap",
    "Flows",
    "Encoder",
    "CrossAttentionBlock",
    "MultiFlowNetwork",
    "sinusoidal_position_encoding",
]


@dataclass
class NetworkConfig:
    in_channels: int = 3
    encoder_channels: tuple = (32, 64, 64, 64)
    feature_dim: int = 64
    num_blocks: int = 3
    heads_per_block: int = 4
    mlp_ratio: float = 2.0
    single_transformation: bool = False
    zero_init_heads: bool = True
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if not self.encoder_channels:
            raise ValueError("encoder_channels must not be empty")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        if self.feature_dim % self.heads_per_block:
            raise ValueError("feature_dim must be divisible by heads_per_block")
        if self.feature_dim % 4:
            raise ValueError("feature_dim must be divisible by 4 for 2D positional encoding")

    @property
    def stride(self) -> int:
        return 2 ** (len(self.encoder_channels) - 1)

    def to_dict(self):
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class FeatureMap(NamedTuple):
    tokens: torch.Tensor  # (B, N, D)
    shape: tuple  # (h, w), N == h * w


class Flows(NamedTuple):
    grid_salient: torch.Tensor
    grid_non_salient: torch.Tensor
    raw_salient: torch.Tensor
    raw_non_salient: torch.Tensor


def sinusoidal_position_encoding(h, w, dim, dtype=None, device=None):
    """``(h*w, dim)`` 2D sin/cos encoding; half the channels for rows, half for columns."""
    quarter = dim // 4
    freq = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freq
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freq
    pe_y = torch.cat([ys.sin(), ys.cos()], dim=1)  # (h, dim/2)
    pe_x = torch.cat([xs.sin(), xs.cos()], dim=1)  # (w, dim/2)
    pe = torch.cat(
        [pe_y[:, None, :].expand(h, w, -1), pe_x[None, :, :].expand(h, w, -1)], dim=-1
    )
    return pe.reshape(h * w, dim).to(dtype=dtype or torch.get_default_dtype(), device=device)


class ResBlock(nn.Module):
    """Residual downsampling block in the style of a StyleGAN2 discriminator."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cin, 3, padding=1)
        self.conv2 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = F.leaky_relu(self.conv2(y), 0.2)
        s = self.skip(F.avg_pool2d(x, 2, ceil_mode=True))
        return (y + s) / math.sqrt(2.0)


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.encoder_channels
        self.stride = cfg.stride
        self.stem = nn.Conv2d(cfg.in_channels, ch[0], 1)
        self.blocks = nn.Sequential(*[ResBlock(a, b) for a, b in zip(ch[:-1], ch[1:])])
        self.proj = nn.Conv2d(ch[-1], cfg.feature_dim, 1)

    def forward(self, x) -> FeatureMap:
        if min(x.shape[-2:]) < self.stride:
            raise InvalidSizeError(
                f"image {tuple(x.shape[-2:])} is smaller than the encoder stride {self.stride}"
            )
        y = F.leaky_relu(self.stem(x), 0.2)
        y = self.proj(self.blocks(y))
        b, d, h, w = y.shape
        return FeatureMap(y.flatten(2).transpose(1, 2), (h, w))


class CrossAttentionBlock(nn.Module):
    """Pre-norm decoder block: self-attention, cross-attention, MLP."""

    def __init__(self, dim, heads, mlp_ratio=2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm3 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, kv):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, need_weights=False)[0]
        kv = self.norm_kv(kv)
        x = x + self.cross_attn(self.norm2(x), kv, kv, need_weights=False)[0]
        return x + self.mlp(self.norm3(x))


class MultiFlowNetwork(nn.Module):
    """Predicts one affine sampling grid per layer from an image and a target size.

    ``forward_calls`` counts full forward passes; retargeting uses it to
    check that inference is a single feed-forward evaluation.
    """

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = Encoder(cfg)
            self.blocks = nn.ModuleList(
                CrossAttentionBlock(cfg.feature_dim, cfg.heads_per_block, cfg.mlp_ratio)
                for _ in range(cfg.num_blocks)
            )
            self.head_salient = nn.Linear(cfg.feature_dim, 5)
            self.head_non_salient = nn.Linear(cfg.feature_dim, 5)
        if cfg.zero_init_heads:
            for head in (self.head_salient, self.head_non_salient):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)
        self.forward_calls = 0

    def encode(self, image) -> FeatureMap:
        return self.encoder(image)

    def cross_attend(self, query: FeatureMap, context: FeatureMap) -> FeatureMap:
        q, kv = query.tokens, context.tokens
        if q.shape[-1] != kv.shape[-1]:
            raise ShapeError(f"feature dims differ: {q.shape[-1]} vs {kv.shape[-1]}")
        d = q.shape[-1]
        q = q + sinusoidal_position_encoding(*query.shape, d, q.dtype, q.device)
        kv = kv + sinusoidal_position_encoding(*context.shape, d, kv.dtype, kv.device)
        for block in self.blocks:
            q = block(q, kv)
        return FeatureMap(q, query.shape)

    def predict_params(self, features: FeatureMap):
        pooled = features.tokens.mean(dim=1)
        raw_sl = self.head_salient(pooled)
        if self.cfg.single_transformation:
            return raw_sl, raw_sl
        return raw_sl, self.head_non_salient(pooled)

    def flows(self, image, height: int, width: int) -> Flows:
        if height < 2 or width < 2:
            raise InvalidSizeError(f"target size must be at least 2x2, got {height}x{width}")
        self.forward_calls += 1
        resized = resize(image, height, width)
        feats = self.encode(image)
        feats_resized = self.encode(resized)
        out = self.cross_attend(feats_resized, feats)
        raw_sl, raw_nsl = self.predict_params(out)
        # grids are built in float64: with float32 coordinates even the identity
        # grid does not land exactly on pixel centers
        grid_sl = grid_from_affine(affine_from_raw(raw_sl.double()), height, width)
        grid_nsl = grid_from_affine(affine_from_raw(raw_nsl.double()), height, width)
        return Flows(grid_sl, grid_nsl, raw_sl, raw_nsl)

    def forward(self, image, height: int, width: int):
        flows = self.flows(image, height, width)
        return flows.grid_salient, flows.grid_non_salient
