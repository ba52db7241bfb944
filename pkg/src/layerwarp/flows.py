"""Binary flow-pair files.

Layout: magic ``b"LWFL"``, then uint32 version, uint32 H', uint32 W' (all
little-endian), then ``2 * H' * W' * 2`` little-endian float32 values: the
salient grid followed by the non-salient grid, each row-major ``(H', W', 2)``
with ``(y, x)`` normalized source positions.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FlowFormatError

MAGIC = b"LWFL"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def _as_grid(g):
    if isinstance(g, torch.Tensor):
        g = g.detach().cpu().numpy()
    g = np.asarray(g)
    if g.ndim == 4 and g.shape[0] == 1:
        g = g[0]
    if g.ndim != 3 or g.shape[-1] != 2:
        raise FlowFormatError(f"expected an (H', W', 2) grid, got shape {g.shape}")
    return g


def export_flows(path, grid_salient, grid_non_salient) -> Path:
    a, b = _as_grid(grid_salient), _as_grid(grid_non_salient)
    if a.shape != b.shape:
        raise FlowFormatError(f"grid shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, h, w))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return path


def import_flows(path):
    """Inverse of :func:`export_flows`; returns two float32 ``(H', W', 2)`` tensors."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FlowFormatError(f"{path}: too short for a flow file")
    magic, version, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FlowFormatError(f"{path}: unsupported flow format version {version}")
    n = h * w * 2
    expected = _HEADER.size + 2 * n * 4
    if len(data) != expected:
        raise FlowFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    vals = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    a = torch.from_numpy(vals[:n].reshape(h, w, 2).copy())
    b = torch.from_numpy(vals[n:].reshape(h, w, 2).copy())
    return a, b
