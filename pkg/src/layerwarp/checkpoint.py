"""Versioned checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"LWARPCKP"
    uint32    format version
    uint64    header length in bytes
    header    UTF-8 JSON: configs, step counter, RNG state, tensor index
    payload   concatenated row-major little-endian float32 arrays

Each tensor index entry is ``{"name", "shape", "offset"}`` with ``offset``
counted in bytes from the start of the payload.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .network import MultiFlowNetwork, NetworkConfig

MAGIC = b"LWARPCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    network_config: NetworkConfig
    step: int
    tensors: "OrderedDict[str, np.ndarray]"
    train_config: dict | None = None
    optimizer: dict | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def build_model(self) -> MultiFlowNetwork:
        model = MultiFlowNetwork(self.network_config)
        state = {
            k[len("model/"):]: torch.from_numpy(v.copy())
            for k, v in self.tensors.items()
            if k.startswith("model/")
        }
        model.load_state_dict(state)
        return model


def _optimizer_tensors(model, optimizer):
    names = {id(p): n for n, p in model.named_parameters()}
    tensors, meta = OrderedDict(), {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            meta[name] = float(st["step"])
            tensors[f"optim/{name}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
    return tensors, meta


def save_checkpoint(path, model, step=0, train_config=None, optimizer=None, rng_state=None, extra=None):
    tensors = OrderedDict((f"model/{k}", v) for k, v in model.state_dict().items())
    optim_meta = None
    if optimizer is not None:
        opt_tensors, optim_meta = _optimizer_tensors(model, optimizer)
        tensors.update(opt_tensors)

    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "network_config": model.cfg.to_dict(),
        "step": int(step),
        "train_config": train_config,
        "optimizer": optim_meta,
        "rng_state": rng_state,
        "extra": extra or {},
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, this build reads version {VERSION}"
        )
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc

    tensors = OrderedDict()
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo = start + entry["offset"]
        hi = lo + 4 * count
        if hi > len(data):
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=lo)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(
        network_config=NetworkConfig.from_dict(header["network_config"]),
        step=header["step"],
        tensors=tensors,
        train_config=header.get("train_config"),
        optimizer=header.get("optimizer"),
        rng_state=header.get("rng_state"),
        extra=header.get("extra") or {},
    )


def restore_optimizer(ckpt: Checkpoint, model, optimizer) -> None:
    """Load Adam moments saved by :func:`save_checkpoint` into ``optimizer``."""
    if not ckpt.optimizer:
        return
    params = dict(model.named_parameters())
    for name, step in ckpt.optimizer.items():
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(step, dtype=torch.float32),
            "exp_avg": torch.from_numpy(ckpt.tensors[f"optim/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim/{name}/exp_avg_sq"].copy()),
        }
