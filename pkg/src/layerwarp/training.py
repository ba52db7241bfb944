"""Dataset ingestion, aspect-grouped batching, learning-rate schedule and the training loop."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .errors import ConfigError, LayerwarpError, NonFiniteLossError
from .geometry import AugmentParams, resize, sample_augment
from .imageio import IMAGE_SUFFIXES, load_image, load_mask, save_image, save_mask
from .layering import DiffuseInpainter, LayerSet, compose, decompose, inpaint
from .losses import get_backend, nsreg, pssl, total_loss
from .network import MultiFlowNetwork, NetworkConfig

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "PROFILES",
    "load_config",
    "Entry",
    "DatasetIndex",
    "Batch",
    "ingest",
    "index_from_arrays",
    "sample_batch",
    "resize_plan",
    "target_size",
    "lr_at",
    "Trainer",
    "train",
]

LOG_FIELDS = ("step", "lr", "pssl", "nsreg", "total")


@dataclass
class TrainConfig:
    initial_lr: float = 1e-4
    decay_factor: float = 0.9
    decay_every: int = 1000
    batch_size: int = 32
    epochs: int = 200
    target_factors: tuple = (0.5, 0.75, 1.25, 1.5)
    lambda_nsreg: float = 2.0
    seed: int = 0
    shorter_side: int = 512
    # None: derive from epochs
    max_steps: int | None = None
    checkpoint_every: int = 1000
    log_every: int = 50
    aspect_bin_width: float = 0.05
    backend: str = "randconv"
    preprocess_size: int = 224
    data_root: str = ""
    out_dir: str = "runs/default"
    encoder_channels: tuple = (32, 64, 64, 64)
    feature_dim: int = 64
    num_blocks: int = 3
    heads_per_block: int = 4
    single_transformation: bool = False

    def __post_init__(self):
        self.target_factors = tuple(float(f) for f in self.target_factors)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        for name in ("decay_every", "batch_size", "epochs", "shorter_side", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive", key=name)
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must be in (0, 1]", key="decay_factor")
        if not self.target_factors or min(self.target_factors) <= 0:
            raise ConfigError("target_factors must be non-empty and positive", key="target_factors")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0", key="max_steps")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            encoder_channels=self.encoder_channels,
            feature_dim=self.feature_dim,
            num_blocks=self.num_blocks,
            heads_per_block=self.heads_per_block,
            single_transformation=self.single_transformation,
            seed=self.seed,
        )

    def backend_instance(self):
        if self.backend in ("flatten", "randconv"):
            return get_backend(self.backend, preprocess_size=self.preprocess_size)
        return get_backend(self.backend)

    def total_steps(self, n_entries: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return self.epochs * math.ceil(n_entries / self.batch_size)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["target_factors"] = list(self.target_factors)
        d["encoder_channels"] = list(self.encoder_channels)
        return d


PROFILES = {
    "full": {},
    "desk": dict(
        initial_lr=2e-3,
        batch_size=8,
        shorter_side=64,
        max_steps=300,
        checkpoint_every=100,
        log_every=25,
        encoder_channels=(16, 32, 32, 32),
        feature_dim=32,
        num_blocks=2,
        heads_per_block=4,
    ),
}


def _parse_value(field_type, text, key, lineno):
    text = text.strip()
    t = str(field_type)
    try:
        if "None" in t and text.lower() in ("none", ""):
            return None
        if t.startswith("tuple"):
            parts = [p for p in text.replace(" ", "").split(",") if p]
            return tuple(parts)
        if "bool" in t:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in t:
            return int(text)
        if "float" in t:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}", lineno=lineno, key=key) from None


def load_config(path_or_text, is_text=False) -> TrainConfig:
    """Parse a ``key = value`` file into a :class:`TrainConfig`.

    ``#`` starts a comment. A ``profile`` key (``full`` or ``desk``) selects
    the defaults that later keys override.
    """
    text = path_or_text if is_text else Path(path_or_text).read_text()
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values, profile = {}, "full"
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", lineno=lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "profile":
            if raw not in PROFILES:
                raise ConfigError(f"unknown profile {raw!r}", lineno=lineno, key=key)
            profile = raw
            continue
        if key not in fields:
            raise ConfigError(f"unknown key {key!r}", lineno=lineno, key=key)
        values[key] = _parse_value(fields[key], raw, key, lineno)
    merged = {**PROFILES[profile], **values}
    try:
        return TrainConfig(**merged)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class Entry:
    stem: str
    image_path: str | None = None
    mask_path: str | None = None
    inpainted_path: str | None = None
    size: tuple = (0, 0)
    arrays: tuple | None = field(default=None, repr=False, compare=False)


@dataclass
class DatasetIndex:
    entries: list
    groups: dict  # aspect key -> list of entry positions
    root: str | None = None

    def __len__(self):
        return len(self.entries)

    def save(self, path):
        data = {
            "root": self.root,
            "entries": [
                {k: v for k, v in dataclasses.asdict(e).items() if k != "arrays"}
                for e in self.entries
            ],
            "groups": self.groups,
        }
        Path(path).write_text(json.dumps(data, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text())
        entries = [Entry(**{**e, "size": tuple(e["size"])}) for e in data["entries"]]
        return cls(entries, data["groups"], data.get("root"))


def aspect_key(height, width, bin_width=0.05) -> str:
    k = round((width / height) / bin_width)
    return f"{k * bin_width:.2f}"


def _scaled_size(h, w, shorter_side):
    if h <= w:
        return shorter_side, int(round(w * shorter_side / h))
    return int(round(h * shorter_side / w)), shorter_side


def _group(entries, bin_width):
    groups = {}
    for i, e in enumerate(entries):
        groups.setdefault(aspect_key(*e.size, bin_width), []).append(i)
    return dict(sorted(groups.items()))


def ingest(root, cfg: TrainConfig, cache_dir=None, inpainter=None) -> DatasetIndex:
    """Index ``images/``, ``masks/`` (and optional ``inpainted/``) under ``root``.

    Images and masks are rescaled so the shorter side equals
    ``cfg.shorter_side`` and written to ``cache_dir`` together with the
    inpainted non-salient layer (computed with the diffuse inpainter when no
    precomputed file exists). The index is saved as ``index.json`` there.
    """
    root = Path(root)
    cache = Path(cache_dir) if cache_dir else root / "cache" / f"side{cfg.shorter_side}"
    inpainter = inpainter or DiffuseInpainter()
    img_dir = root / "images"
    candidates = sorted(
        p for p in img_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES
    ) if img_dir.is_dir() else []
    entries = []
    for path in candidates:
        stem = path.stem
        mask_path = root / "masks" / f"{stem}.png"
        if not mask_path.exists():
            warnings.warn(f"skipping {path.name}: no mask at {mask_path}")
            continue
        img = torch.from_numpy(load_image(path))
        mask = torch.from_numpy(load_mask(mask_path))
        if img.shape[-2:] != mask.shape[-2:]:
            warnings.warn(f"skipping {path.name}: image and mask sizes differ")
            continue
        h, w = _scaled_size(*img.shape[-2:], cfg.shorter_side)
        img, mask = resize(img, h, w), resize(mask, h, w).clamp(0, 1)
        _, nsl = decompose(img, mask)
        pre = root / "inpainted" / f"{stem}.inpainted.png"
        if pre.exists():
            nsli = resize(torch.from_numpy(load_image(pre)), h, w)
            nsli = torch.where(mask > 0.5, nsli, nsl)
        elif bool((mask > 0.5).all()):
            nsli = nsl
        else:
            nsli = inpaint(nsl, mask, inpainter, stem=stem)
        out = Entry(
            stem,
            str(cache / "images" / f"{stem}.png"),
            str(cache / "masks" / f"{stem}.png"),
            str(cache / "inpainted" / f"{stem}.inpainted.png"),
            (h, w),
        )
        save_image(out.image_path, img)

        save_mask(out.mask_path, mask)
        save_image(out.inpainted_path, nsli)
        entries.append(out)
    if not entries:
        raise LayerwarpError(f"no usable image/mask pairs under {root}")
    index = DatasetIndex(entries, _group(entries, cfg.aspect_bin_width), str(root))
    cache.mkdir(parents=True, exist_ok=True)
    index.save(cache / "index.json")
    return index


def index_from_arrays(images, masks=None, inpainted=None, bin_width=0.05, inpainter=None):
    """In-memory index over ``(C, H, W)`` arrays in ``[-1, 1]``; masks default to all-one."""
    inpainter = inpainter or DiffuseInpainter()
    entries = []
    for i, img in enumerate(images):
        img = torch.as_tensor(np.asarray(img, dtype=np.float32))
        m = torch.ones((1,) + tuple(img.shape[-2:])) if masks is None else torch.as_tensor(
            np.asarray(masks[i], dtype=np.float32)).reshape(1, *img.shape[-2:])
        _, nsl = decompose(img, m)
        if inpainted is not None:
            nsli = torch.where(m > 0.5, torch.as_tensor(np.asarray(inpainted[i], dtype=np.float32)), nsl)
        elif bool((m >= 1).all()):
            nsli = nsl
        else:
            nsli = inpaint(nsl, m, inpainter)
        entries.append(Entry(f"item{i:05d}", size=tuple(img.shape[-2:]), arrays=(img, m, nsli)))
    if not entries:
        raise LayerwarpError("empty dataset")
    return DatasetIndex(entries, _group(entries, bin_width))


@dataclass
class Batch:
    entries: list
    source_size: tuple
    target_size: tuple
    factor: float
    axis: str
    augments: list


def _round_even(x):
    return max(2, int(2 * round(x / 2)))


def target_size(source_size, factor, axis):
    h, w = source_size
    if axis == "height":
        return _round_even(h * factor), w
    if axis == "width":
        return h, _round_even(w * factor)
    raise ValueError(f"axis must be 'height' or 'width', got {axis!r}")


def resize_plan(cfg: TrainConfig, step: int):
    """The ``(factor, axis)`` used at ``step``.

    Steps are split into cycles of ``2 * len(target_factors)``; each cycle
    visits every factor/axis pair once in an order shuffled by
    ``(seed, cycle)``. Loss levels differ a lot between factors, so this
    keeps short windows of the loss curve comparable. Being a pure function
    of the step, it needs no state to resume.
    """
    combos = [(f, a) for f in sorted(cfg.target_factors) for a in ("height", "width")]
    cycle, pos = divmod(step, len(combos))
    order = np.random.default_rng([cfg.seed, cycle]).permutation(len(combos))
    return combos[order[pos]]


def sample_batch(index: DatasetIndex, cfg: TrainConfig, rng: np.random.Generator, step=None) -> Batch:
    """Draw one aspect-homogeneous batch, a target factor and axis, and per-item augmentations.

    Groups are drawn with probability proportional to their size; members
    are drawn without replacement unless the group is smaller than the batch.
    With ``step`` given the factor and axis follow :func:`resize_plan`,
    otherwise they are drawn from ``rng``.
    """
    if not index.entries:
        raise LayerwarpError("empty dataset index")
    keys = list(index.groups)
    sizes = np.array([len(index.groups[k]) for k in keys], dtype=np.float64)
    g = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
    members = index.groups[g]
    picks = rng.choice(len(members), size=cfg.batch_size, replace=len(members) < cfg.batch_size)
    entries = [index.entries[members[i]] for i in picks]
    if step is None:
        factors = sorted(cfg.target_factors)
        factor = float(factors[rng.integers(len(factors))])
        axis = ("height", "width")[rng.integers(2)]
    else:
        factor, axis = resize_plan(cfg, step)
    src = tuple(index.entries[members[0]].size)
    tgt = target_size(src, factor, axis)
    augs = [sample_augment(rng, src, tgt) for _ in entries]
    return Batch(entries, src, tgt, factor, axis, augs)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Staircase decay: ``initial_lr * decay_factor ** (step // decay_every)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.initial_lr * cfg.decay_factor ** (step // cfg.decay_every)


class _Loader:
    def __init__(self):
        self._cache = {}

    def load(self, entry: Entry, size):
        key = (entry.stem, entry.image_path, tuple(size))
        if key not in self._cache:
            if entry.arrays is not None:
                img, m, nsli = entry.arrays
            else:
                img = torch.from_numpy(load_image(entry.image_path))
                m = torch.from_numpy(load_mask(entry.mask_path))
                nsli = torch.from_numpy(load_image(entry.inpainted_path))
            if tuple(img.shape[-2:]) != tuple(size):
                img, m, nsli = resize(img, *size), resize(m, *size).clamp(0, 1), resize(nsli, *size)
            self._cache[key] = (img.float(), m.float(), nsli.float())
        return self._cache[key]

    def batch(self, batch: Batch):
        items = [self.load(e, batch.source_size) for e in batch.entries]
        image = torch.stack([i[0] for i in items])
        mask = torch.stack([i[1] for i in items])
        nsli = torch.stack([i[2] for i in items])
        sl, nsl = decompose(image, mask)
        return image, LayerSet(sl, nsl, nsli, mask)


def _rng_state(rng):
    return rng.bit_generator.state


class Trainer:
    """Stateful optimisation loop; one instance per model.

    All sampling comes from a single ``numpy`` generator seeded from the
    config, and its state is stored in every checkpoint so a resumed run
    replays the same batches.
    """

    def __init__(self, index, cfg: TrainConfig, model=None, backend=None, out_dir=None):
        self.index = index
        self.cfg = cfg
        self.model = model if model is not None else MultiFlowNetwork(cfg.network_config())
        self.backend = backend if backend is not None else cfg.backend_instance()
        self.out_dir = Path(out_dir or cfg.out_dir)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=lr_at(0, cfg), betas=(0.9, 0.999), eps=1e-8
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.history = []
        self.checkpoints = []
        self._loader = _Loader()

    @property
    def log_path(self):
        return self.out_dir / "loss_log.csv"

    def compute_loss(self, batch: Batch):
        image, layers = self._loader.batch(batch)
        th, tw = batch.target_size
        flows = self.model.flows(image, th, tw)
        output = compose(layers, flows.grid_salient, flows.grid_non_salient)
        p = pssl(output, image, batch.augments, self.backend)
        n = nsreg(layers.non_salient_inpainted, flows.grid_non_salient)
        report = total_loss(p, n, self.cfg.lambda_nsreg, n_pixel=batch.source_size[0] * batch.source_size[1])
        return report, (image, layers, flows)

    def train_step(self):
        lr = lr_at(self.step, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        batch = sample_batch(self.index, self.cfg, self.rng, step=self.step)
        report, tensors = self.compute_loss(batch)
        values = {k: float(v.detach()) for k, v in (("pssl", report.pssl), ("nsreg", report.nsreg), ("total", report.total))}
        if not all(math.isfinite(v) for v in values.values()):
            dump = self._dump(batch, tensors)
            raise NonFiniteLossError(f"non-finite loss at step {self.step} ({values}); batch saved to {dump}")
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        self.optimizer.step()
        row = {"step": self.step, "lr": lr, **values}
        self.history.append(row)
        self.step += 1
        return row

    def _dump(self, batch, tensors):
        image, layers, flows = tensors
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"nonfinite_step{self.step:07d}.npz"
        np.savez(
            path,
            stems=np.array([e.stem for e in batch.entries]),
            image=image.numpy(),
            mask=layers.mask.numpy(),
            inpainted=layers.non_salient_inpainted.numpy(),
            raw_salient=flows.raw_salient.detach().numpy(),
            raw_non_salient=flows.raw_non_salient.detach().numpy(),
            target_size=np.array(batch.target_size),
        )
        return path

    def _append_log(self, rows):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        new = not self.log_path.exists() or self.step - len(rows) == 0
        with open(self.log_path, "w" if new else "a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(LOG_FIELDS)
            for r in rows:
                writer.writerow([r["step"]] + [repr(r[k]) for k in LOG_FIELDS[1:]])

    def save(self, path=None):
        path = Path(path or self.out_dir / f"step_{self.step:07d}.ckpt")
        save_checkpoint(
            path,
            self.model,
            step=self.step,
            # run locations stay out so identical runs give identical bytes
            train_config={k: v for k, v in self.cfg.to_dict().items() if k not in ("out_dir", "data_root")},
            optimizer=self.optimizer,
            rng_state=_rng_state(self.rng),
        )
        self.checkpoints.append(path)
        return path

    def run(self, steps=None, callback=None):
        """Train until ``steps`` total steps (default: the configured length)."""
        total = self.cfg.total_steps(len(self.index)) if steps is None else steps
        pending = []
        while self.step < total:
            row = self.train_step()
            pending.append(row)
            if callback:
                callback(row)
            if self.step % self.cfg.log_every == 0 or self.step == total:
                logger.info("step %d lr %.3g total %.5f", row["step"], row["lr"], row["total"])
                self._append_log(pending)
                pending = []
            if self.step % self.cfg.checkpoint_every == 0 and self.step != total:
                self._append_log(pending)
                pending = []
                self.save()
        if pending:
            self._append_log(pending)
        self.save()
        return self.history

    @classmethod
    def resume(cls, checkpoint, index, cfg=None, backend=None, out_dir=None):
        ckpt = load_checkpoint(checkpoint)
        cfg = cfg or TrainConfig(**ckpt.train_config)
        trainer = cls(index, cfg, model=ckpt.build_model(), backend=backend, out_dir=out_dir)
        restore_optimizer(ckpt, trainer.model, trainer.optimizer)
        if ckpt.rng_state:
            trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.step = ckpt.step
        return trainer


def train(index, cfg: TrainConfig, model=None, backend=None, out_dir=None, steps=None):
    """Run a full training job and return the list of checkpoint paths."""
    trainer = Trainer(index, cfg, model=model, backend=backend, out_dir=out_dir)
    trainer.run(steps)
    return trainer.checkpoints
