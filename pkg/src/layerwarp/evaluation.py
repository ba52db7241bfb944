"""Content and structure similarity between input images and their retargeted outputs."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .errors import LayerwarpError
from .imageio import IMAGE_SUFFIXES, load_image
from .losses import ExternalEmbeddings, cosine_similarity, get_backend

logger = logging.getLogger(__name__)

ROW_FIELDS = ("name", "factor", "axis", "content_similarity", "structure_similarity")


@dataclass
class EvalRow:
    name: str
    factor: float | None
    axis: str
    content_similarity: float
    structure_similarity: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    @property
    def content_similarity(self) -> float:
        return sum(r.content_similarity for r in self.rows) / len(self.rows)

    @property
    def structure_similarity(self) -> float:
        return sum(r.structure_similarity for r in self.rows) / len(self.rows)

    def to_dict(self):
        return {
            "rows": [asdict(r) for r in self.rows],
            "mean": {
                "content_similarity": self.content_similarity,
                "structure_similarity": self.structure_similarity,
            },
            "count": len(self.rows),
        }

    def write(self, csv_path=None, json_path=None):
        if csv_path is not None:
            Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(ROW_FIELDS)
                for r in self.rows:
                    w.writerow([r.name, "" if r.factor is None else r.factor, r.axis,
                                r.content_similarity, r.structure_similarity])
                w.writerow(["mean", "", "", self.content_similarity, self.structure_similarity])
        if json_path is not None:
            Path(json_path).parent.mkdir(parents=True, exist_ok=True)
            Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def infer_factor(source_size, target_size):
    """``(factor, axis)`` for a one-axis resize; ``(None, "both")`` otherwise."""
    (h, w), (th, tw) = source_size, target_size
    if h == th and w == tw:
        return 1.0, "none"
    if w == tw:
        return th / h, "height"
    if h == th:
        return tw / w, "width"
    return None, "both"


def _stems(directory):
    out = {}
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            out.setdefault(p.stem, p)
    return out


def _to_percent(x) -> float:
    return float(min(100.0, max(0.0, 100.0 * float(x))))


def _embedding(backend, group, stem, image):
    if isinstance(backend, ExternalEmbeddings):
        return backend.lookup(group, stem)
    return backend.embed(image.to(torch.float64))


def score_pair(image, output, embed_backend, perceptual_backend, stem=None):
    """Content and structure similarity (percent) of one input/output pair."""
    c = cosine_similarity(
        _embedding(embed_backend, "input", stem, image), _embedding(embed_backend, "output", stem, output)
    )
    s = cosine_similarity(
        _embedding(perceptual_backend, "input", stem, image),
        _embedding(perceptual_backend, "output", stem, output),
    )
    # structure = 100 * (1 - perceptual_distance) with distance = 1 - cos
    return _to_percent(c), _to_percent(s)


def evaluate(dir_in, dir_out, embed_backend="randconv", perceptual_backend="randconv") -> EvalReport:
    """Score every output in ``dir_out`` against the input with the same stem in ``dir_in``."""
    embed_backend = get_backend(embed_backend)
    perceptual_backend = get_backend(perceptual_backend)
    inputs, outputs = _stems(dir_in), _stems(dir_out)
    for stem in sorted(set(inputs) ^ set(outputs)):
        side = "output" if stem in inputs else "input"
        warnings.warn(f"skipping {stem}: no matching {side} image")
    common = sorted(set(inputs) & set(outputs))
    if not common:
        raise LayerwarpError(f"no image stems shared by {dir_in} and {dir_out}; refusing an empty report")
    report = EvalReport()
    with torch.no_grad():
        for stem in common:
            image = torch.from_numpy(load_image(inputs[stem]))
            output = torch.from_numpy(load_image(outputs[stem]))
            factor, axis = infer_factor(tuple(image.shape[-2:]), tuple(output.shape[-2:]))
            content, structure = score_pair(image, output, embed_backend, perceptual_backend, stem)
            report.rows.append(EvalRow(stem, factor, axis, content, structure))
            logger.info("%s: content %.2f structure %.2f", stem, content, structure)
    return report
