import json

import numpy as np
import pytest
import torch
from PIL import Image

from layerwarp.errors import LayerwarpError
from layerwarp.evaluation import EvalReport, EvalRow, evaluate, infer_factor, score_pair
from layerwarp.imageio import save_image
from layerwarp.losses import FlattenBackend, RandConvBackend, write_embedding

TWO = FlattenBackend(preprocess_size=2)


def _save_bytes(path, grey):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(grey, dtype=np.uint8)).convert("RGB").save(path)


class TestScores:
    @pytest.mark.parametrize("backend", [FlattenBackend(preprocess_size=16), RandConvBackend(preprocess_size=32)])
    def test_identical_pair_scores_100(self, backend, rng):
        img = torch.tensor(rng.uniform(-1, 1, size=(3, 12, 20)), dtype=torch.float32)
        c, s = score_pair(img, img, backend, backend)
        assert c == pytest.approx(100.0, abs=1e-9) and s == pytest.approx(100.0, abs=1e-9)

    def test_negated_pair_is_clipped_to_zero(self):
        img = torch.tensor([[[1.0, -1.0], [0.5, 0.25]]]).expand(3, 2, 2)
        assert score_pair(img, -img, TWO, TWO) == (0.0, 0.0)

    def test_hand_cosine_after_resize(self):
        # corner-aligned resize of a 2x3 output to 2x2 keeps its first and last columns
        img = torch.tensor([[[1.0, -1.0], [1.0, 1.0]]]).expand(3, 2, 2)
        out = torch.tensor([[[1.0, 0.3, -1.0], [1.0, -0.7, -1.0]]]).expand(3, 2, 3)
        c, s = score_pair(img, out, TWO, TWO)
        # (1, -1, 1, 1) . (1, -1, 1, -1) = 2 over norms 2 * 2
        assert c == pytest.approx(50.0, abs=1e-9) and s == pytest.approx(50.0, abs=1e-9)


class TestInferFactor:
    def test_cases(self):
        assert infer_factor((64, 64), (64, 64)) == (1.0, "none")
        assert infer_factor((64, 64), (32, 64)) == (0.5, "height")
        assert infer_factor((64, 80), (64, 120)) == (1.5, "width")
        assert infer_factor((64, 64), (32, 48)) == (None, "both")


class TestEvaluate:
    def test_directory_pairs(self, tmp_path):
        _save_bytes(tmp_path / "in" / "a.png", [[255, 0], [255, 255]])
        _save_bytes(tmp_path / "out" / "a.png", [[255, 128, 0], [255, 7, 0]])
        report = evaluate(tmp_path / "in", tmp_path / "out", TWO, TWO)
        (row,) = report.rows
        assert (row.name, row.factor, row.axis) == ("a", 1.5, "width")
        assert row.content_similarity == pytest.approx(50.0, abs=1e-9)
        assert row.structure_similarity == pytest.approx(50.0, abs=1e-9)

    def test_unpaired_stems_warn(self, tmp_path, rng):
        for d, stems in (("in", "ab"), ("out", "bc")):
            for s in stems:
                save_image(tmp_path / d / f"{s}.png", rng.uniform(-1, 1, size=(3, 4, 4)))
        with pytest.warns(UserWarning) as rec:
            report = evaluate(tmp_path / "in", tmp_path / "out", TWO, TWO)
        assert [r.name for r in report.rows] == ["b"]
        assert sorted(str(w.message).split(":")[0] for w in rec) == ["skipping a", "skipping c"]

    def test_empty_intersection_is_refused(self, tmp_path, rng):
        save_image(tmp_path / "in" / "a.png", rng.uniform(-1, 1, size=(3, 4, 4)))
        save_image(tmp_path / "out" / "b.png", rng.uniform(-1, 1, size=(3, 4, 4)))
        with pytest.warns(UserWarning), pytest.raises(LayerwarpError, match="empty"):
            evaluate(tmp_path / "in", tmp_path / "out", TWO, TWO)

    def test_external_embeddings(self, tmp_path, rng):
        img = rng.uniform(-1, 1, size=(3, 4, 4))
        for d in ("in", "out"):
            save_image(tmp_path / d / "x.png", img)
        emb = tmp_path / "emb"
        write_embedding(emb / "input" / "x.emb", np.array([1.0, 0.0], dtype=np.float32), source="x.png", backend="clip")
        write_embedding(emb / "output" / "x.emb", np.array([1.0, 1.0], dtype=np.float32), source="x.png", backend="clip")
        report = evaluate(tmp_path / "in", tmp_path / "out", f"external:{emb}", TWO)
        assert report.content_similarity == pytest.approx(100 / np.sqrt(2), abs=1e-6)
        assert report.structure_similarity == pytest.approx(100.0, abs=1e-9)


class TestReport:
    def test_write(self, tmp_path):
        rep = EvalReport([EvalRow("a", 0.5, "height", 80.0, 60.0), EvalRow("b", None, "both", 40.0, 20.0)])
        rep.write(tmp_path / "r.csv", tmp_path / "r.json")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "name,factor,axis,content_similarity,structure_similarity"
        assert lines[2] == "b,,both,40.0,20.0" and lines[-1] == "mean,,,60.0,40.0"
        body = json.loads((tmp_path / "r.json").read_text())
        assert body["mean"] == {"content_similarity": 60.0, "structure_similarity": 40.0} and body["count"] == 2
