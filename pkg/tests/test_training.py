import csv
import warnings

import numpy as np
import pytest
import torch

from layerwarp.errors import ConfigError, LayerwarpError, NonFiniteLossError
from layerwarp.geometry import AugmentParams, identity_grid
from layerwarp.imageio import save_image, save_mask
from layerwarp.losses import FlattenBackend, nsreg
from layerwarp.synthetic import make_toy_arrays
from layerwarp.training import (
    PROFILES,
    Batch,
    DatasetIndex,
    TrainConfig,
    Trainer,
    aspect_key,
    index_from_arrays,
    ingest,
    load_config,
    lr_at,
    resize_plan,
    sample_batch,
    target_size,
)

FAST = dict(
    batch_size=2,
    encoder_channels=(4, 8, 8),
    feature_dim=8,
    num_blocks=1,
    heads_per_block=2,
    preprocess_size=32,
    log_every=2,
    checkpoint_every=3,
)


def fast_cfg(tmp_path, **kw):
    return TrainConfig(**{**FAST, "out_dir": str(tmp_path), **kw})


@pytest.fixture(scope="module")
def toy_index():
    images, masks = make_toy_arrays(4, 32, seed=3)
    return index_from_arrays(images, masks)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.initial_lr == 1e-4 and cfg.decay_factor == 0.9 and cfg.decay_every == 1000
        assert cfg.batch_size == 32 and cfg.lambda_nsreg == 2.0 and cfg.epochs == 200
        assert cfg.target_factors == (0.5, 0.75, 1.25, 1.5)

    def test_parse(self):
        cfg = load_config(
            "# desk run\nprofile = desk\nseed = 7\ntarget_factors = 0.5, 1.5\n"
            "single_transformation = yes\nmax_steps = none\nbackend = flatten\n",
            is_text=True,
        )
        assert cfg.seed == 7 and cfg.batch_size == 8 and cfg.shorter_side == 64
        assert cfg.target_factors == (0.5, 1.5) and cfg.single_transformation is True
        assert cfg.max_steps is None and cfg.backend == "flatten"

    def test_every_field_settable(self):
        import dataclasses

        names = [f.name for f in dataclasses.fields(TrainConfig)]
        sample = TrainConfig()
        lines = []
        for n in names:
            v = getattr(sample, n)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{n} = {v}")
        assert load_config("\n".join(lines), is_text=True) == sample

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            load_config("seed = 1\n\nlearning_rate = 3\n", is_text=True)
        assert exc.value.lineno == 3 and exc.value.key == "learning_rate"
        assert "line 3" in str(exc.value) and "learning_rate" in str(exc.value)

    @pytest.mark.parametrize("text", ["batch_size = many", "no equals sign", "batch_size = 0", "profile = huge"])
    def test_bad_values(self, text):
        with pytest.raises(ConfigError):
            load_config(text, is_text=True)

    def test_desk_profile(self):
        desk = TrainConfig(**PROFILES["desk"])
        assert desk.shorter_side == 64 and desk.batch_size == 8 and desk.max_steps == 300


class TestSchedule:
    def test_values(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 1e-4
        assert lr_at(1000, cfg) == 9e-5
        assert lr_at(2500, cfg) == 8.1e-5

    def test_piecewise_constant(self):
        cfg = TrainConfig()
        lrs = [lr_at(s, cfg) for s in range(0, 5001)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        changes = [s for s in range(1, 5001) if lrs[s] != lrs[s - 1]]
        assert changes == [1000, 2000, 3000, 4000, 5000]

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_at(-1, TrainConfig())


class TestBatching:
    def test_aspect_keys(self):
        assert aspect_key(64, 64) == "1.00"
        assert aspect_key(300, 399) == aspect_key(300, 402)

    def test_target_sizes(self):
        assert target_size((512, 1024), 0.5, "width") == (512, 512)
        assert target_size((64, 64), 0.75, "height") == (48, 64)
        assert target_size((64, 64), 1.25, "width") == (64, 80)
        with pytest.raises(ValueError):
            target_size((8, 8), 0.5, "depth")

    def test_rounds_to_even(self):
        assert target_size((50, 50), 0.75, "height") == (38, 50)
        assert target_size((30, 30), 1.25, "width") == (30, 38)

    def test_batches_are_homogeneous(self, rng):
        sizes = [(40, 40), (40, 40), (40, 60), (40, 61), (40, 60)]
        images = [np.zeros((3, h, w), dtype=np.float32) for h, w in sizes]
        index = index_from_arrays(images)
        assert sorted(index.groups) == ["1.00", "1.50"]
        cfg = TrainConfig(batch_size=3)
        for step in range(30):
            b = sample_batch(index, cfg, rng, step=step)
            keys = {aspect_key(*e.size) for e in b.entries}
            assert len(keys) == 1
            assert {a.target_size for a in b.augments} == {b.target_size}
            assert b.factor in cfg.target_factors and b.factor != 1.0

    def test_plan_covers_every_pair_each_cycle(self):
        cfg = TrainConfig(seed=5)
        for cycle in range(4):
            seen = {resize_plan(cfg, cycle * 8 + k) for k in range(8)}
            assert len(seen) == 8

    def test_seeded_sequence(self, toy_index):
        cfg = TrainConfig(batch_size=3)

        def draw():
            rng = np.random.default_rng(9)
            return [
                ([e.stem for e in b.entries], b.target_size, b.augments)
                for b in (sample_batch(toy_index, cfg, rng, step=s) for s in range(10))
            ]

        assert draw() == draw()

    def test_small_group_uses_replacement(self, rng):
        index = index_from_arrays([np.zeros((3, 16, 16), dtype=np.float32)] * 2)
        b = sample_batch(index, TrainConfig(batch_size=5), rng)
        assert len(b.entries) == 5


class TestIngest:
    def _write(self, root, stem, h, w, mask=True, hole=True):
        save_image(root / "images" / f"{stem}.png", np.zeros((3, h, w)))
        if mask:
            m = np.zeros((1, h, w)) if hole else np.ones((1, h, w))
            m[:, h // 4: h // 2, w // 4: w // 2] = 1
            save_mask(root / "masks" / f"{stem}.png", m)

    def test_layout_and_sizes(self, tmp_path):
        self._write(tmp_path, "wide", 50, 100)
        self._write(tmp_path, "square", 40, 40)
        self._write(tmp_path, "orphan", 40, 40, mask=False)
        cfg = TrainConfig(shorter_side=32)
        with pytest.warns(UserWarning, match="orphan"):
            index = ingest(tmp_path, cfg, cache_dir=tmp_path / "cache")
        sizes = {e.stem: e.size for e in index.entries}
        assert sizes == {"square": (32, 32), "wide": (32, 64)}
        assert set(index.groups) == {"1.00", "2.00"}
        reloaded = DatasetIndex.load(tmp_path / "cache" / "index.json")
        assert [e.stem for e in reloaded.entries] == ["square", "wide"]

    def test_aspect_rule(self, tmp_path):
        self._write(tmp_path, "a", 10, 20, hole=False)
        index = ingest(tmp_path, TrainConfig(shorter_side=512), cache_dir=tmp_path / "c")
        assert index.entries[0].size == (512, 1024)

    def test_empty_is_fatal(self, tmp_path):
        (tmp_path / "images").mkdir()
        with pytest.raises(LayerwarpError):
            ingest(tmp_path, TrainConfig(shorter_side=16))


class TestTrainer:
    def test_log_columns_and_lambda_zero(self, tmp_path, toy_index):
        cfg = fast_cfg(tmp_path, lambda_nsreg=0.0, max_steps=4)
        tr = Trainer(toy_index, cfg)
        tr.run()
        rows = list(csv.DictReader(open(tr.log_path)))
        assert list(rows[0]) == ["step", "lr", "pssl", "nsreg", "total"]
        assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
        assert any(float(r["nsreg"]) > 0 for r in rows)
        assert all(float(r["total"]) == float(r["pssl"]) for r in rows)

    def test_total_includes_weighted_nsreg(self, tmp_path, toy_index):
        tr = Trainer(toy_index, fast_cfg(tmp_path, max_steps=3))
        for r in tr.run():
            assert r["total"] == pytest.approx(r["pssl"] + 2.0 * r["nsreg"], rel=1e-6)

    def test_step_zero_nsreg(self, tmp_path, toy_index):
        tr = Trainer(toy_index, fast_cfg(tmp_path))
        entry = toy_index.entries[0]
        nsli = entry.arrays[2][None]
        aug = AugmentParams(1.0, (0.0, 0.0), entry.size, entry.size)
        same = Batch([entry], entry.size, entry.size, 1.0, "height", [aug])
        assert tr.compute_loss(same)[0].nsreg.item() == 0.0
        # a resized target leaves only the resampling round trip
        tgt = (24, 32)
        aug = AugmentParams(1.0, (0.0, 0.0), entry.size, tgt)
        other = Batch([entry], entry.size, tgt, 0.75, "height", [aug])
        expected = nsreg(nsli, identity_grid(*tgt)[None])
        assert tr.compute_loss(other)[0].nsreg.item() == pytest.approx(expected.item(), rel=1e-6)

    def test_same_seed_same_log(self, tmp_path, toy_index):
        a = Trainer(toy_index, fast_cfg(tmp_path / "a", max_steps=4))
        b = Trainer(toy_index, fast_cfg(tmp_path / "b", max_steps=4))
        a.run()
        b.run()
        assert a.log_path.read_bytes() == b.log_path.read_bytes()
        assert a.checkpoints[-1].read_bytes() == b.checkpoints[-1].read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path, toy_index):
        full = Trainer(toy_index, fast_cfg(tmp_path / "full", max_steps=6))
        full.run()
        mid = [p for p in full.checkpoints if p.name == "step_0000003.ckpt"]
        assert mid
        resumed = Trainer.resume(mid[0], toy_index, out_dir=tmp_path / "resumed")
        resumed.run(6)
        assert [r["total"] for r in resumed.history] == [r["total"] for r in full.history[3:]]
        assert resumed.checkpoints[-1].read_bytes() == full.checkpoints[-1].read_bytes()

    def test_non_finite_dumps_batch(self, tmp_path, toy_index):
        class Broken(FlattenBackend):
            def features(self, x):
                return x.flatten(1) * float("nan")

        tr = Trainer(toy_index, fast_cfg(tmp_path, max_steps=2), backend=Broken(preprocess_size=None))
        with pytest.raises(NonFiniteLossError, match="step 0"):
            tr.run()
        dumps = list(tmp_path.glob("nonfinite_step*.npz"))
        assert len(dumps) == 1
        with np.load(dumps[0]) as d:
            assert d["image"].shape[0] == 2 and len(d["stems"]) == 2

    def test_single_transformation(self, tmp_path, toy_index):
        cfg = fast_cfg(tmp_path, single_transformation=True, max_steps=2)
        tr = Trainer(toy_index, cfg)
        tr.run()
        f = tr.model.flows(toy_index.entries[0].arrays[0][None], 32, 24)
        assert torch.equal(f.grid_salient, f.grid_non_salient)

    def test_epoch_length(self):
        cfg = TrainConfig(batch_size=4, epochs=3)
        assert cfg.total_steps(10) == 9
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert TrainConfig(max_steps=5).total_steps(10) == 5
