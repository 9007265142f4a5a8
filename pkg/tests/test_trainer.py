"""Unit tests for trainer.py: augmentation, steps, schedules, checkpoints and logs."""

import csv
import math

import numpy as np
import pytest

from fpi_locate.checkpoint import load_checkpoint, restore_model
from fpi_locate.common import STREAM_INIT, THREADS_ENV
from fpi_locate.config import apply_document, preset_config
from fpi_locate.evaluation import evaluate
from fpi_locate.fusion import FPIModel
from fpi_locate.geodata import ChannelStats, load_manifest
from fpi_locate.metrics import write_report
from fpi_locate.numkernel import RngState
from fpi_locate.synth import synth_generate
from fpi_locate.trainer import LOG_COLUMNS, augment_sample, train, train_step
from fpi_locate.validation import NumericError

from .conftest import tiny_config


@pytest.fixture(scope="module")
def train_set(synth_root):
    return load_manifest(synth_root, "train")


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

class TestAugmentSample:
    def test_shapes_and_gt(self, tiny, train_set):
        sample = augment_sample(train_set[0], 0, 0, tiny)
        assert sample.query.shape == (3, 16, 16)
        assert sample.search.shape == (3, 40, 40)
        x, y = sample.gt_pixel_xy
        assert 0 <= x < 40 and 0 <= y < 40

    def test_seeded_by_epoch_and_index(self, tiny, train_set):
        pair = train_set[0]
        a = augment_sample(pair, 0, 0, tiny)
        assert a.gt_pixel_xy == augment_sample(pair, 0, 0, tiny).gt_pixel_xy
        assert a.gt_pixel_xy != augment_sample(pair, 0, 1, tiny).gt_pixel_xy

    def test_without_augmentation_gt_is_centred(self, train_set):
        cfg = tiny_config(augment={"probability": 0.0})
        sample = augment_sample(train_set[1], 1, 0, cfg)
        assert sample.gt_pixel_xy == (20.0, 20.0)


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

class TestTrainStep:
    def test_step_updates_parameters(self, tiny, train_set):
        model = FPIModel.create(tiny.model, RngState(0).generator(STREAM_INIT))
        before = {n: t.data.copy() for n, t in model.parameters().items()}
        samples = [augment_sample(train_set[i], i, 0, tiny) for i in range(2)]
        loss, scores, state = train_step(model, samples, tiny, 1e-3, None)
        assert math.isfinite(loss) and loss > 0
        assert len(scores) == 2 and all(0 < s <= 1 for s in scores)
        assert state.step == 1
        changed = [n for n, t in model.parameters().items() if not np.array_equal(t.data, before[n])]
        assert "query.patch.weight" in changed and "search.pos_embed" in changed

    def test_non_finite_loss(self, tiny, train_set):
        model = FPIModel.create(tiny.model, RngState(0).generator(STREAM_INIT))
        model.parameters()["search.patch.bias"].data[:] = np.nan
        samples = [augment_sample(train_set[0], 0, 0, tiny)]
        with pytest.raises(NumericError):
            train_step(model, samples, tiny, 1e-3, None)


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@pytest.mark.slow
class TestTrain:
    def test_epochs_checkpoint_and_log(self, tmp_path, tiny, train_set):
        seen = []
        result = train(tiny, train_set, tmp_path / "run.fpi", on_epoch=seen.append)
        assert [e.epoch for e in result.epochs] == [1, 2]
        assert result.steps == 4                 # 4 samples, batch 2, 2 epochs
        assert seen == result.epochs
        assert all(math.isfinite(e.loss) for e in result.epochs)
        # epoch 2 reaches the first milestone
        assert result.epochs[0].lr == pytest.approx(1e-3)
        assert result.epochs[1].lr == pytest.approx(1e-4)

        ckpt = load_checkpoint(tmp_path / "run.fpi")
        assert ckpt.step == 4
        assert ckpt.config == tiny
        assert ckpt.stats == result.model.stats

        with (tmp_path / "run_log.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == LOG_COLUMNS
        assert [r["epoch"] for r in rows] == ["1", "2"]
        assert "Training: 2 epochs, 4 steps" in result.summary()

    def test_reproducible(self, train_set, synth_root, tmp_path, monkeypatch):
        cfg = tiny_config(seed=7)
        stats = ChannelStats()
        train(cfg, train_set, tmp_path / "a.fpi", stats=stats)
        monkeypatch.setenv(THREADS_ENV, "4")
        train(cfg, train_set, tmp_path / "b.fpi", stats=stats)
        assert (tmp_path / "a.fpi").read_bytes() == (tmp_path / "b.fpi").read_bytes()

        test_set = load_manifest(synth_root, "test")
        for run in ("a", "b"):
            model = restore_model(load_checkpoint(tmp_path / f"{run}.fpi"))
            records, result = evaluate(model, test_set)
            write_report(records, result, tmp_path / f"eval_{run}")
        for name in ("records.csv", "summary.json"):
            assert (tmp_path / "eval_a" / name).read_bytes() == \
                (tmp_path / "eval_b" / name).read_bytes()

    def test_max_steps_caps_the_run(self, train_set):
        cfg = tiny_config(optimizer={"max_steps": 1})
        result = train(cfg, train_set, stats=ChannelStats())
        assert result.steps == 1
        assert len(result.epochs) == 1

    def test_step_schedule(self, train_set):
        cfg = tiny_config(optimizer={"schedule": "step", "max_steps": 3, "lr_drop_steps": [2],
                                     "epochs": 5})
        result = train(cfg, train_set, stats=ChannelStats())
        assert result.steps == 3
        assert [e.steps for e in result.epochs] == [2, 3]
        assert result.epochs[-1].lr == pytest.approx(1e-4)

    def test_dataset_statistics_by_default(self, tiny, train_set):
        cfg = tiny_config(optimizer={"max_steps": 1})
        result = train(cfg, train_set)
        assert result.model.stats != ChannelStats()


# ---------------------------------------------------------------------------
# Learnability
# ---------------------------------------------------------------------------

@pytest.mark.slow
class TestDeskOverfit:
    def test_desk_preset_fits_small_training_set(self, tmp_path):
        cfg = apply_document(preset_config("desk"), {"seed": 7})
        synth_generate(tmp_path, 32, seed=7, params=cfg.synth,
                       query_side=cfg.model.query_side, search_side=cfg.model.search_side)
        train_set = load_manifest(tmp_path, "train")
        result = train(cfg, train_set)
        assert result.steps <= 300

        records, summary = evaluate(result.model, train_set)
        assert summary.rds_mean >= 0.85
        cell_px = cfg.model.search_side / cfg.model.search_encoder.grid_side
        within = [
            math.hypot(r.pred_px[0] - r.gt_px[0], r.pred_px[1] - r.gt_px[1]) < 2 * cell_px
            for r in records
        ]
        assert sum(within) / len(within) >= 0.9
