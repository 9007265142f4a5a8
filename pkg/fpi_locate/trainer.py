"""Training loop: augment, forward, balance loss, backward, AdamW.

Per-sample augmentation is seeded by (seed, epoch, dataset index), so a run
is reproducible regardless of how many workers prepare a batch.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import save_checkpoint
from .common import STREAM_AUGMENT, STREAM_INIT, parallel_map
from .config import RunConfig
from .fusion import FPIModel, decode
from .geodata import (
    ChannelStats,
    Crop,
    ManifestDataset,
    SamplePair,
    channel_stats,
    crop_resize,
    random_crop_augment,
    resize_image,
)
from .loss import build_label, batch_loss
from .metrics import rds
from .numkernel import RngState
from .optimizer import AdamWState, StepDecay, adamw_step
from .validation import ConfigError, NumericError

logger = logging.getLogger("fpi_locate.trainer")

LOG_COLUMNS = ("epoch", "steps", "lr", "loss", "train_rds", "elapsed_ms")


@dataclass
class TrainSample:
    query: np.ndarray
    search: np.ndarray
    gt_pixel_xy: tuple[float, float]


@dataclass
class EpochLog:
    epoch: int
    steps: int
    lr: float
    loss: float
    train_rds: float
    elapsed_ms: float

    def row(self) -> dict:
        return {
            "epoch": self.epoch,
            "steps": self.steps,
            "lr": f"{self.lr:.6g}",
            "loss": f"{self.loss:.6f}",
            "train_rds": f"{self.train_rds:.6f}",
            "elapsed_ms": f"{self.elapsed_ms:.1f}",
        }


@dataclass
class TrainResult:
    model: FPIModel
    epochs: list[EpochLog] = field(default_factory=list)
    steps: int = 0
    checkpoint: Path | None = None
    log_path: Path | None = None

    def summary(self) -> str:
        if not self.epochs:
            return "Training: no epochs run"
        last = self.epochs[-1]
        total_s = sum(e.elapsed_ms for e in self.epochs) / 1000.0
        bar_len = int(max(0.0, min(1.0, last.train_rds)) * 20)
        bar = "█" * bar_len + "░" * (20 - bar_len)
        return (
            f"Training: {len(self.epochs)} epochs, {self.steps} steps in {total_s:.1f}s  "
            f"final loss {last.loss:.4f}\n"
            f"  {'Train RDS':<14} {bar} {last.train_rds * 100:6.2f}%"
        )


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

def augment_sample(
    pair: SamplePair,
    index: int,
    epoch: int,
    config: RunConfig,
) -> TrainSample:
    """Random crop of the satellite image around the ground truth, plus the resized query."""
    mc, aug = config.model, config.augment
    rng = RngState(config.seed).generator(STREAM_AUGMENT, epoch, index)
    if rng.random() < aug.probability:
        crop = random_crop_augment(pair.search_img, pair.gt_pixel_xy, aug, rng, mc.search_side)
    else:
        # gt-centred crop of the mid scale
        side = (aug.scale_min + aug.scale_max) // 2
        image, padded = crop_resize(pair.search_img, pair.gt_pixel_xy, side, mc.search_side)
        half = mc.search_side / 2.0
        crop = Crop(image=image, gt_pixel_xy=(half, half), crop_side_px=side, padded=padded)
    return TrainSample(
        query=resize_image(pair.query_img, mc.query_side),
        search=crop.image,
        gt_pixel_xy=crop.gt_pixel_xy,
    )


def _batches(dataset: ManifestDataset, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    order = dataset.order(seed, epoch)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _check_finite(model: FPIModel) -> None:
    for name, t in model.parameters().items():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"parameter {name} became non-finite")


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def train_step(
    model: FPIModel,
    samples: list[TrainSample],
    config: RunConfig,
    lr: float,
    state: AdamWState | None,
) -> tuple[float, list[float], AdamWState]:
    """One optimizer step on a batch; returns loss, per-sample RDS and the optimizer state."""
    mc = model.config
    queries = np.stack([model.stats.apply(s.query) for s in samples])
    searches = np.stack([model.stats.apply(s.search) for s in samples])

    model.zero_grad()
    heats = model.heatmaps(queries, searches)
    labels = [
        build_label(
            s.gt_pixel_xy, mc.search_side, mc.search_encoder.grid_side, config.loss.R,
            origin=model.origin_cells, heat_side=mc.heatmap_side,
        )
        for s in samples
    ]
    loss = batch_loss(heats, labels, config.loss)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"loss became {value}")

    scores = []
    for i, s in enumerate(samples):
        pred = decode(model.wrap(heats.detach()[i]))
        scores.append(rds(pred.pixel_xy, s.gt_pixel_xy, mc.search_side, mc.search_side,
                          config.report.k))

    loss.backward()
    opt = config.optimizer
    state = adamw_step(model.parameters(), None, lr=lr, weight_decay=opt.weight_decay,
                       betas=opt.betas, state=state)
    return value, scores, state


def train(
    config: RunConfig,
    dataset: ManifestDataset,
    out: str | Path | None = None,
    *,
    model: FPIModel | None = None,
    stats: ChannelStats | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Train a model on *dataset*; writes ``out`` after every epoch when given.

    The per-epoch CSV log goes next to the checkpoint as ``<stem>_log.csv``.
    """
    opt = config.optimizer
    if len(dataset) == 0:
        raise ConfigError("training needs at least one sample")
    if model is None:
        model = FPIModel.create(config.model, RngState(config.seed).generator(STREAM_INIT))
        model.stats = stats if stats is not None else channel_stats(dataset)
    elif stats is not None:
        model.stats = stats

    schedule = StepDecay(opt.lr, opt.milestones, opt.lr_gamma)
    out_path = Path(out) if out is not None else None
    log_path = out_path.with_name(out_path.stem + "_log.csv") if out_path else None
    log_fh = None
    writer = None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_fh = log_path.open("w", newline="", encoding="utf-8")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()

    result = TrainResult(model=model, checkpoint=out_path, log_path=log_path)
    state: AdamWState | None = None
    step = 0
    logger.info(
        "Training %d parameters on %d samples (%s schedule, lr %g, batch %d)",
        model.parameter_count(), len(dataset), opt.schedule, opt.lr, opt.batch_size,
    )
    try:
        for epoch in range(opt.epochs):
            if opt.max_steps and step >= opt.max_steps:
                break
            start = time.perf_counter()
            losses: list[float] = []
            scores: list[float] = []
            lr = schedule.lr_at(epoch + 1)
            for chunk in _batches(dataset, opt.batch_size, config.seed, epoch):
                if opt.max_steps and step >= opt.max_steps:
                    break
                if opt.schedule == "step":
                    lr = schedule.lr_at(step)
                samples = parallel_map(
                    lambda i, e=epoch: augment_sample(dataset[i], i, e, config), chunk,
                )
                loss, batch_scores, state = train_step(model, samples, config, lr, state)
                losses.append(loss)
                scores.extend(batch_scores)
                step += 1
                logger.debug("epoch %d step %d lr %.3g loss %.5f", epoch + 1, step, lr, loss)
            _check_finite(model)

            entry = EpochLog(
                epoch=epoch + 1,
                steps=step,
                lr=lr,
                loss=math.fsum(losses) / max(len(losses), 1),
                train_rds=math.fsum(scores) / max(len(scores), 1),
                elapsed_ms=(time.perf_counter() - start) * 1000.0,
            )
            result.epochs.append(entry)
            result.steps = step
            logger.info("Epoch %d: loss %.5f, train RDS %.4f, lr %.3g (%d steps)",
                        entry.epoch, entry.loss, entry.train_rds, entry.lr, step)
            if writer is not None:
                writer.writerow(entry.row())
                log_fh.flush()
            if out_path is not None:
                save_checkpoint(out_path, model, config, step)
            if on_epoch is not None:
                on_epoch(entry)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
