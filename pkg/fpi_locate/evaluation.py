"""Evaluation harnesses: test-set report, retrieval comparison, input-size benchmark, sweeps."""

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .common import STREAM_BENCH, STREAM_INIT, Stopwatch, parallel_map, timed
from .config import RunConfig, apply_document
from .fusion import FPIModel, Heatmap, ModelConfig, Prediction, forward_pair
from .geodata import ManifestDataset, SamplePair, channel_stats, resize_image
from .metrics import EvalRecord, Report, ReportConfig, k_label, make_record, rds, report
from .numkernel import RngState
from .retrieval import Gallery, build_gallery, quantization_floor, retrieve
from .trainer import train
from .validation import ConfigError, DataError

logger = logging.getLogger("fpi_locate.evaluation")

COMPARISON_COLUMNS = ("pair_id", "scale_bucket", "rds_fpi", "rds_retrieval",
                      "time_fpi_ms", "time_retrieval_ms", "floor_px", "error_retrieval_px")
BENCH_COLUMNS = ("sweep", "query_side", "search_side", "heatmap_side", "mean_ms")


# ---------------------------------------------------------------------------
# Single pair
# ---------------------------------------------------------------------------

def locate(
    model: FPIModel,
    query_img: np.ndarray,
    search_img: np.ndarray,
) -> tuple[Heatmap, Prediction]:
    """Heatmap and predicted position in pixels of *search_img*, resizing inputs to the model sides."""
    cfg = model.config
    side = search_img.shape[-1]
    if query_img.shape[-1] != cfg.query_side or query_img.shape[-2] != cfg.query_side:
        logger.warning("query %s resized to %d px", query_img.shape[1:], cfg.query_side)
        query_img = resize_image(query_img, cfg.query_side)
    if side != cfg.search_side or search_img.shape[-2] != cfg.search_side:
        logger.warning("search map %s resized to %d px", search_img.shape[1:], cfg.search_side)
        search_img = resize_image(search_img, cfg.search_side)
    heat, pred = forward_pair(query_img, search_img, model)
    if side != cfg.search_side:
        f = side / cfg.search_side
        pred = replace(pred, pixel_xy=(pred.pixel_xy[0] * f, pred.pixel_xy[1] * f))
    return heat, pred


# ---------------------------------------------------------------------------
# Test-set evaluation
# ---------------------------------------------------------------------------

def _evaluate_one(model: FPIModel, pair: SamplePair, k: float) -> EvalRecord:
    _, pred = locate(model, pair.query_img, pair.search_img)
    return make_record(
        pair.pair_id, pred.pixel_xy, pair.gt_pixel_xy, pair.search_side,
        pair.meters_per_pixel, pair.scale_bucket, pair.altitude_m, k,
    )


def evaluate(
    model: FPIModel,
    dataset: ManifestDataset,
    cfg: ReportConfig | None = None,
    workers: int | None = None,
) -> tuple[list[EvalRecord], Report]:
    """Predict every sample of *dataset* and aggregate the metrics."""
    cfg = cfg or ReportConfig()
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty dataset")
    records = parallel_map(
        lambda i: _evaluate_one(model, dataset[i], cfg.k), range(len(dataset)), workers,
    )
    result = report(records, cfg)
    logger.info("Evaluated %d samples: RDS %.4f, mean SD %.2f m",
                result.count, result.rds_mean, result.sd_mean)
    return records, result


# ---------------------------------------------------------------------------
# Retrieval comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    pair_id: str
    scale_bucket: int
    rds_fpi: float
    rds_retrieval: float
    time_fpi_ms: float
    time_retrieval_ms: float
    floor_px: float
    error_retrieval_px: float

    def row(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "scale_bucket": self.scale_bucket,
            "rds_fpi": f"{self.rds_fpi:.6f}",
            "rds_retrieval": f"{self.rds_retrieval:.6f}",
            "time_fpi_ms": f"{self.time_fpi_ms:.3f}",
            "time_retrieval_ms": f"{self.time_retrieval_ms:.3f}",
            "floor_px": f"{self.floor_px:.6f}",
            "error_retrieval_px": f"{self.error_retrieval_px:.6f}",
        }


@dataclass
class Comparison:
    rows: list[ComparisonRow] = field(default_factory=list)

    @property
    def rds_fpi(self) -> float:
        return math.fsum(r.rds_fpi for r in self.rows) / len(self.rows)

    @property
    def rds_retrieval(self) -> float:
        return math.fsum(r.rds_retrieval for r in self.rows) / len(self.rows)

    @property
    def time_fpi_ms(self) -> float:
        return math.fsum(r.time_fpi_ms for r in self.rows) / len(self.rows)

    @property
    def time_retrieval_ms(self) -> float:
        return math.fsum(r.time_retrieval_ms for r in self.rows) / len(self.rows)

    @property
    def time_ratio(self) -> float:
        """Retrieval time over FPI time; above 1 means FPI is faster."""
        return self.time_retrieval_ms / self.time_fpi_ms if self.time_fpi_ms > 0 else math.inf

    def summary(self) -> str:
        lines = [f"FPI vs retrieval over {len(self.rows)} samples:"]
        for name, score, ms in (
            ("FPI", self.rds_fpi, self.time_fpi_ms),
            ("Retrieval", self.rds_retrieval, self.time_retrieval_ms),
        ):
            bar_len = int(max(0.0, min(1.0, score)) * 20)
            bar = "█" * bar_len + "░" * (20 - bar_len)
            lines.append(f"  {name:<14} {bar} {score * 100:6.2f}%  {ms:.1f}ms/query")
        lines.append(f"  Time ratio (retrieval / FPI): {self.time_ratio:.2f}x")
        return "\n".join(lines)


def compare_retrieval(
    model: FPIModel,
    dataset: ManifestDataset,
    k: float = ReportConfig().k,
) -> Comparison:
    """Run both pipelines on identical inputs, one sample at a time so timings do not overlap.

    Retrieval time covers the query forward, all tile forwards and the
    similarity ranking.
    """
    if len(dataset) == 0:
        raise DataError("cannot compare on an empty dataset")
    encoder = model.query_encoder
    result = Comparison()
    for i in range(len(dataset)):
        pair = dataset[i]
        side = pair.search_side
        (_, fpi), fpi_ms = timed(lambda: locate(model, pair.query_img, pair.search_img))

        def run_retrieval() -> tuple[Gallery, Prediction]:
            gallery = build_gallery(pair.search_img, encoder, model.stats, workers=1)
            return gallery, retrieve(pair.query_img, gallery, encoder, model.stats)

        (gallery, ret), ret_ms = timed(run_retrieval)
        result.rows.append(ComparisonRow(
            pair_id=pair.pair_id,
            scale_bucket=pair.scale_bucket,
            rds_fpi=rds(fpi.pixel_xy, pair.gt_pixel_xy, side, side, k),
            rds_retrieval=rds(ret.pixel_xy, pair.gt_pixel_xy, side, side, k),
            time_fpi_ms=fpi_ms,
            time_retrieval_ms=ret_ms,
            floor_px=quantization_floor(pair.gt_pixel_xy, gallery.tile_centers_px),
            error_retrieval_px=math.hypot(ret.pixel_xy[0] - pair.gt_pixel_xy[0],
                                          ret.pixel_xy[1] - pair.gt_pixel_xy[1]),
        ))
    logger.info("Compared %d samples: time ratio %.2f", len(result.rows), result.time_ratio)
    return result


def write_comparison(result: Comparison, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in result.rows:
            writer.writerow(r.row())
    logger.info("Comparison written to %s", path)
    return path


# ---------------------------------------------------------------------------
# Input-size benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchPlan:
    query_sides: tuple[int, ...]
    fixed_search: int
    search_sides: tuple[int, ...]
    fixed_query: int


BENCH_PLANS = {
    "paper": BenchPlan(tuple(range(80, 161, 16)), 400, tuple(range(272, 433, 32)), 112),
    "desk": BenchPlan(tuple(range(32, 97, 16)), 160, tuple(range(96, 225, 32)), 64),
}


@dataclass
class BenchRow:
    sweep: str
    query_side: int
    search_side: int
    heatmap_side: int
    mean_ms: float

    def row(self) -> dict:
        return {
            "sweep": self.sweep,
            "query_side": self.query_side,
            "search_side": self.search_side,
            "heatmap_side": self.heatmap_side,
            "mean_ms": f"{self.mean_ms:.3f}",
        }


def benchmark_input_scales(
    config: RunConfig,
    plan: BenchPlan | None = None,
    repeats: int = 3,
) -> list[BenchRow]:
    """Inference time of randomly initialised models across query and search sides."""
    plan = plan or BENCH_PLANS.get(config.preset, BENCH_PLANS["desk"])
    runs = [("query", q, plan.fixed_search) for q in plan.query_sides]
    runs += [("search", plan.fixed_query, s) for s in plan.search_sides]
    rows: list[BenchRow] = []
    for sweep, q_side, s_side in runs:
        mc: ModelConfig = replace(config.model, query_side=q_side, search_side=s_side)
        model = FPIModel.create(mc, RngState(config.seed).generator(STREAM_INIT))
        rng = RngState(config.seed).generator(STREAM_BENCH, q_side, s_side)
        query = rng.random((3, q_side, q_side), dtype=np.float32)
        search = rng.random((3, s_side, s_side), dtype=np.float32)
        forward_pair(query, search, model)          # warm-up
        watch = Stopwatch()
        for _ in range(repeats):
            with watch.time():
                forward_pair(query, search, model)
        rows.append(BenchRow(sweep, q_side, s_side, mc.heatmap_side, watch.mean_ms))
        logger.info("bench %s: query %d, search %d -> %.1f ms", sweep, q_side, s_side, watch.mean_ms)
    return rows


def write_bench(rows: Sequence[BenchRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r.row())
    logger.info("Benchmark written to %s", path)
    return path


# ---------------------------------------------------------------------------
# Parameter sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    param: str
    value: object
    train_loss: float
    train_rds: float
    report: Report

    def row(self, thresholds: Sequence[float]) -> dict:
        out = {
            "param": self.param,
            "value": json.dumps(self.value),
            "train_loss": f"{self.train_loss:.6f}",
            "train_rds": f"{self.train_rds:.6f}",
            "rds": f"{self.report.rds_mean:.6f}",
            "sd_mean_m": f"{self.report.sd_mean:.6f}",
        }
        for t in thresholds:
            out[f"ma@{k_label(t)}"] = f"{self.report.ma.get(t, math.nan):.6f}"
        return out


def parse_sweep_values(text: str) -> list:
    """Comma-separated values, each parsed as JSON when possible."""
    values = []
    for raw in (v.strip() for v in text.split(",")):
        if not raw:
            continue
        try:
            values.append(json.loads(raw))
        except json.JSONDecodeError:
            values.append(raw)
    if not values:
        raise ConfigError("sweep needs at least one value")
    return values


def run_sweep(
    config: RunConfig,
    param: str,
    values: Sequence,
    train_set: ManifestDataset,
    test_set: ManifestDataset,
    out_dir: str | Path,
) -> list[SweepRow]:
    """Train and evaluate one model per value of ``section.field``."""
    section, dot, name = param.partition(".")
    if not dot:
        raise ConfigError(f"sweep parameter {param!r} must be section.field")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = channel_stats(train_set)
    rows: list[SweepRow] = []
    for index, value in enumerate(values):
        cfg = apply_document(config, {section: {name: value}})
        tag = f"{name}_{index:02d}"
        logger.info("Sweep %s = %r", param, value)
        trained = train(cfg, train_set, out / f"{tag}.fpi", stats=stats)
        _, result = evaluate(trained.model, test_set, cfg.report)
        last = trained.epochs[-1] if trained.epochs else None
        rows.append(SweepRow(
            param=param,
            value=value,
            train_loss=last.loss if last else math.nan,
            train_rds=last.train_rds if last else math.nan,
            report=result,
        ))
    write_sweep(rows, out / "sweep.csv", config.report.ma_thresholds_m)
    return rows


def write_sweep(rows: Sequence[SweepRow], path: Path, thresholds: Sequence[float]) -> Path:
    columns = ["param", "value", "train_loss", "train_rds", "rds", "sd_mean_m"]
    columns += [f"ma@{k_label(t)}" for t in thresholds]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r.row(thresholds))
    logger.info("Sweep written to %s", path)
    return path
