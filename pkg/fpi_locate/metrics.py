"""Localisation metrics: spatial distance, metre-level accuracy and RDS.

SD is the prediction error in metres.  MA@K is the fraction of samples with
SD strictly below K metres.  RD is the pixel error relative to the search
map size, and RDS = exp(-k * RD) turns it into a score in (0, 1].

Reports aggregate per scale bucket, per ring bucket (distance of the ground
truth from the search-map centre) and per flight altitude.
"""

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .validation import ConfigError, DataError

logger = logging.getLogger("fpi_locate.metrics")

DEFAULT_K = 10.0
DEFAULT_MA_THRESHOLDS_M = (3.0, 5.0, 10.0, 20.0, 30.0, 50.0)
RING_BUCKETS = ("0-0.2", "0.2-0.4", "0.4-0.6", "0.6-0.8", "0.8-1.0", ">1.0")
RECORD_COLUMNS = ("pair_id", "scale_bucket", "altitude_m", "ring_bucket", "sd_m", "rd", "rds")


# ---------------------------------------------------------------------------
# Result types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportConfig:
    k: float = DEFAULT_K
    ma_thresholds_m: tuple[float, ...] = DEFAULT_MA_THRESHOLDS_M

    def __post_init__(self):
        if not self.k > 0:
            raise ConfigError(f"k must be > 0, got {self.k}")
        if not self.ma_thresholds_m or any(t <= 0 for t in self.ma_thresholds_m):
            raise ConfigError(f"MA thresholds must be positive, got {self.ma_thresholds_m}")


@dataclass
class EvalRecord:
    """Evaluation of one prediction."""
    pair_id: str
    sd_m: float
    rd: float
    rds: float
    scale_bucket: int
    ring_bucket: str
    altitude_m: float
    pred_px: tuple[float, float] = (0.0, 0.0)
    gt_px: tuple[float, float] = (0.0, 0.0)

    def row(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "scale_bucket": self.scale_bucket,
            "altitude_m": _fmt(self.altitude_m),
            "ring_bucket": self.ring_bucket,
            "sd_m": _fmt(self.sd_m),
            "rd": _fmt(self.rd),
            "rds": _fmt(self.rds),
        }


@dataclass
class GroupStats:
    count: int
    rds_mean: float
    sd_mean: float
    ma: dict[float, float]

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "rds_mean": self.rds_mean,
            "sd_mean": self.sd_mean,
            "ma": {k_label(k): v for k, v in self.ma.items()},
        }


@dataclass
class Report:
    """Aggregated evaluation of a record set."""
    count: int
    rds_mean: float
    sd_mean: float
    ma: dict[float, float]
    by_scale: dict[int, GroupStats] = field(default_factory=dict)
    by_ring: dict[str, GroupStats] = field(default_factory=dict)
    by_altitude: dict[float, GroupStats] = field(default_factory=dict)
    k: float = DEFAULT_K
    evaluation_ms: float = 0.0

    def summary(self) -> str:
        """Human-readable summary for CLI output."""
        lines = [
            f"Localisation: RDS {self.rds_mean * 100:.2f}  mean SD {self.sd_mean:.2f} m  "
            f"[{self.count} samples, k={self.k:g}, aggregated in {self.evaluation_ms:.1f}ms]",
            _bar_line("RDS", self.rds_mean),
        ]
        for k, v in self.ma.items():
            lines.append(_bar_line(f"MA<{k_label(k)}m", v))
        for title, table in (
            ("Scale", self.by_scale),
            ("Ring", self.by_ring),
            ("Altitude", self.by_altitude),
        ):
            if not table:
                continue
            lines.append(f"\n  By {title.lower()}:")
            for key, stats in table.items():
                label = f"{title} {key:g}" if isinstance(key, float) else f"{title} {key}"
                lines.append(_bar_line(label, stats.rds_mean, f"n={stats.count}"))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "k": self.k,
            "rds_mean": self.rds_mean,
            "sd_mean": self.sd_mean,
            "ma": {k_label(k): v for k, v in self.ma.items()},
            "by_scale": {str(k): v.to_dict() for k, v in self.by_scale.items()},
            "by_ring": {k: v.to_dict() for k, v in self.by_ring.items()},
            "by_altitude": {f"{k:g}": v.to_dict() for k, v in self.by_altitude.items()},
        }


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _bar_line(name: str, score: float, note: str = "") -> str:
    bar_len = int(max(0.0, min(1.0, score)) * 20)
    bar = "█" * bar_len + "░" * (20 - bar_len)
    return f"  {name:<14} {bar} {score * 100:6.2f}%  {note}".rstrip()


def k_label(k: float) -> str:
    return str(int(k)) if float(k).is_integer() else f"{k:g}"


# ---------------------------------------------------------------------------
# Per-sample metrics
# ---------------------------------------------------------------------------

def spatial_distance(
    pred_px: Sequence[float],
    gt_px: Sequence[float],
    meters_per_pixel: float,
) -> float:
    """Euclidean prediction error in metres."""
    if meters_per_pixel <= 0:
        raise ValueError(f"meters_per_pixel must be > 0, got {meters_per_pixel}")
    dx = (pred_px[0] - gt_px[0]) * meters_per_pixel
    dy = (pred_px[1] - gt_px[1]) * meters_per_pixel
    return math.hypot(dx, dy)


def relative_distance(pred_px: Sequence[float], gt_px: Sequence[float], w: float, h: float) -> float:
    if w <= 0 or h <= 0:
        raise ValueError(f"image size must be positive, got {w}x{h}")
    dx = abs(pred_px[0] - gt_px[0]) / w
    dy = abs(pred_px[1] - gt_px[1]) / h
    return math.sqrt((dx * dx + dy * dy) / 2.0)


def rds(
    pred_px: Sequence[float],
    gt_px: Sequence[float],
    w: float,
    h: float,
    k: float = DEFAULT_K,
) -> float:
    """Relative distance score exp(-k * RD), in (0, 1]."""
    if k <= 0:
        raise ValueError(f"k must be > 0, got {k}")
    return math.exp(-k * relative_distance(pred_px, gt_px, w, h))


def ring_bucket(gt_px: Sequence[float], search_side: float) -> str:
    """Band of 2 * |gt - centre| / side in steps of 0.2; beyond 1 is the corner region."""
    c = search_side / 2.0
    d = 2.0 * math.hypot(gt_px[0] - c, gt_px[1] - c) / search_side
    if d > 1.0:
        return RING_BUCKETS[-1]
    return RING_BUCKETS[min(int(d * 5), 4)]


def make_record(
    pair_id: str,
    pred_px: Sequence[float],
    gt_px: Sequence[float],
    search_side: float,
    meters_per_pixel: float,
    scale_bucket: int,
    altitude_m: float,
    k: float = DEFAULT_K,
) -> EvalRecord:
    rd = relative_distance(pred_px, gt_px, search_side, search_side)
    return EvalRecord(
        pair_id=pair_id,
        sd_m=spatial_distance(pred_px, gt_px, meters_per_pixel),
        rd=rd,
        rds=math.exp(-k * rd),
        scale_bucket=int(scale_bucket),
        ring_bucket=ring_bucket(gt_px, search_side),
        altitude_m=float(altitude_m),
        pred_px=(float(pred_px[0]), float(pred_px[1])),
        gt_px=(float(gt_px[0]), float(gt_px[1])),
    )


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def ma(records: Iterable[EvalRecord], k_m: float) -> float:
    """Fraction of records with SD strictly below *k_m* metres."""
    sds = [r.sd_m for r in records]
    if not sds:
        raise DataError("MA needs at least one record")
    return sum(1 for sd in sds if sd < k_m) / len(sds)


def _group(records: Sequence[EvalRecord], cfg: ReportConfig) -> GroupStats:
    n = len(records)
    return GroupStats(
        count=n,
        rds_mean=math.fsum(r.rds for r in records) / n,
        sd_mean=math.fsum(r.sd_m for r in records) / n,
        ma={t: ma(records, t) for t in cfg.ma_thresholds_m},
    )


def report(records: Sequence[EvalRecord], cfg: ReportConfig | None = None) -> Report:
    """Overall and per-scale / per-ring / per-altitude statistics."""
    cfg = cfg or ReportConfig()
    records = list(records)
    if not records:
        raise DataError("cannot build a report from zero records")
    start = time.perf_counter()

    overall = _group(records, cfg)
    scales = sorted({r.scale_bucket for r in records})
    altitudes = sorted({r.altitude_m for r in records})
    rings = [b for b in RING_BUCKETS if any(r.ring_bucket == b for r in records)]

    result = Report(
        count=overall.count,
        rds_mean=overall.rds_mean,
        sd_mean=overall.sd_mean,
        ma=overall.ma,
        by_scale={s: _group([r for r in records if r.scale_bucket == s], cfg) for s in scales},
        by_ring={b: _group([r for r in records if r.ring_bucket == b], cfg) for b in rings},
        by_altitude={a: _group([r for r in records if r.altitude_m == a], cfg) for a in altitudes},
        k=cfg.k,
    )
    result.evaluation_ms = (time.perf_counter() - start) * 1000
    return result


def write_report(
    records: Sequence[EvalRecord],
    result: Report,
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """Write ``records.csv`` and ``summary.json`` into *out_dir*."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "records.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow(r.row())
    json_path = out / "summary.json"
    json_path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    logger.info("Report written to %s (%d records)", out, len(records))
    return csv_path, json_path
