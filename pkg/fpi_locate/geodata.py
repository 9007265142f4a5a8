"""Geo frames, crops and the on-disk dataset.

Images are float32 arrays of shape 3 x H x W with values in [0, 1].  Pixel
``(x, y)`` addresses column ``x`` and row ``y``; pixel ``i`` covers
``[i, i + 1)`` so its centre sits at ``i + 0.5``.

Dataset layout::

    <root>/<split>/<pair_id>/query.png
    <root>/<split>/<pair_id>/search_<scale>.png
    <root>/<split>/<pair_id>/meta.json
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .common import STREAM_SHUFFLE, parallel_map
from .numkernel import RngState
from .validation import ConfigError, DataError, validate_meta

logger = logging.getLogger("fpi_locate.geodata")

# 700 source pixels span 180 m
SOURCE_M_PER_PX = 180.0 / 700.0
EARTH_RADIUS_M = 6378137.0
DEFAULT_BATCH_SIZE = 16
SPLITS = ("train", "test")


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeoPose:
    lat: float
    lon: float
    altitude_m: float = 90.0

    def __post_init__(self):
        if abs(self.lat) > 90:
            raise DataError(f"latitude out of range: {self.lat}")
        if abs(self.lon) > 180:
            raise DataError(f"longitude out of range: {self.lon}")


def meters_per_pixel(
    crop_side_px: float,
    resized_side: float | None = None,
    ground_resolution: float = SOURCE_M_PER_PX,
) -> float:
    """Ground metres per pixel of a crop of *crop_side_px* source pixels.

    Without *resized_side* this is the native source resolution.
    """
    if crop_side_px <= 0:
        raise ValueError(f"crop side must be > 0, got {crop_side_px}")
    if resized_side is None:
        return ground_resolution
    if resized_side <= 0:
        raise ValueError(f"resized side must be > 0, got {resized_side}")
    return ground_resolution * crop_side_px / resized_side


@dataclass(frozen=True)
class LocalFrame:
    """Equirectangular tangent frame anchored at a reference pixel.

    ``ref_xy`` is the pixel at (lat0, lon0); x grows east, y grows south.
    """

    lat0: float
    lon0: float
    m_per_px: float
    ref_xy: tuple[float, float] = (0.0, 0.0)

    def to_pixel(self, lat: float, lon: float) -> tuple[float, float]:
        east = math.radians(lon - self.lon0) * EARTH_RADIUS_M * math.cos(math.radians(self.lat0))
        north = math.radians(lat - self.lat0) * EARTH_RADIUS_M
        return self.ref_xy[0] + east / self.m_per_px, self.ref_xy[1] - north / self.m_per_px

    def to_geo(self, x: float, y: float) -> tuple[float, float]:
        east = (x - self.ref_xy[0]) * self.m_per_px
        north = (self.ref_xy[1] - y) * self.m_per_px
        lat = self.lat0 + math.degrees(north / EARTH_RADIUS_M)
        lon = self.lon0 + math.degrees(east / (EARTH_RADIUS_M * math.cos(math.radians(self.lat0))))
        return lat, lon


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in metres on a sphere of the WGS84 equatorial radius."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


# ---------------------------------------------------------------------------
# Image helpers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelStats:
    """Per-channel normalisation applied before encoding."""

    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def identity(cls) -> "ChannelStats":
        return cls()

    @classmethod
    def from_images(cls, images: Sequence[np.ndarray]) -> "ChannelStats":
        if not images:
            raise DataError("cannot compute channel statistics without images")
        total = np.zeros(3)
        total_sq = np.zeros(3)
        count = 0
        for img in images:
            flat = img.reshape(3, -1).astype(np.float64)
            total += flat.sum(axis=1)
            total_sq += (flat * flat).sum(axis=1)
            count += flat.shape[1]
        mean = total / count
        std = np.sqrt(np.maximum(total_sq / count - mean * mean, 0.0))
        std = np.where(std < 1e-6, 1.0, std)
        return cls(mean=tuple(float(v) for v in mean), std=tuple(float(v) for v in std))

    def apply(self, image: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32).reshape(3, 1, 1)
        std = np.asarray(self.std, dtype=np.float32).reshape(3, 1, 1)
        return (np.asarray(image, dtype=np.float32) - mean) / std

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, doc: dict) -> "ChannelStats":
        try:
            return cls(mean=tuple(float(v) for v in doc["mean"]),
                       std=tuple(float(v) for v in doc["std"]))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed channel statistics: {doc!r}") from e


def load_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return np.ascontiguousarray(rgb.transpose(2, 0, 1) / 255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """3 x H x W float image -> H x W x 3 uint8."""
    return np.clip(np.round(np.transpose(image, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def image_size(path: str | Path) -> tuple[int, int]:
    """(width, height) of an image file, read from its header only."""
    try:
        with Image.open(path) as img:
            return img.size
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def crop_resize(
    image: np.ndarray,
    center_xy: tuple[float, float],
    side: float,
    out_side: int,
    fill: np.ndarray | None = None,
) -> tuple[np.ndarray, bool]:
    """Square crop of *side* source pixels centred at *center_xy*, resampled to *out_side*.

    Bilinear sampling at output pixel centres.  Area outside the source is
    filled with *fill* (default: per-channel mean of the image).  Returns the
    crop and whether any fill was needed.
    """
    _, h, w = image.shape
    if fill is None:
        fill = image.reshape(3, -1).mean(axis=1)
    left = center_xy[0] - side / 2.0
    top = center_xy[1] - side / 2.0
    step = side / out_side
    coords = (np.arange(out_side) + 0.5) * step - 0.5
    rows, cols = np.meshgrid(top + coords, left + coords, indexing="ij")
    out = np.empty((3, out_side, out_side), dtype=np.float32)
    for c in range(3):
        out[c] = ndimage.map_coordinates(
            image[c], [rows, cols], order=1, mode="constant", cval=float(fill[c]),
        )
    needs_fill = left < 0 or top < 0 or left + side > w or top + side > h
    return out, bool(needs_fill)


def resize_image(image: np.ndarray, out_side: int) -> np.ndarray:
    """Bilinear resize of a square image to *out_side* x *out_side*."""
    _, h, w = image.shape
    if h == w == out_side:
        return image
    if h != w:
        # stretch each axis independently
        rows = (np.arange(out_side) + 0.5) * h / out_side - 0.5
        cols = (np.arange(out_side) + 0.5) * w / out_side - 0.5
        grid = np.meshgrid(rows, cols, indexing="ij")
        return np.stack([
            ndimage.map_coordinates(image[c], grid, order=1, mode="nearest") for c in range(3)
        ]).astype(np.float32)
    out, _ = crop_resize(image, (w / 2.0, h / 2.0), w, out_side)
    return out


# ---------------------------------------------------------------------------
# Augmentation and test scales
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    coverage_C: float = 0.75
    scale_min: int = 512
    scale_max: int = 1000
    probability: float = 1.0   # chance a training sample is cropped at all

    def __post_init__(self):
        if not 0 < self.coverage_C <= 1:
            raise ConfigError(f"coverage_C must be in (0, 1], got {self.coverage_C}")
        if self.scale_min < 1 or self.scale_min > self.scale_max:
            raise ConfigError(f"invalid scale range [{self.scale_min}, {self.scale_max}]")
        if not 0 <= self.probability <= 1:
            raise ConfigError(f"probability must be in [0, 1], got {self.probability}")


@dataclass(frozen=True)
class TestScaleConfig:
    scale_min: int = 700
    scale_max: int = 1800
    step: int = 100
    coverage: float = 0.95

    def __post_init__(self):
        if self.step < 1 or self.scale_min < 1 or self.scale_min > self.scale_max:
            raise ConfigError(
                f"invalid test scales {self.scale_min}..{self.scale_max} step {self.step}"
            )
        if not 0 < self.coverage <= 1:
            raise ConfigError(f"coverage must be in (0, 1], got {self.coverage}")

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(range(self.scale_min, self.scale_max + 1, self.step))


@dataclass
class Crop:
    image: np.ndarray
    gt_pixel_xy: tuple[float, float]
    crop_side_px: int
    padded: bool = False


def _place_in_crop(side: float, coverage: float, rng: np.random.Generator) -> np.ndarray:
    """Local gt position, uniform over the central square of fractional side *coverage*."""
    u = rng.uniform(-1.0, 1.0, size=2)
    return side / 2.0 + u * coverage * side / 2.0


def random_crop_augment(
    satellite: np.ndarray,
    gt_center_px: tuple[float, float],
    cfg: AugmentConfig,
    rng: np.random.Generator,
    out_side: int,
) -> Crop:
    """Crop of random side around the ground truth, with the gt at a random offset."""
    side = int(rng.integers(cfg.scale_min, cfg.scale_max + 1))
    local = _place_in_crop(side, cfg.coverage_C, rng)
    gx, gy = gt_center_px
    center = (gx - local[0] + side / 2.0, gy - local[1] + side / 2.0)
    image, padded = crop_resize(satellite, center, side, out_side)
    limit = np.nextafter(out_side, 0)
    new_gt = np.minimum(local * out_side / side, limit)
    return Crop(image=image, gt_pixel_xy=(float(new_gt[0]), float(new_gt[1])),
                crop_side_px=side, padded=padded)


@dataclass
class SamplePair:
    pair_id: str
    query_img: np.ndarray
    search_img: np.ndarray
    gt_pixel_xy: tuple[float, float]
    meters_per_pixel: float
    altitude_m: float
    scale_bucket: int
    lat: float = 0.0
    lon: float = 0.0
    source: str = "synthetic"
    padded: bool = False

    def __post_init__(self):
        if self.meters_per_pixel <= 0:
            raise DataError(f"{self.pair_id}: meters_per_pixel must be > 0")
        h, w = self.search_img.shape[-2:]
        x, y = self.gt_pixel_xy
        if not (0 <= x < w and 0 <= y < h):
            raise DataError(f"{self.pair_id}: gt {self.gt_pixel_xy} outside {w}x{h} search image")

    @property
    def search_side(self) -> int:
        return self.search_img.shape[-1]


def build_test_scales(
    satellite: np.ndarray,
    gt_px: tuple[float, float],
    query_img: np.ndarray,
    cfg: TestScaleConfig,
    rng: np.random.Generator,
    out_side: int,
    *,
    pair_id: str = "",
    altitude_m: float = 90.0,
    lat: float = 0.0,
    lon: float = 0.0,
    source: str = "synthetic",
) -> list[SamplePair]:
    """One search map per test scale, gt uniform within the central *coverage* square."""
    pairs: list[SamplePair] = []
    gx, gy = gt_px
    for scale in cfg.scales:
        local = _place_in_crop(scale, cfg.coverage, rng)
        center = (gx - local[0] + scale / 2.0, gy - local[1] + scale / 2.0)
        image, padded = crop_resize(satellite, center, scale, out_side)
        if padded:
            logger.warning("%s: scale %d exceeds the source extent; mean fill used", pair_id, scale)
        gt = np.minimum(local * out_side / scale, np.nextafter(out_side, 0))
        pairs.append(SamplePair(
            pair_id=pair_id,
            query_img=query_img,
            search_img=image,
            gt_pixel_xy=(float(gt[0]), float(gt[1])),
            meters_per_pixel=meters_per_pixel(scale, out_side),
            altitude_m=altitude_m,
            scale_bucket=scale,
            lat=lat,
            lon=lon,
            source=source,
            padded=padded,
        ))
    return pairs


# ---------------------------------------------------------------------------
# Dataset on disk
# ---------------------------------------------------------------------------

def write_pair(split_dir: Path, pairs: Sequence[SamplePair]) -> Path:
    """Write one pair directory (one query, one search image per scale)."""
    if not pairs:
        raise DataError("nothing to write")
    first = pairs[0]
    pair_dir = Path(split_dir) / first.pair_id
    pair_dir.mkdir(parents=True, exist_ok=True)
    save_png(first.query_img, pair_dir / "query.png")
    meta = {
        "lat": first.lat,
        "lon": first.lon,
        "altitude_m": first.altitude_m,
        "gt_pixel_xy": [first.gt_pixel_xy[0], first.gt_pixel_xy[1]],
        "meters_per_pixel": first.meters_per_pixel,
        "scale_bucket": first.scale_bucket,
        "source": first.source,
    }
    if len(pairs) > 1:
        meta["searches"] = {
            str(p.scale_bucket): {
                "gt_pixel_xy": [p.gt_pixel_xy[0], p.gt_pixel_xy[1]],
                "meters_per_pixel": p.meters_per_pixel,
                "padded": p.padded,
            }
            for p in pairs
        }
    for p in pairs:
        save_png(p.search_img, pair_dir / f"search_{p.scale_bucket}.png")
    (pair_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return pair_dir


@dataclass(frozen=True)
class _Entry:
    pair_id: str
    query_path: Path
    search_path: Path
    meta: dict = field(hash=False)


def _expand_meta(meta: dict) -> list[tuple[int, dict]]:
    searches = meta.get("searches")
    if not searches:
        return [(meta["scale_bucket"], meta)]
    out = []
    for scale, entry in sorted(searches.items(), key=lambda kv: int(kv[0])):
        sub = {k: v for k, v in meta.items() if k != "searches"}
        sub.update(entry)
        sub["scale_bucket"] = int(scale)
        out.append((int(scale), sub))
    return out


class ManifestDataset:
    """Validated index of sample pairs; images are read lazily."""

    def __init__(self, root: Path, entries: list[_Entry]):
        self.root = root
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> SamplePair:
        e = self.entries[index]
        meta = e.meta
        return SamplePair(
            pair_id=e.pair_id,
            query_img=load_png(e.query_path),
            search_img=load_png(e.search_path),
            gt_pixel_xy=(float(meta["gt_pixel_xy"][0]), float(meta["gt_pixel_xy"][1])),
            meters_per_pixel=float(meta["meters_per_pixel"]),
            altitude_m=float(meta["altitude_m"]),
            scale_bucket=int(meta["scale_bucket"]),
            lat=float(meta["lat"]),
            lon=float(meta["lon"]),
            source=meta["source"],
            padded=bool(meta.get("padded", False)),
        )

    @property
    def pair_ids(self) -> list[str]:
        return sorted({e.pair_id for e in self.entries})

    def order(self, shuffle_seed: int | None = None, epoch: int = 0) -> list[int]:
        if shuffle_seed is None:
            return list(range(len(self)))
        rng = RngState(shuffle_seed).generator(STREAM_SHUFFLE, epoch)
        return [int(i) for i in rng.permutation(len(self))]

    def iterate(
        self,
        batch_size: int = DEFAULT_BATCH_SIZE,
        shuffle_seed: int | None = None,
        epoch: int = 0,
    ) -> Iterator[list[SamplePair]]:
        """Yield batches (last one may be short); order fixed by *shuffle_seed* and *epoch*."""
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        order = self.order(shuffle_seed, epoch)
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            yield parallel_map(self.__getitem__, chunk)


def load_manifest(root: str | Path, split: str | None = None) -> ManifestDataset:
    """Index ``<root>/<split>`` (or *root* itself when it holds pair directories)."""
    root = Path(root)
    base = root / split if split and (root / split).is_dir() else root
    if not base.is_dir():
        raise DataError(f"dataset directory not found: {base}")

    entries: list[_Entry] = []
    problems: list[str] = []
    for pair_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        meta_path = pair_dir / "meta.json"
        query_path = pair_dir / "query.png"
        if not meta_path.is_file():
            problems.append(f"{pair_dir.name}: missing meta.json")
            continue
        if not query_path.is_file():
            problems.append(f"{pair_dir.name}: missing query.png")
            continue
        try:
            meta = json.loads(meta_path.read_text())
        except (json.JSONDecodeError, OSError) as e:
            problems.append(f"{pair_dir.name}: malformed meta.json ({e})")
            continue
        issues = validate_meta(meta)
        if issues:
            problems.extend(f"{pair_dir.name}: {p}" for p in issues)
            continue
        for scale, sub in _expand_meta(meta):
            search_path = pair_dir / f"search_{scale}.png"
            if not search_path.is_file():
                problems.append(f"{pair_dir.name}: missing {search_path.name}")
                continue
            issues = validate_meta(sub, image_size(search_path))
            if issues:
                problems.extend(f"{pair_dir.name}/{scale}: {p}" for p in issues)
                continue
            entries.append(_Entry(pair_dir.name, query_path, search_path, sub))

    if problems:
        raise DataError("invalid dataset:\n  " + "\n  ".join(problems))
    if not entries:
        raise DataError(f"no samples in {base}")
    logger.info("Loaded %d samples from %s", len(entries), base)
    return ManifestDataset(base, entries)


def channel_stats(dataset: ManifestDataset, limit: int | None = None) -> ChannelStats:
    """Per-channel mean/std over query and search images of *dataset*."""
    images: list[np.ndarray] = []
    for i in range(len(dataset) if limit is None else min(limit, len(dataset))):
        pair = dataset[i]
        images.extend((pair.query_img, pair.search_img))
    return ChannelStats.from_images(images)
