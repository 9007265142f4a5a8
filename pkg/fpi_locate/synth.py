"""Procedural aerial scenes standing in for real drone/satellite pairs.

A scene is a layout (value-noise terrain, rectangular buildings, straight
roads) rendered twice: once with the satellite palette and once with the
drone palette.  The drone query is a rotated, jittered window of the drone
rendering around the ground-truth point, so the position is exact by
construction while appearance differs between the two sources.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage, signal

from .common import STREAM_SYNTH, STREAM_TEST_SCALES, parallel_map, stable_key
from .geodata import (
    SOURCE_M_PER_PX,
    SPLITS,
    GeoPose,
    LocalFrame,
    SamplePair,
    TestScaleConfig,
    build_test_scales,
    haversine_m,
    resize_image,
    write_pair,
)
from .numkernel import RngState
from .validation import ConfigError, DataError

logger = logging.getLogger("fpi_locate.synth")

ALTITUDES_M = (80.0, 90.0, 100.0)
REFERENCE_ALTITUDE_M = 90.0


@dataclass(frozen=True)
class Palette:
    low: tuple[int, int, int]
    high: tuple[int, int, int]
    water: tuple[int, int, int]
    road: tuple[int, int, int]
    roofs: tuple[tuple[int, int, int], ...]


SATELLITE_PALETTE = Palette(
    low=(52, 84, 44), high=(150, 138, 98), water=(40, 62, 86), road=(118, 118, 112),
    roofs=((168, 76, 60), (196, 196, 188), (92, 96, 110), (210, 170, 120), (70, 70, 70)),
)
DRONE_PALETTE = Palette(
    low=(78, 118, 62), high=(182, 170, 128), water=(58, 88, 110), road=(150, 148, 140),
    roofs=((190, 98, 78), (228, 226, 218), (116, 120, 136), (232, 196, 146), (96, 94, 92)),
)


@dataclass(frozen=True)
class SynthParams:
    source_side: int = 640         # train satellite side in source pixels
    query_window_px: int = 96      # source pixels seen by the drone at the reference altitude
    octaves: int = 4
    base_cell_px: int = 64
    detail_cell_px: int = 4        # high-frequency texture octave
    building_density: float = 0.6  # buildings per 10 000 px^2
    building_px: tuple[int, int] = (12, 48)
    roads: int = 4
    road_width_px: int = 6
    water_level: float = 0.22
    max_rotation_deg: float = 10.0
    brightness: float = 0.08
    contrast: float = 0.15
    blur_sigma: float = 0.7
    jitter: bool = True
    distinct_palette: bool = True
    lat0: float = 30.27
    lon0: float = 120.12

    def __post_init__(self):
        if self.source_side < 16 or self.query_window_px < 4:
            raise ConfigError("source_side and query_window_px are too small")
        if self.query_window_px * max(ALTITUDES_M) / REFERENCE_ALTITUDE_M > self.source_side:
            raise ConfigError("query window does not fit inside the source scene")
        if self.octaves < 1 or self.base_cell_px < 2 or self.detail_cell_px < 1:
            raise ConfigError("invalid noise settings")
        lo, hi = self.building_px
        if lo < 1 or lo > hi:
            raise ConfigError(f"invalid building size range {self.building_px}")


@dataclass
class SceneLayout:
    height: np.ndarray                                  # side x side in [0, 1]
    buildings: list[tuple[int, int, int, int, int]]     # x0, y0, x1, y1, roof index
    roads: list[tuple[float, float, float, float]]      # x0, y0, x1, y1

    @property
    def side(self) -> int:
        return self.height.shape[0]


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------

def value_noise(side: int, cell_px: int, rng: np.random.Generator) -> np.ndarray:
    """Random lattice every *cell_px* pixels, cubic-interpolated to side x side."""
    cells = side // cell_px + 3
    lattice = rng.random((cells, cells))
    up = ndimage.zoom(lattice, cell_px, order=3, mode="reflect")
    return up[:side, :side]


def terrain(side: int, params: SynthParams, rng: np.random.Generator) -> np.ndarray:
    total = np.zeros((side, side))
    weight = 0.0
    amplitude, cell = 1.0, params.base_cell_px
    for _ in range(params.octaves):
        total += amplitude * value_noise(side, max(cell, 2), rng)
        weight += amplitude
        amplitude *= 0.5
        cell //= 2
    total += 0.15 * value_noise(side, params.detail_cell_px, rng)
    weight += 0.15
    total /= weight
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def make_layout(side: int, params: SynthParams, rng: np.random.Generator) -> SceneLayout:
    height = terrain(side, params, rng)
    n_buildings = max(1, int(round(params.building_density * side * side / 10_000)))
    lo, hi = params.building_px
    buildings = []
    for _ in range(n_buildings):
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        x0 = int(rng.integers(0, max(1, side - w)))
        y0 = int(rng.integers(0, max(1, side - h)))
        roof = int(rng.integers(0, len(SATELLITE_PALETTE.roofs)))
        buildings.append((x0, y0, x0 + w, y0 + h, roof))
    roads = []
    for _ in range(params.roads):
        # a straight road crossing the scene between two random edge points
        if rng.random() < 0.5:
            roads.append((0.0, float(rng.uniform(0, side)), float(side), float(rng.uniform(0, side))))
        else:
            roads.append((float(rng.uniform(0, side)), 0.0, float(rng.uniform(0, side)), float(side)))
    return SceneLayout(height=height, buildings=buildings, roads=roads)


def render(layout: SceneLayout, palette: Palette, params: SynthParams) -> np.ndarray:
    """Rasterise a layout into a 3 x side x side float image."""
    h = layout.height[..., None]
    low = np.asarray(palette.low, dtype=np.float64)
    high = np.asarray(palette.high, dtype=np.float64)
    rgb = low + (high - low) * h
    rgb = np.where(h < params.water_level, np.asarray(palette.water, dtype=np.float64), rgb)
    img = Image.fromarray(np.clip(np.round(rgb), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for x0, y0, x1, y1 in layout.roads:
        draw.line((x0, y0, x1, y1), fill=palette.road, width=params.road_width_px)
    for x0, y0, x1, y1, roof in layout.buildings:
        draw.rectangle((x0, y0, x1 - 1, y1 - 1), fill=palette.roofs[roof])
    return np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)


# ---------------------------------------------------------------------------
# Drone view
# ---------------------------------------------------------------------------

def sample_window(
    image: np.ndarray,
    center_xy: tuple[float, float],
    window_px: float,
    out_side: int,
    angle_rad: float = 0.0,
) -> np.ndarray:
    """Bilinear samples of a rotated square window (side *window_px*) around *center_xy*."""
    offsets = (np.arange(out_side) + 0.5) * window_px / out_side - window_px / 2.0
    dv, du = np.meshgrid(offsets, offsets, indexing="ij")
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    xs = center_xy[0] + du * c - dv * s - 0.5
    ys = center_xy[1] + du * s + dv * c - 0.5
    fill = image.reshape(3, -1).mean(axis=1)
    return np.stack([
        ndimage.map_coordinates(image[ch], [ys, xs], order=1, mode="constant", cval=float(fill[ch]))
        for ch in range(3)
    ]).astype(np.float32)


def drone_view(
    drone_render: np.ndarray,
    gt_xy: tuple[float, float],
    altitude_m: float,
    out_side: int,
    params: SynthParams,
    rng: np.random.Generator,
) -> np.ndarray:
    window = params.query_window_px * altitude_m / REFERENCE_ALTITUDE_M
    if not params.jitter:
        return sample_window(drone_render, gt_xy, window, out_side)

    angle = math.radians(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg))
    source = drone_render
    if params.blur_sigma > 0:
        source = ndimage.gaussian_filter(drone_render, sigma=(0, params.blur_sigma, params.blur_sigma))
    view = sample_window(source, gt_xy, window, out_side, angle)
    gain = 1.0 + rng.uniform(-params.contrast, params.contrast)
    bias = rng.uniform(-params.brightness, params.brightness)
    mean = view.mean(axis=(1, 2), keepdims=True)
    return np.clip((view - mean) * gain + mean + bias, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass
class SynthScene:
    satellite: np.ndarray
    query: np.ndarray
    gt_xy: tuple[float, float]
    pose: GeoPose


def make_scene(
    side: int,
    query_side: int,
    params: SynthParams,
    rng: np.random.Generator,
) -> SynthScene:
    """One scene with the drone above its centre."""
    layout = make_layout(side, params, rng)
    satellite = render(layout, SATELLITE_PALETTE, params)
    drone = render(layout, DRONE_PALETTE, params) if params.distinct_palette else satellite
    altitude = float(rng.choice(ALTITUDES_M))
    gt = (side / 2.0, side / 2.0)
    query = drone_view(drone, gt, altitude, query_side, params, rng)

    # scene origin scattered a few km around the reference point
    frame = LocalFrame(params.lat0, params.lon0, SOURCE_M_PER_PX)
    lat, lon = frame.to_geo(*(rng.uniform(-20_000, 20_000, size=2)))
    logger.debug("scene %.0f m from the reference point",
                 haversine_m(params.lat0, params.lon0, lat, lon))
    return SynthScene(satellite=satellite, query=query, gt_xy=gt,
                      pose=GeoPose(lat, lon, altitude))


def _train_pair(index: int, seed: int, query_side: int, params: SynthParams) -> list[SamplePair]:
    rng = RngState(seed).generator(STREAM_SYNTH, stable_key("train"), index)
    scene = make_scene(params.source_side, query_side, params, rng)
    return [SamplePair(
        pair_id=f"pair_{index:05d}",
        query_img=scene.query,
        search_img=scene.satellite,
        gt_pixel_xy=scene.gt_xy,
        meters_per_pixel=SOURCE_M_PER_PX,
        altitude_m=scene.pose.altitude_m,
        scale_bucket=params.source_side,
        lat=scene.pose.lat,
        lon=scene.pose.lon,
    )]


def _test_pairs(
    index: int,
    seed: int,
    query_side: int,
    search_side: int,
    params: SynthParams,
    scales: TestScaleConfig,
) -> list[SamplePair]:
    rng = RngState(seed).generator(STREAM_SYNTH, stable_key("test"), index)
    side = max(params.source_side, scales.scale_max)
    scene = make_scene(side, query_side, params, rng)
    return build_test_scales(
        scene.satellite, scene.gt_xy, scene.query, scales,
        RngState(seed).generator(STREAM_TEST_SCALES, index), search_side,
        pair_id=f"pair_{index:05d}", altitude_m=scene.pose.altitude_m,
        lat=scene.pose.lat, lon=scene.pose.lon,
    )


def synth_generate(
    out_dir: str | Path,
    n_pairs: int,
    seed: int,
    params: SynthParams | None = None,
    *,
    split: str = "train",
    query_side: int = 64,
    search_side: int = 160,
    test_scales: TestScaleConfig | None = None,
    workers: int | None = None,
) -> Path:
    """Write *n_pairs* pairs to ``<out_dir>/<split>``; output is a pure function of the arguments."""
    if n_pairs < 1:
        raise ConfigError(f"n_pairs must be >= 1, got {n_pairs}")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    params = params or SynthParams()
    test_scales = test_scales or TestScaleConfig()
    split_dir = Path(out_dir) / split
    try:
        split_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {split_dir}: {e}") from e

    def build(index: int) -> Path:
        if split == "train":
            pairs = _train_pair(index, seed, query_side, params)
        else:
            pairs = _test_pairs(index, seed, query_side, search_side, params, test_scales)
        try:
            return write_pair(split_dir, pairs)
        except OSError as e:
            raise DataError(f"cannot write pair {index}: {e}") from e

    parallel_map(build, range(n_pairs), workers)
    logger.info("Wrote %d %s pairs to %s (seed %d)", n_pairs, split, split_dir, seed)
    return split_dir


# ---------------------------------------------------------------------------
# Template-matching oracle
# ---------------------------------------------------------------------------

def _gray(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float64).mean(axis=0)


def ncc_map(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Zero-mean normalised cross-correlation over all fully-contained placements."""
    t = template - template.mean()
    t_norm = math.sqrt(float((t * t).sum()))
    n = template.size
    box = np.ones_like(template)
    local_sum = signal.fftconvolve(image, box, mode="valid")
    local_sq = signal.fftconvolve(image * image, box, mode="valid")
    num = signal.fftconvolve(image, t[::-1, ::-1], mode="valid")
    var = np.maximum(local_sq - local_sum * local_sum / n, 1e-12)
    return num / (np.sqrt(var) * max(t_norm, 1e-12))


def template_match(pair: SamplePair, window_px: float, crop_side_px: float) -> tuple[float, float]:
    """Locate the query inside the search map by NCC; returns the match centre in pixels.

    *window_px* is the query footprint and *crop_side_px* the search-map
    side, both in source pixels.
    """
    side = pair.search_side
    template_side = max(3, int(round(window_px * side / crop_side_px)))
    template = _gray(resize_image(pair.query_img, template_side))
    scores = ncc_map(_gray(pair.search_img), template)
    row, col = np.unravel_index(int(np.argmax(scores)), scores.shape)
    return col + template_side / 2.0, row + template_side / 2.0
