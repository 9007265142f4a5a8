"""Correlation head and the end-to-end model.

The query feature map is used as a convolution kernel and slid over the
search feature map (one group per sample, so a whole batch runs as a single
grouped convolution).  The resulting score grid is decoded into a pixel
position by upsampling to the search side, smoothing with a 3x3 window and
taking the argmax.  The model divides the raw scores by the square root of
the dot-product length (C * K * K) so their spread does not grow with the
embedding width or the query grid; the argmax is unchanged.

Coordinate convention: cell ``i`` of the search grid covers pixels
``[i * S/G, (i + 1) * S/G)`` and is centred at ``(i + 0.5) * S/G``.  Heatmap
cell ``j`` scores the query centred on search cell ``j + origin_cells``.
With an even query grid the true centre of the kernel sits half a cell
right/below that cell; labels use the same cell convention, so training
absorbs the offset.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import signal

from . import numkernel as nk
from .encoder import Encoder, EncoderConfig, FeatureMap, make_twin
from .geodata import ChannelStats
from .numkernel import Tensor
from .validation import ConfigError, DimensionError

logger = logging.getLogger("fpi_locate.fusion")

_TAPS = np.array([0.25, 0.5, 0.25])
SMOOTHING_KERNEL = np.outer(_TAPS, _TAPS) / np.outer(_TAPS, _TAPS).sum()


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class Heatmap:
    """Raw (pre-sigmoid) score grid plus the geometry to map it to pixels."""

    grid: Tensor                 # 1 x H x W
    search_side_px: int
    search_grid: int             # G, cells per side of the search feature map
    origin_cells: int = 0        # search cell scored by grid[0, 0]
    kernel_side: int = 1
    upsampled: np.ndarray | None = None

    @property
    def side(self) -> int:
        return self.grid.shape[-1]

    @property
    def cell_px(self) -> float:
        return self.search_side_px / self.search_grid

    @property
    def padded(self) -> bool:
        return self.side == self.search_grid


@dataclass
class Prediction:
    pixel_xy: tuple[float, float]
    score: float
    peak_index: tuple[int, int] = (0, 0)   # (row, col) in the upsampled map


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the two-branch model.

    Shared transformer fields describe both encoders; only the input side
    differs between the query and the search branch.
    """

    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    query_side: int = 64
    search_side: int = 160
    share_weights: bool = False
    padded: bool = True
    scaled_scores: bool = True   # divide scores by sqrt(C * K * K)

    def __post_init__(self):
        q, s = self.query_encoder, self.search_encoder
        if q.grid_side > s.grid_side:
            raise ConfigError(
                f"query grid {q.grid_side} is larger than search grid {s.grid_side}"
            )

    def _encoder(self, side: int) -> EncoderConfig:
        return EncoderConfig(
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            input_side=side,
        )

    @property
    def query_encoder(self) -> EncoderConfig:
        return self._encoder(self.query_side)

    @property
    def search_encoder(self) -> EncoderConfig:
        return self._encoder(self.search_side)

    @property
    def heatmap_side(self) -> int:
        g, k = self.search_encoder.grid_side, self.query_encoder.grid_side
        return g if self.padded else g - k + 1


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------

def correlation_padding(kernel_side: int) -> tuple[int, int, int, int]:
    """Zero padding (top, bottom, left, right) keeping the output at the input size."""
    before = (kernel_side - 1) // 2
    after = kernel_side - 1 - before
    return before, after, before, after


def correlate_grids(search: Tensor, query: Tensor, padded: bool = True) -> Tensor:
    """Batched correlation: B x C x G x G with B x C x K x K -> B x 1 x G' x G'."""
    if search.ndim != 4 or query.ndim != 4:
        raise DimensionError(f"expected batched maps, got {search.shape} and {query.shape}")
    b, c, g, gw = search.shape
    qb, qc, k, kw = query.shape
    if qb != b:
        raise DimensionError(f"batch sizes differ: search {b}, query {qb}")
    if qc != c:
        raise DimensionError(f"channel mismatch: search {c}, query {qc}")
    if k > g or kw > gw:
        raise DimensionError(f"query grid {k}x{kw} is larger than search grid {g}x{gw}")

    padding = correlation_padding(k) if padded else 0
    # every sample becomes its own group: (1, B*C, G, G) against (B, C, K, K)
    stacked = search.reshape(1, b * c, g, gw)
    out = nk.conv2d(stacked, query, stride=1, padding=padding, groups=b)
    return out.reshape(b, 1, out.shape[-2], out.shape[-1])


def correlate(search: FeatureMap, query: FeatureMap, padded: bool = True,
              search_side_px: int | None = None) -> Heatmap:
    """Cross-correlate one query feature map over one search feature map."""
    if search.batched or query.batched:
        raise DimensionError("correlate takes single feature maps; use correlate_grids for batches")
    if search.channels != query.channels:
        raise DimensionError(f"channel mismatch: search {search.channels}, query {query.channels}")
    c, g, k = search.channels, search.grid_h, query.grid_h
    out = correlate_grids(
        search.values.reshape(1, c, g, search.grid_w),
        query.values.reshape(1, c, k, query.grid_w),
        padded=padded,
    )
    return Heatmap(
        grid=out.reshape(1, out.shape[-2], out.shape[-1]),
        search_side_px=search_side_px or search.side_px,
        search_grid=g,
        origin_cells=0 if padded else (k - 1) // 2,
        kernel_side=k,
    )


# ---------------------------------------------------------------------------
# Decode
# ---------------------------------------------------------------------------

def smooth(values: np.ndarray) -> np.ndarray:
    """3x3 window with mirrored borders; a constant map stays constant."""
    return signal.convolve2d(values, SMOOTHING_KERNEL, mode="same", boundary="symm")


def decode(heat: Heatmap) -> Prediction:
    """Upsample, smooth and take the argmax (ties go to the lowest row, then column).

    The upsampled argmax maps back to a continuous heatmap-cell coordinate
    (align-corners) and from there to search pixels, cell ``i`` centred at
    ``(i + 0.5) * cell_px``. So a uniform map picks upsampled pixel (0, 0),
    which is the centre of cell (0, 0): ``(0.5 * cell_px, 0.5 * cell_px)``.
    ``peak_index`` keeps the raw (row, col) of the upsampled argmax.
    Fills ``heat.upsampled`` with the S x S map before smoothing.
    """
    side = heat.search_side_px
    grid = heat.grid.data.reshape(heat.grid.shape[-2], heat.grid.shape[-1]).astype(np.float64)
    h = grid.shape[0]
    if grid.min() == grid.max():
        # interpolation rounding would otherwise break exact ties
        up = np.full((side, side), grid[0, 0])
    else:
        up = nk.interpolation_matrix(h, side) @ grid @ nk.interpolation_matrix(grid.shape[1], side).T
    heat.upsampled = up

    smoothed = smooth(up)
    row, col = np.unravel_index(int(np.argmax(smoothed)), smoothed.shape)
    # upsampled pixel -> heatmap cell coordinate (align-corners) -> search pixel
    to_cell = (h - 1) / (side - 1) if side > 1 else 0.0
    u_col, u_row = col * to_cell, row * to_cell
    x = (u_col + heat.origin_cells + 0.5) * heat.cell_px
    y = (u_row + heat.origin_cells + 0.5) * heat.cell_px
    return Prediction(
        pixel_xy=(float(x), float(y)),
        score=float(smoothed[row, col]),
        peak_index=(int(row), int(col)),
    )


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class FPIModel:
    """Query encoder, search encoder and correlation head, plus input statistics."""

    config: ModelConfig
    query_encoder: Encoder
    search_encoder: Encoder
    stats: ChannelStats = field(default_factory=ChannelStats.identity)

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "FPIModel":
        query, search = make_twin(
            config.query_encoder, config.share_weights,
            search_side=config.search_side, rng=rng,
        )
        return cls(config=config, query_encoder=query, search_encoder=search)

    def parameters(self) -> dict[str, Tensor]:
        """Named parameters; a tensor shared by both branches appears once."""
        named: dict[str, Tensor] = {}
        seen: set[int] = set()
        for prefix, enc in (("query.", self.query_encoder), ("search.", self.search_encoder)):
            for name, t in enc.weights.items():
                if id(t) in seen:
                    continue
                seen.add(id(t))
                named[prefix + name] = t
        return named

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def heatmaps(self, query_imgs: np.ndarray, search_imgs: np.ndarray) -> Tensor:
        """Raw score grids B x 1 x H x W for a batch of normalised images."""
        q = self.query_encoder(query_imgs).values
        s = self.search_encoder(search_imgs).values
        scores = correlate_grids(s, q, padded=self.config.padded)
        return scores / self.score_divisor if self.config.scaled_scores else scores

    @property
    def score_divisor(self) -> float:
        """Square root of the correlation dot-product length, C * K * K."""
        k = self.config.query_encoder.grid_side
        return math.sqrt(self.config.embed_dim * k * k)

    @property
    def origin_cells(self) -> int:
        k = self.config.query_encoder.grid_side
        return 0 if self.config.padded else (k - 1) // 2

    def wrap(self, grid: Tensor) -> Heatmap:
        """Attach the search geometry to one H x W (or 1 x H x W) score grid."""
        return Heatmap(
            grid=grid.reshape(1, grid.shape[-2], grid.shape[-1]),
            search_side_px=self.config.search_side,
            search_grid=self.config.search_encoder.grid_side,
            origin_cells=self.origin_cells,
            kernel_side=self.config.query_encoder.grid_side,
        )

    def heatmap(self, query_img: np.ndarray, search_img: np.ndarray) -> Heatmap:
        q = self.stats.apply(query_img)[None]
        s = self.stats.apply(search_img)[None]
        return self.wrap(self.heatmaps(q, s))


def forward_pair(query_img: np.ndarray, search_img: np.ndarray,
                 model: FPIModel) -> tuple[Heatmap, Prediction]:
    """Encode both images (raw [0, 1] CHW arrays), correlate and decode."""
    cfg = model.config
    if query_img.shape[-1] != cfg.query_side or search_img.shape[-1] != cfg.search_side:
        raise DimensionError(
            f"images {query_img.shape} / {search_img.shape} do not match the configured "
            f"sides {cfg.query_side} / {cfg.search_side}"
        )
    heat = model.heatmap(query_img, search_img)
    return heat, decode(heat)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def heatmap_image(heat: Heatmap, size: tuple[int, int] | None = None) -> Image.Image:
    """8-bit grayscale rendering of the upsampled heatmap, min-max normalised."""
    if heat.upsampled is None:
        decode(heat)
    values = heat.upsampled
    lo, hi = float(values.min()), float(values.max())
    scaled = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    img = Image.fromarray(np.round(scaled * 255.0).astype(np.uint8))
    if size is not None and img.size != tuple(size):
        img = img.resize(tuple(size), Image.Resampling.BILINEAR)
    return img


def save_heatmap_png(heat: Heatmap, path: str | Path, size: tuple[int, int] | None = None) -> Path:
    path = Path(path)
    heatmap_image(heat, size).save(path, format="PNG")
    logger.info("Heatmap written to %s", path)
    return path


def save_overlay_png(search_rgb: np.ndarray, pixel_xy: tuple[float, float],
                     path: str | Path, gt_xy: tuple[float, float] | None = None) -> Path:
    """Search image (3 x H x W in [0, 1]) with the prediction in blue, optional gt in red."""
    path = Path(path)
    rgb = np.clip(np.round(np.transpose(search_rgb, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(rgb)
    draw = ImageDraw.Draw(img)
    radius = max(3, min(img.size) // 80)
    for xy, colour in ((gt_xy, (255, 0, 0)), (pixel_xy, (0, 0, 255))):
        if xy is None:
            continue
        x, y = xy
        draw.ellipse((x - radius, y - radius, x + radius, y + radius), outline=colour, width=2)
    img.save(path, format="PNG")
    logger.info("Overlay written to %s", path)
    return path
