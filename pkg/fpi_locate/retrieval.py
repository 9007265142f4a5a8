"""Tile-gallery image retrieval, the pipeline FPI is compared against.

The search map is cut into a 5 x 5 grid of non-overlapping tiles.  Every
tile is resized to the query side and embedded with the query encoder
(mean-pooled tokens, L2-normalised); the prediction is the centre of the
tile with the highest cosine similarity to the query.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .common import parallel_map
from .encoder import Encoder
from .fusion import Prediction
from .geodata import ChannelStats, resize_image
from .validation import DataError, DimensionError

logger = logging.getLogger("fpi_locate.retrieval")

TILES_PER_SIDE = 5


@dataclass
class Gallery:
    tile_embeddings: list[tuple[int, np.ndarray]]
    tile_centers_px: list[tuple[float, float]]
    tile_side_px: float

    def __len__(self) -> int:
        return len(self.tile_embeddings)

    def matrix(self) -> np.ndarray:
        return np.stack([v for _, v in self.tile_embeddings])


def tile(search_img: np.ndarray, n: int = TILES_PER_SIDE) -> tuple[list[np.ndarray], list[tuple[float, float]]]:
    """Cut a square image into n x n tiles, row-major.  Centres are in input pixels."""
    side = search_img.shape[-1]
    if search_img.shape[-2] != side:
        raise DimensionError(f"search map must be square, got {search_img.shape}")
    img = search_img
    if side % n:
        fitted = (side // n) * n
        logger.warning("search side %d is not divisible by %d; resizing to %d", side, n, fitted)
        img = resize_image(search_img, fitted)
    t = img.shape[-1] // n
    tiles = [img[:, i * t:(i + 1) * t, j * t:(j + 1) * t] for i in range(n) for j in range(n)]
    centers = [((j + 0.5) * side / n, (i + 0.5) * side / n) for i in range(n) for j in range(n)]
    return tiles, centers


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def embed(image: np.ndarray, encoder: Encoder, stats: ChannelStats) -> np.ndarray:
    fitted = resize_image(image, encoder.config.input_side)
    return encoder.embed(stats.apply(fitted))


def build_gallery(
    search_img: np.ndarray,
    encoder: Encoder,
    stats: ChannelStats | None = None,
    workers: int | None = None,
) -> Gallery:
    stats = stats or ChannelStats.identity()
    tiles, centers = tile(search_img)
    vectors = parallel_map(lambda t: embed(t, encoder, stats), tiles, workers)
    return Gallery(
        tile_embeddings=list(enumerate(vectors)),
        tile_centers_px=centers,
        tile_side_px=search_img.shape[-1] / TILES_PER_SIDE,
    )


def retrieve(
    query_img: np.ndarray,
    gallery: Gallery,
    encoder: Encoder,
    stats: ChannelStats | None = None,
) -> Prediction:
    """Centre of the most similar tile; the lowest tile index wins ties."""
    if not len(gallery):
        raise DataError("empty gallery")
    q = embed(query_img, encoder, stats or ChannelStats.identity())
    sims = np.array([cosine_similarity(v, q) for _, v in gallery.tile_embeddings])
    best = int(np.argmax(sims))
    index, _ = gallery.tile_embeddings[best]
    logger.debug("retrieval picked tile %d (cosine %.4f)", index, sims[best])
    return Prediction(
        pixel_xy=gallery.tile_centers_px[best],
        score=float(sims[best]),
        peak_index=divmod(index, TILES_PER_SIDE),
    )


def quantization_floor(gt_px: Sequence[float], centers: Sequence[tuple[float, float]]) -> float:
    """Smallest possible retrieval error: distance from gt to the nearest tile centre."""
    return min(math.hypot(gt_px[0] - x, gt_px[1] - y) for x, y in centers)
