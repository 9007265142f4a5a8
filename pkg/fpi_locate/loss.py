"""Balance loss: weighted binary cross-entropy over the heatmap grid.

Positive cells form an R x R block around the ground truth.  Positive and
negative cells get per-class weights ``1 / N_pos`` and ``w_neg / N_neg``,
which are then normalised to sum to 1, so the total negative mass is
``w_neg`` times the positive mass.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor
from .validation import ConfigError, DimensionError, LabelError

logger = logging.getLogger("fpi_locate.loss")

LOG_EPS = 1e-12
LOG_FLOOR = math.log(LOG_EPS)


@dataclass(frozen=True)
class LossConfig:
    w_neg: float = 15.0
    R: int = 1
    literal_npos: bool = True   # N_pos = R*R even when the block is clipped

    def __post_init__(self):
        if not math.isfinite(self.w_neg) or self.w_neg < 0:
            raise ConfigError(f"w_neg must be >= 0, got {self.w_neg}")
        if self.R < 1:
            raise ConfigError(f"R must be >= 1, got {self.R}")


@dataclass
class LabelGrid:
    t: np.ndarray                 # H x W of {0, 1}
    gt_grid_rc: tuple[int, int]   # cell nearest the ground truth, heatmap coordinates
    R: int

    @property
    def positives(self) -> int:
        return int(self.t.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.t.shape


def _block_start(v: float, R: int) -> int:
    """First cell of an R-long run around continuous cell coordinate *v*."""
    if R % 2:
        return math.floor(v) - (R - 1) // 2
    # even: the run straddles the nearest cell corner
    return math.floor(v - 0.5) - (R // 2 - 1)


def build_label(
    gt_pixel_xy: Sequence[float],
    search_side_px: int,
    grid: int,
    R: int = 1,
    *,
    origin: int = 0,
    heat_side: int | None = None,
) -> LabelGrid:
    """Binary label for a heatmap over a ``grid`` x ``grid`` search feature map.

    Cell ``i`` covers pixels ``[i * S/grid, (i + 1) * S/grid)``.  For an
    unpadded heatmap (``heat_side`` < ``grid``, first cell at ``origin``) the
    ground truth is clamped to the representable cells before labelling.
    """
    x, y = float(gt_pixel_xy[0]), float(gt_pixel_xy[1])
    if not (0 <= x < search_side_px and 0 <= y < search_side_px):
        raise LabelError(f"ground truth {(x, y)} outside the {search_side_px} px search map")
    if R < 1:
        raise LabelError(f"R must be >= 1, got {R}")
    side = grid if heat_side is None else heat_side
    if side < 1 or origin < 0 or origin + side > grid:
        raise DimensionError(f"heatmap of {side} cells at origin {origin} does not fit grid {grid}")

    cell = grid / search_side_px
    # continuous cell coordinates relative to the heatmap, clamped inside it
    vx = min(max(x * cell - origin, 0.0), np.nextafter(side, 0))
    vy = min(max(y * cell - origin, 0.0), np.nextafter(side, 0))

    t = np.zeros((side, side), dtype=np.int8)
    r0, c0 = _block_start(vy, R), _block_start(vx, R)
    t[max(r0, 0):max(r0 + R, 0), max(c0, 0):max(c0 + R, 0)] = 1
    return LabelGrid(t=t, gt_grid_rc=(math.floor(vy), math.floor(vx)), R=R)


def label_weights(label: LabelGrid, w_neg: float, literal_npos: bool = True) -> np.ndarray:
    """Per-cell weights, normalised to sum to 1."""
    t = label.t.astype(np.float64)
    total = t.size
    actual = int(t.sum())
    if actual == 0:
        raise LabelError("label has no positive cell")
    if actual == total:
        raise LabelError("label has no negative cell")
    n_pos = label.R * label.R if literal_npos else actual
    n_neg = total - n_pos
    if n_neg <= 0:
        raise LabelError(f"R={label.R} leaves no negative cells on a {label.shape} grid")

    weights = t * (1.0 / n_pos) + (1.0 - t) * (w_neg / n_neg)
    mass = weights.sum()
    if mass <= 0:
        raise LabelError("label weights sum to zero")
    return weights / mass


def balance_loss(
    heat: Tensor,
    label: LabelGrid,
    w_neg: float = 15.0,
    literal_npos: bool = True,
) -> Tensor:
    """Weighted BCE between sigmoid(heat) and the label; returns a scalar Tensor."""
    h, w = label.shape
    if heat.shape[-2:] != (h, w) or heat.size != h * w:
        raise DimensionError(f"heatmap {heat.shape} does not match label {label.shape}")
    x = heat.reshape(h, w)
    weights = label_weights(label, w_neg, literal_npos)
    t = label.t.astype(np.float64)
    pos_w = Tensor(t * weights)
    neg_w = Tensor((1.0 - t) * weights)

    log_p = nk.log_sigmoid(x, LOG_FLOOR)
    log_q = nk.log_sigmoid(-x, LOG_FLOOR)   # log(1 - p)
    return -((log_p * pos_w).sum() + (log_q * neg_w).sum())


def batch_loss(heats: Tensor, labels: Sequence[LabelGrid], config: LossConfig) -> Tensor:
    """Mean balance loss over a B x 1 x H x W batch."""
    b = heats.shape[0]
    if len(labels) != b:
        raise DimensionError(f"{len(labels)} labels for a batch of {b} heatmaps")
    total = None
    for i, label in enumerate(labels):
        term = balance_loss(heats[i], label, config.w_neg, config.literal_npos)
        total = term if total is None else total + term
    return total / b
