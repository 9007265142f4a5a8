"""ViT-style image encoder producing a spatial token grid.

Pipeline: patch embedding (conv, kernel = stride = patch size), learnable
position embedding, ``depth`` pre-norm transformer blocks, inverse flatten
back to a channels x grid x grid map.  There is no class token; every token
maps to one grid cell.
"""

import logging
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor
from .validation import ConfigError, DimensionError

logger = logging.getLogger("fpi_locate.encoder")


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    input_side: int = 64
    in_channels: int = 3

    def __post_init__(self):
        for name in ("patch_size", "embed_dim", "heads", "input_side", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.input_side % self.patch_size:
            raise ConfigError(
                f"input_side {self.input_side} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be > 0, got {self.mlp_ratio}")

    @property
    def grid_side(self) -> int:
        return self.input_side // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


# DeiT-S on a 112 px query
PAPER_ENCODER = EncoderConfig(
    patch_size=16, embed_dim=384, depth=12, heads=6, mlp_ratio=4.0, input_side=112,
)
DESK_ENCODER = EncoderConfig(
    patch_size=8, embed_dim=64, depth=4, heads=4, mlp_ratio=4.0, input_side=64,
)


@dataclass
class FeatureMap:
    """Token grid after inverse flatten: values are C x gh x gw (or B x C x gh x gw)."""

    values: Tensor
    patch_size: int = 1

    @property
    def batched(self) -> bool:
        return self.values.ndim == 4

    @property
    def channels(self) -> int:
        return self.values.shape[-3]

    @property
    def grid_h(self) -> int:
        return self.values.shape[-2]

    @property
    def grid_w(self) -> int:
        return self.values.shape[-1]

    @property
    def side_px(self) -> int:
        return self.grid_h * self.patch_size


EncoderWeights = dict[str, Tensor]


def init_weights(config: EncoderConfig, rng: np.random.Generator) -> EncoderWeights:
    """Truncated-normal (0.02) projections and position table, zero biases, unit norms."""
    d, p, hid = config.embed_dim, config.patch_size, config.hidden_dim

    def param(values) -> Tensor:
        return Tensor(values, requires_grad=True)

    w: EncoderWeights = {
        "patch.weight": param(nk.trunc_normal(rng, (d, config.in_channels, p, p))),
        "patch.bias": param(np.zeros(d)),
        "pos_embed": param(nk.trunc_normal(rng, (config.num_tokens, d))),
    }
    for i in range(config.depth):
        b = f"blocks.{i}."
        w[b + "norm1.weight"] = param(np.ones(d))
        w[b + "norm1.bias"] = param(np.zeros(d))
        for proj in ("q", "k", "v", "proj"):
            w[b + f"attn.{proj}.weight"] = param(nk.trunc_normal(rng, (d, d)))
            w[b + f"attn.{proj}.bias"] = param(np.zeros(d))
        w[b + "norm2.weight"] = param(np.ones(d))
        w[b + "norm2.bias"] = param(np.zeros(d))
        w[b + "mlp.fc1.weight"] = param(nk.trunc_normal(rng, (d, hid)))
        w[b + "mlp.fc1.bias"] = param(np.zeros(hid))
        w[b + "mlp.fc2.weight"] = param(nk.trunc_normal(rng, (hid, d)))
        w[b + "mlp.fc2.bias"] = param(np.zeros(d))
    return w


def _linear(x: Tensor, w: Mapping[str, Tensor], name: str) -> Tensor:
    return x @ w[name + ".weight"] + w[name + ".bias"]


def _attention(x: Tensor, w: Mapping[str, Tensor], prefix: str, config: EncoderConfig) -> Tensor:
    b, n, d = x.shape
    h, hd = config.heads, config.head_dim

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, n, h, hd).permute(0, 2, 1, 3)

    q = heads(_linear(x, w, prefix + "q"))
    k = heads(_linear(x, w, prefix + "k"))
    v = heads(_linear(x, w, prefix + "v"))
    scores = nk.scale(q @ k.permute(0, 1, 3, 2), hd ** -0.5)
    out = nk.softmax(scores, axis=-1) @ v
    out = out.permute(0, 2, 1, 3).reshape(b, n, d)
    return _linear(out, w, prefix + "proj")


def _block(x: Tensor, w: Mapping[str, Tensor], i: int, config: EncoderConfig) -> Tensor:
    b = f"blocks.{i}."
    y = nk.layernorm(x, w[b + "norm1.weight"], w[b + "norm1.bias"])
    x = x + _attention(y, w, b + "attn.", config)
    y = nk.layernorm(x, w[b + "norm2.weight"], w[b + "norm2.bias"])
    y = nk.gelu(_linear(y, w, b + "mlp.fc1"))
    return x + _linear(y, w, b + "mlp.fc2")


def flatten_tokens(grid: Tensor) -> Tensor:
    """B x C x gh x gw -> B x (gh*gw) x C."""
    b, c, gh, gw = grid.shape
    return grid.reshape(b, c, gh * gw).permute(0, 2, 1)


def inverse_flatten(tokens: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """B x (gh*gw) x C -> B x C x gh x gw."""
    b, n, c = tokens.shape
    if n != grid_h * grid_w:
        raise DimensionError(f"{n} tokens cannot fill a {grid_h}x{grid_w} grid")
    return tokens.permute(0, 2, 1).reshape(b, c, grid_h, grid_w)


def encode(image, config: EncoderConfig, weights: Mapping[str, Tensor]) -> FeatureMap:
    """Encode a 3 x S x S (or B x 3 x S x S) image into a (S/p) x (S/p) feature grid."""
    x = nk.as_tensor(image)
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise DimensionError(f"expected {config.in_channels} x S x S image(s), got {x.shape}")
    side_h, side_w = x.shape[-2:]
    if side_h % config.patch_size or side_w % config.patch_size:
        raise DimensionError(
            f"image side {side_h}x{side_w} is not divisible by patch size {config.patch_size}"
        )
    if side_h != config.input_side or side_w != config.input_side:
        raise DimensionError(
            f"image side {side_h}x{side_w} does not match the configured {config.input_side}"
        )

    g = config.grid_side
    patches = nk.conv2d(
        x, weights["patch.weight"], weights["patch.bias"], stride=config.patch_size,
    )
    tokens = flatten_tokens(patches) + weights["pos_embed"]
    for i in range(config.depth):
        tokens = _block(tokens, weights, i, config)

    grid = inverse_flatten(tokens, g, g)
    if unbatched:
        grid = grid.reshape(config.embed_dim, g, g)
    return FeatureMap(values=grid, patch_size=config.patch_size)


class Encoder:
    """An encoder configuration bound to its weights."""

    def __init__(self, config: EncoderConfig, weights: EncoderWeights):
        self.config = config
        self.weights = weights

    def __call__(self, image) -> FeatureMap:
        return encode(image, self.config, self.weights)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.weights.values())

    def embed(self, image) -> np.ndarray:
        """Mean-pooled token embedding, L2-normalised (retrieval descriptor)."""
        fmap = self(image)
        v = fmap.values.data
        pooled = v.reshape(*v.shape[:-2], -1).mean(axis=-1).astype(np.float64)
        norm = np.linalg.norm(pooled, axis=-1, keepdims=True)
        return pooled / np.maximum(norm, 1e-12)


def make_twin(
    config: EncoderConfig,
    share: bool = False,
    *,
    search_side: int,
    rng: np.random.Generator,
) -> tuple[Encoder, Encoder]:
    """Build the query and search encoders.

    *config* describes the query encoder; the search encoder differs only in
    ``input_side``.  With ``share=False`` the two encoders own independent
    weights.  With ``share=True`` every tensor is shared except the two
    position tables, whose lengths follow each input's token count.
    """
    search_config = replace(config, input_side=search_side)
    query_weights = init_weights(config, rng)
    if share:
        search_weights = dict(query_weights)
        search_weights["pos_embed"] = Tensor(
            nk.trunc_normal(rng, (search_config.num_tokens, config.embed_dim)),
            requires_grad=True,
        )
    else:
        search_weights = init_weights(search_config, rng)
    logger.debug(
        "twin encoders: query %d tokens, search %d tokens, shared=%s",
        config.num_tokens, search_config.num_tokens, share,
    )
    return Encoder(config, query_weights), Encoder(search_config, search_weights)
