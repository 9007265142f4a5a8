"""Unit tests for fusion.py: correlation, decoding, the two-branch model and heatmap export."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fpi_locate.fusion import (
    SMOOTHING_KERNEL,
    FPIModel,
    Heatmap,
    ModelConfig,
    correlate,
    correlate_grids,
    correlation_padding,
    decode,
    forward_pair,
    save_heatmap_png,
    save_overlay_png,
    smooth,
)
from fpi_locate.encoder import FeatureMap
from fpi_locate.geodata import ChannelStats
from fpi_locate.numkernel import RngState, Tensor, precision
from fpi_locate.validation import ConfigError, DimensionError

TINY = ModelConfig(patch_size=4, embed_dim=8, depth=1, heads=2, mlp_ratio=2.0,
                   query_side=16, search_side=40)


def _brute_correlation(search, query, padded):
    """Sliding dot product of query (C x K x K) over search (C x G x G)."""
    c, g, _ = search.shape
    k = query.shape[-1]
    if padded:
        top, bottom, left, right = correlation_padding(k)
        search = np.pad(search, ((0, 0), (top, bottom), (left, right)))
    n = search.shape[-1] - k + 1
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = (search[:, i:i + k, j:j + k] * query).sum()
    return out


def _signs(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape)


def _heat(values, side_px=40, search_grid=None, origin=0):
    values = np.asarray(values, dtype=np.float64)
    return Heatmap(
        grid=Tensor(values[None]),
        search_side_px=side_px,
        search_grid=search_grid or values.shape[-1],
        origin_cells=origin,
    )


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------

class TestCorrelation:
    def test_padding_split(self):
        assert correlation_padding(1) == (0, 0, 0, 0)
        assert correlation_padding(3) == (1, 1, 1, 1)
        assert correlation_padding(4) == (1, 2, 1, 2)
        assert correlation_padding(7) == (3, 3, 3, 3)

    @pytest.mark.parametrize("g,k", [(g, k) for g in range(1, 11) for k in range(1, min(g, 5) + 1)])
    @pytest.mark.parametrize("padded", [True, False])
    def test_matches_brute_force(self, g, k, padded):
        rng = np.random.default_rng(g * 10 + k)
        search = rng.standard_normal((2, 3, g, g))
        query = rng.standard_normal((2, 3, k, k))
        with precision(np.float64):
            out = correlate_grids(Tensor(search), Tensor(query), padded=padded).data
        expected_side = g if padded else g - k + 1
        assert out.shape == (2, 1, expected_side, expected_side)
        for b in range(2):
            assert np.allclose(out[b, 0], _brute_correlation(search[b], query[b], padded))

    def test_batch_samples_do_not_mix(self):
        rng = np.random.default_rng(0)
        search = rng.standard_normal((3, 2, 6, 6))
        query = rng.standard_normal((3, 2, 3, 3))
        with precision(np.float64):
            batched = correlate_grids(Tensor(search), Tensor(query)).data
            single = correlate_grids(Tensor(search[1:2]), Tensor(query[1:2])).data
        assert np.allclose(batched[1], single[0])

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_planted_query_recovered_everywhere_with_padding(self, k):
        g, c = 6, 64
        rng = np.random.default_rng(k)
        search = _signs(rng, (c, g, g))
        top, bottom, left, right = correlation_padding(k)
        padded = np.pad(search, ((0, 0), (top, bottom), (left, right)))
        with precision(np.float64):
            for r in range(g):
                for col in range(g):
                    query = padded[:, r:r + k, col:col + k]
                    out = correlate_grids(Tensor(search[None]), Tensor(query[None])).data[0, 0]
                    assert np.unravel_index(np.argmax(out), out.shape) == (r, col)

    def test_shifted_plant_shifts_argmax(self):
        g, k, c = 9, 3, 64
        rng = np.random.default_rng(5)
        search = _signs(rng, (c, g, g))
        query = _signs(rng, (c, k, k))
        search[:, 2:2 + k, 3:3 + k] = query
        shifted = np.roll(search, shift=(1, 1), axis=(1, 2))
        with precision(np.float64):
            peaks = []
            for s in (search, shifted):
                out = correlate_grids(Tensor(s[None]), Tensor(query[None])).data[0, 0]
                peaks.append(np.unravel_index(np.argmax(out), out.shape))
        assert peaks[0] == (3, 4)
        assert peaks[1] == (4, 5)

    def test_corners_unreachable_without_padding(self):
        g, k = 6, 3
        out_side = g - k + 1
        rng = np.random.default_rng(0)
        search = Tensor(_signs(rng, (1, 16, g, g)))
        query = Tensor(_signs(rng, (1, 16, k, k)))
        out = correlate_grids(search, query, padded=False)
        heat = Heatmap(grid=out.reshape(1, out_side, out_side), search_side_px=60,
                       search_grid=g, origin_cells=(k - 1) // 2, kernel_side=k)
        # first representable cell centre is one cell in from the border
        assert heat.origin_cells == 1
        assert not heat.padded
        pred = decode(heat)
        assert 10.0 + 5.0 - 1e-9 <= pred.pixel_xy[0] <= 60.0 - 15.0 + 1e-9

    def test_query_larger_than_search(self):
        with pytest.raises(DimensionError):
            correlate_grids(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 4))))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            correlate_grids(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_correlate_single_maps(self):
        rng = np.random.default_rng(1)
        s = FeatureMap(Tensor(rng.standard_normal((4, 5, 5))), patch_size=8)
        q = FeatureMap(Tensor(rng.standard_normal((4, 2, 2))), patch_size=8)
        heat = correlate(s, q)
        assert heat.grid.shape == (1, 5, 5)
        assert heat.search_side_px == 40
        assert heat.cell_px == 8.0
        assert heat.padded


# ---------------------------------------------------------------------------
# Decode
# ---------------------------------------------------------------------------

class TestDecode:
    def test_smoothing_kernel(self):
        assert SMOOTHING_KERNEL.sum() == pytest.approx(1.0)
        assert SMOOTHING_KERNEL[1, 1] == pytest.approx(0.25)

    def test_smooth_keeps_constant(self):
        assert np.allclose(smooth(np.full((6, 6), 3.0)), 3.0)

    def test_uniform_picks_first_cell_centre(self):
        pred = decode(_heat(np.zeros((5, 5)), side_px=40))
        assert pred.peak_index == (0, 0)
        assert pred.pixel_xy == pytest.approx((4.0, 4.0))

    @settings(max_examples=30, deadline=None)
    @given(r=st.integers(0, 9), c=st.integers(0, 9))
    def test_single_peak_decodes_to_cell_centre(self, r, c):
        grid = np.zeros((10, 10))
        grid[r, c] = 5.0
        pred = decode(_heat(grid, side_px=40))
        assert abs(pred.pixel_xy[0] - (c + 0.5) * 4) <= 2.0
        assert abs(pred.pixel_xy[1] - (r + 0.5) * 4) <= 2.0

    def test_planted_cell_survives_full_upsampling(self):
        grid = np.zeros((25, 25))
        grid[12, 7] = 1.0
        pred = decode(_heat(grid, side_px=400))
        row, col = pred.peak_index
        # align-corners: cell i sits at upsampled pixel i * 399 / 24
        assert abs(row - 12 * 399 / 24) <= 1.0
        assert abs(col - 7 * 399 / 24) <= 1.0
        assert pred.pixel_xy == pytest.approx((7.5 * 16, 12.5 * 16), abs=1.0)

    def test_upsampled_map_filled(self):
        heat = _heat(np.eye(5), side_px=40)
        decode(heat)
        assert heat.upsampled.shape == (40, 40)
        assert heat.upsampled[0, 0] == pytest.approx(1.0)

    def test_origin_shifts_prediction(self):
        grid = np.zeros((3, 3))
        grid[0, 0] = 1.0
        plain = decode(_heat(grid, side_px=50, search_grid=5, origin=0))
        shifted = decode(_heat(grid, side_px=50, search_grid=5, origin=1))
        assert shifted.pixel_xy[0] - plain.pixel_xy[0] == pytest.approx(10.0)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class TestModelConfig:
    def test_heatmap_side(self):
        assert TINY.heatmap_side == 10
        assert replace(TINY, padded=False).heatmap_side == 7

    def test_paper_chain(self):
        cfg = ModelConfig(patch_size=16, embed_dim=384, depth=12, heads=6,
                          query_side=112, search_side=400)
        assert cfg.query_encoder.num_tokens == 49
        assert cfg.search_encoder.num_tokens == 625
        assert cfg.heatmap_side == 25

    def test_query_larger_than_search(self):
        with pytest.raises(ConfigError):
            ModelConfig(query_side=160, search_side=64)


class TestFPIModel:
    def test_forward_pair_shapes(self):
        model = FPIModel.create(TINY, RngState(0).generator())
        rng = np.random.default_rng(0)
        heat, pred = forward_pair(rng.random((3, 16, 16)), rng.random((3, 40, 40)), model)
        assert heat.grid.shape == (1, 10, 10)
        assert heat.upsampled.shape == (40, 40)
        assert 0 <= pred.pixel_xy[0] < 40 and 0 <= pred.pixel_xy[1] < 40

    def test_forward_pair_deterministic(self):
        rng = np.random.default_rng(0)
        q, s = rng.random((3, 16, 16)), rng.random((3, 40, 40))
        a = forward_pair(q, s, FPIModel.create(TINY, RngState(3).generator()))[1]
        b = forward_pair(q, s, FPIModel.create(TINY, RngState(3).generator()))[1]
        assert a == b

    def test_unpadded_model(self):
        model = FPIModel.create(replace(TINY, padded=False), RngState(0).generator())
        rng = np.random.default_rng(0)
        heat, _ = forward_pair(rng.random((3, 16, 16)), rng.random((3, 40, 40)), model)
        assert heat.grid.shape == (1, 7, 7)
        assert heat.origin_cells == 1

    def test_scores_scaled_by_dot_length(self):
        rng = np.random.default_rng(0)
        q, s = rng.random((2, 3, 16, 16)), rng.random((2, 3, 40, 40))
        with precision(np.float64):
            model = FPIModel.create(TINY, RngState(0).generator())
            raw = correlate_grids(model.search_encoder(s).values,
                                  model.query_encoder(q).values).data
            scaled = model.heatmaps(q, s).data
            model.config = replace(TINY, scaled_scores=False)
            unscaled = model.heatmaps(q, s).data
        # C = 8 channels, K = 4 cells
        assert model.score_divisor == pytest.approx(np.sqrt(8 * 4 * 4))
        assert np.allclose(scaled * model.score_divisor, raw)
        assert np.allclose(unscaled, raw)
        assert np.argmax(scaled[0]) == np.argmax(raw[0])

    def test_size_mismatch(self):
        model = FPIModel.create(TINY, RngState(0).generator())
        with pytest.raises(DimensionError):
            forward_pair(np.zeros((3, 16, 16)), np.zeros((3, 48, 48)), model)

    def test_parameters_prefixed(self):
        model = FPIModel.create(TINY, RngState(0).generator())
        names = model.parameters()
        assert "query.pos_embed" in names and "search.pos_embed" in names
        assert model.parameter_count() == (model.query_encoder.parameter_count()
                                           + model.search_encoder.parameter_count())

    def test_shared_parameters_counted_once(self):
        model = FPIModel.create(replace(TINY, share_weights=True), RngState(0).generator())
        names = model.parameters()
        assert "search.pos_embed" in names
        assert "search.patch.weight" not in names
        assert model.parameter_count() == (model.query_encoder.parameter_count()
                                           + names["search.pos_embed"].size)

    def test_stats_applied(self):
        model = FPIModel.create(TINY, RngState(0).generator())
        rng = np.random.default_rng(0)
        q, s = rng.random((3, 16, 16)), rng.random((3, 40, 40))
        base = model.heatmap(q, s).grid.data
        model.stats = ChannelStats(mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
        assert not np.allclose(model.heatmap(q, s).grid.data, base)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

class TestExport:
    def test_heatmap_png_matches_search_size(self, tmp_path):
        heat = _heat(np.random.default_rng(0).random((10, 10)), side_px=40)
        path = save_heatmap_png(heat, tmp_path / "h.png", size=(57, 57))
        with Image.open(path) as img:
            assert img.size == (57, 57)
            assert img.mode == "L"

    def test_constant_heatmap_is_black(self, tmp_path):
        path = save_heatmap_png(_heat(np.ones((4, 4)), side_px=16), tmp_path / "h.png")
        with Image.open(path) as img:
            assert np.asarray(img).max() == 0

    def test_overlay_marks_prediction(self, tmp_path):
        search = np.zeros((3, 64, 64), dtype=np.float32)
        path = save_overlay_png(search, (32.0, 32.0), tmp_path / "o.png", gt_xy=(10.0, 10.0))
        with Image.open(path) as img:
            rgb = np.asarray(img)
        assert rgb.shape == (64, 64, 3)
        assert rgb[..., 2].max() == 255
        assert rgb[..., 0].max() == 255
