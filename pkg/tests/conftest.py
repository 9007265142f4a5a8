"""Shared fixtures: a tiny run configuration and a synthetic dataset built from it."""

import pytest

from fpi_locate.config import RunConfig, apply_document, preset_config
from fpi_locate.synth import synth_generate

TINY_DOC = {
    "seed": 3,
    "model": {"patch_size": 4, "embed_dim": 8, "depth": 1, "heads": 2, "mlp_ratio": 2.0,
              "query_side": 16, "search_side": 40},
    "optimizer": {"lr": 1e-3, "batch_size": 2, "epochs": 2, "schedule": "epoch",
                  "max_steps": 0, "lr_drop_epochs": [2]},
    "augment": {"scale_min": 30, "scale_max": 60},
    "test_scales": {"scale_min": 40, "scale_max": 90, "step": 10},
    "synth": {"source_side": 96, "query_window_px": 32, "base_cell_px": 16,
              "building_px": [4, 12], "road_width_px": 2},
}


def tiny_config(**sections) -> RunConfig:
    """The tiny configuration with optional per-section overrides."""
    cfg = apply_document(preset_config("desk"), TINY_DOC)
    return apply_document(cfg, sections) if sections else cfg


@pytest.fixture(scope="session")
def tiny() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory, tiny):
    """4 training pairs and 2 test pairs (6 scales each)."""
    root = tmp_path_factory.mktemp("synth")
    synth_generate(root, 4, seed=3, params=tiny.synth, query_side=16)
    synth_generate(root, 2, seed=3, params=tiny.synth, split="test", query_side=16,
                   search_side=40, test_scales=tiny.test_scales)
    return root
