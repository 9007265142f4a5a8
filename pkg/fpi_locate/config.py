"""Run configuration: presets, JSON documents and ``--set`` overrides.

A configuration file is one JSON object::

    {"preset": "desk", "seed": 7, "loss": {"w_neg": 15}, "model": {"padded": false}}

Values resolve with the precedence CLI override > file > preset.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from .fusion import ModelConfig
from .geodata import AugmentConfig, TestScaleConfig
from .loss import LossConfig
from .metrics import ReportConfig
from .synth import SynthParams
from .validation import ConfigError, validate_run_config

logger = logging.getLogger("fpi_locate.config")

SCHEDULES = ("epoch", "step")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 3e-4
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    epochs: int = 16
    lr_drop_epochs: tuple[int, ...] = (10, 14)
    schedule: str = "epoch"
    max_steps: int = 0                     # 0 = no cap
    lr_drop_steps: tuple[int, ...] = ()
    lr_gamma: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.batch_size < 1 or self.epochs < 1 or self.max_steps < 0:
            raise ConfigError("batch_size and epochs must be >= 1, max_steps >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.schedule == "step" and self.max_steps < 1:
            raise ConfigError("a step schedule needs max_steps >= 1")

    @property
    def milestones(self) -> tuple[int, ...]:
        return self.lr_drop_steps if self.schedule == "step" else self.lr_drop_epochs


SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "augment": AugmentConfig,
    "test_scales": TestScaleConfig,
    "synth": SynthParams,
    "report": ReportConfig,
}
TOP_LEVEL = frozenset({"preset", "seed"})


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    test_scales: TestScaleConfig = field(default_factory=TestScaleConfig)
    synth: SynthParams = field(default_factory=SynthParams)
    report: ReportConfig = field(default_factory=ReportConfig)

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {"preset": self.preset, "seed": self.seed}
        for name in SECTIONS:
            doc[name] = _jsonable(dataclasses.asdict(getattr(self, name)))
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        """Resolve *doc* on top of the preset it names (default ``desk``)."""
        preset = doc.get("preset", "desk") if isinstance(doc, dict) else "desk"
        return apply_document(preset_config(preset), doc)


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def preset_config(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(sorted(PRESETS))})")
    return PRESETS[name]


PRESETS: dict[str, RunConfig] = {
    "paper": RunConfig(
        preset="paper",
        model=ModelConfig(patch_size=16, embed_dim=384, depth=12, heads=6,
                          query_side=112, search_side=400),
        optimizer=OptimizerConfig(lr=3e-4, weight_decay=5e-4, batch_size=16, epochs=16,
                                  lr_drop_epochs=(10, 14)),
        augment=AugmentConfig(coverage_C=0.75, scale_min=512, scale_max=1000),
        test_scales=TestScaleConfig(scale_min=700, scale_max=1800, step=100, coverage=0.95),
        synth=SynthParams(source_side=1280, query_window_px=280, base_cell_px=128,
                          building_px=(24, 96), road_width_px=12),
    ),
    "desk": RunConfig(
        preset="desk",
        model=ModelConfig(),
        optimizer=OptimizerConfig(lr=1e-3, weight_decay=5e-4, batch_size=8, epochs=100,
                                  schedule="step", max_steps=300, lr_drop_steps=(200, 260)),
        augment=AugmentConfig(coverage_C=0.75, scale_min=200, scale_max=400),
        test_scales=TestScaleConfig(scale_min=240, scale_max=790, step=50, coverage=0.95),
        synth=SynthParams(),
    ),
}


# ---------------------------------------------------------------------------
# Documents and overrides
# ---------------------------------------------------------------------------

def known_fields() -> dict[str, frozenset[str]]:
    known = {name: frozenset(f.name for f in dataclasses.fields(cls)) for name, cls in SECTIONS.items()}
    known[""] = TOP_LEVEL
    return known


def _coerce(section: str, name: str, default, value):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        sample = default[0] if default else 0
        return tuple(_coerce(section, name, sample, v) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _update_section(section: str, current, values: dict):
    changes = {}
    for name, value in values.items():
        changes[name] = _coerce(section, name, getattr(current, name), value)
    try:
        return replace(current, **changes)
    except TypeError as e:
        raise ConfigError(f"invalid {section} settings: {e}") from e


def apply_document(base: RunConfig, doc: dict) -> RunConfig:
    """Overlay a (partial) configuration document on *base*."""
    problems = validate_run_config(doc, known_fields())
    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))
    cfg = base
    if "seed" in doc:
        seed = doc["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be a non-negative 64-bit integer, got {seed!r}")
        cfg = replace(cfg, seed=seed)
    if "preset" in doc:
        cfg = replace(cfg, preset=doc["preset"])
    for section in SECTIONS:
        if section in doc:
            cfg = replace(cfg, **{section: _update_section(section, getattr(cfg, section), doc[section])})
    return cfg


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.field=value``; the value is parsed as JSON, falling back to a string."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is not of the form section.field=value")
    key = key.strip()
    if key in TOP_LEVEL:
        section, name = "", key
    else:
        section, dot, name = key.partition(".")
        if not dot or not section or not name:
            raise ConfigError(f"override key {key!r} must be section.field")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, name, value


def overrides_document(overrides: Sequence[str]) -> dict:
    doc: dict[str, Any] = {}
    for text in overrides:
        section, name, value = parse_override(text)
        if section:
            doc.setdefault(section, {})[name] = value
        else:
            doc[name] = value
    return doc


def load_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    preset: str | None = None,
) -> RunConfig:
    """Preset, then the file, then the overrides."""
    file_doc: dict = {}
    if path is not None:
        path = Path(path)
        try:
            file_doc = json.loads(path.read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(file_doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    cli_doc = overrides_document(overrides)
    name = preset or cli_doc.get("preset") or file_doc.get("preset") or "desk"
    cfg = apply_document(preset_config(name), file_doc)
    cfg = apply_document(cfg, cli_doc)
    if cfg.preset != name:
        cfg = replace(cfg, preset=name)
    logger.debug("resolved configuration: %s", cfg.to_json())
    return cfg
