"""Unit tests for the validation module: error types, metadata and config documents."""

import pytest

from fpi_locate.validation import (
    ConfigError,
    DataError,
    FPIError,
    NumericError,
    validate_meta,
    validate_run_config,
)


def _meta(**changes):
    meta = {
        "lat": 30.27,
        "lon": 120.12,
        "altitude_m": 90.0,
        "gt_pixel_xy": [12.5, 30.0],
        "meters_per_pixel": 0.45,
        "scale_bucket": 700,
        "source": "synthetic",
    }
    meta.update(changes)
    return meta


class TestErrors:
    def test_exit_codes(self):
        assert ConfigError.exit_code == 1
        assert DataError.exit_code == 2
        assert NumericError.exit_code == 3

    def test_hierarchy(self):
        assert issubclass(ConfigError, ValueError)
        for cls in (ConfigError, DataError, NumericError):
            assert issubclass(cls, FPIError)


class TestValidateMeta:
    def test_valid(self):
        assert validate_meta(_meta()) == []
        assert validate_meta(_meta(), image_size=(40, 40)) == []

    def test_not_an_object(self):
        assert validate_meta([1, 2]) == ["metadata is not a JSON object"]

    def test_missing_keys(self):
        meta = _meta()
        del meta["lat"], meta["source"]
        problems = validate_meta(meta)
        assert any("missing keys: lat, source" in p for p in problems)

    @pytest.mark.parametrize("key,value,fragment", [
        ("lat", 95.0, "lat out of range"),
        ("lon", -181.0, "lon out of range"),
        ("lat", "north", "lat out of range"),
        ("meters_per_pixel", 0.0, "meters_per_pixel"),
        ("meters_per_pixel", float("nan"), "meters_per_pixel"),
        ("scale_bucket", 0, "scale_bucket"),
        ("scale_bucket", True, "scale_bucket"),
        ("scale_bucket", 700.0, "scale_bucket"),
        ("source", "google", "unknown source"),
        ("altitude_m", None, "altitude_m"),
        ("gt_pixel_xy", [1.0], "gt_pixel_xy"),
    ])
    def test_field_problems(self, key, value, fragment):
        problems = validate_meta(_meta(**{key: value}))
        assert any(fragment in p for p in problems), problems

    def test_gt_outside_image(self):
        problems = validate_meta(_meta(gt_pixel_xy=[40.0, 3.0]), image_size=(40, 40))
        assert any("outside image of size 40x40" in p for p in problems)

    def test_searches_inherit_and_override(self):
        meta = _meta(searches={
            "700": {"gt_pixel_xy": [5.0, 5.0], "meters_per_pixel": 0.45},
            "800": {"gt_pixel_xy": [5.0, 5.0], "meters_per_pixel": -1.0},
        })
        problems = validate_meta(meta)
        assert len(problems) == 1
        assert problems[0].startswith("search 800:")

    def test_bad_searches(self):
        assert "searches must be a non-empty object" in validate_meta(_meta(searches={}))
        problems = validate_meta(_meta(searches={"big": {}}))
        assert any("not an integer" in p for p in problems)


class TestValidateRunConfig:
    KNOWN = {"": frozenset({"seed"}), "loss": frozenset({"w_neg", "R"})}

    def test_valid(self):
        assert validate_run_config({"seed": 1, "loss": {"w_neg": 3}}, self.KNOWN) == []

    def test_unknown_section(self):
        assert validate_run_config({"opt": {}}, self.KNOWN) == ["unknown section 'opt'"]

    def test_unknown_fields_sorted(self):
        problems = validate_run_config({"loss": {"b": 1, "a": 2, "R": 1}}, self.KNOWN)
        assert problems == ["unknown field(s) in 'loss': a, b"]

    def test_section_not_object(self):
        assert validate_run_config({"loss": 3}, self.KNOWN) == ["section 'loss' must be an object"]

    def test_not_an_object(self):
        assert validate_run_config("x", self.KNOWN) == ["configuration is not a JSON object"]
