"""Unit tests for the metrics module: SD, RD/RDS, MA@K, ring buckets and reports."""

import csv
import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from fpi_locate.metrics import (
    RING_BUCKETS,
    EvalRecord,
    ReportConfig,
    k_label,
    ma,
    make_record,
    rds,
    relative_distance,
    report,
    ring_bucket,
    spatial_distance,
    write_report,
)
from fpi_locate.validation import ConfigError, DataError


def _record(sd, scale=700, ring="0-0.2", altitude=90.0, rds_value=0.5, pair_id="p"):
    return EvalRecord(pair_id=pair_id, sd_m=sd, rd=0.1, rds=rds_value, scale_bucket=scale,
                      ring_bucket=ring, altitude_m=altitude)


# ---------------------------------------------------------------------------
# Per-sample metrics
# ---------------------------------------------------------------------------

class TestSpatialDistance:
    def test_three_four_five(self):
        assert spatial_distance((3.0, 4.0), (0.0, 0.0), 2.0) == pytest.approx(10.0)

    def test_rejects_bad_resolution(self):
        with pytest.raises(ValueError):
            spatial_distance((0, 0), (1, 1), 0.0)


class TestRDS:
    def test_exact_prediction_scores_one(self):
        assert rds((12.5, 30.0), (12.5, 30.0), 400, 400) == 1.0

    def test_reference_value(self):
        # RD = 0.1 with k = 10
        assert relative_distance((40.0, 40.0), (0.0, 0.0), 400, 400) == pytest.approx(0.1)
        assert rds((40.0, 40.0), (0.0, 0.0), 400, 400) == pytest.approx(math.exp(-1.0))

    def test_anisotropic_size(self):
        rd = relative_distance((10.0, 0.0), (0.0, 0.0), 100, 50)
        assert rd == pytest.approx(math.sqrt(0.01 / 2))

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            rds((0, 0), (1, 1), 10, 10, k=0.0)

    @settings(max_examples=100, deadline=None)
    @given(a=st.floats(0, 400), b=st.floats(0, 400))
    def test_monotone_in_distance(self, a, b):
        near, far = sorted((a, b))
        s_near = rds((near, 0.0), (0.0, 0.0), 400, 400)
        s_far = rds((far, 0.0), (0.0, 0.0), 400, 400)
        assert 0.0 < s_far <= s_near <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(
        px=st.floats(0, 400), py=st.floats(0, 400),
        gx=st.floats(0, 400), gy=st.floats(0, 400),
        factor=st.floats(0.25, 8.0),
    )
    def test_invariant_under_uniform_rescale(self, px, py, gx, gy, factor):
        base = rds((px, py), (gx, gy), 400, 400)
        scaled = rds((px * factor, py * factor), (gx * factor, gy * factor),
                     400 * factor, 400 * factor)
        assert scaled == pytest.approx(base, rel=1e-9, abs=1e-12)


class TestRingBucket:
    def test_centre(self):
        assert ring_bucket((200.0, 200.0), 400) == "0-0.2"

    def test_bands(self):
        assert ring_bucket((200.0 + 50.0, 200.0), 400) == "0.2-0.4"
        assert ring_bucket((399.0, 200.0), 400) == "0.8-1.0"

    def test_corner_beyond_inscribed_circle(self):
        assert ring_bucket((10.0, 10.0), 400) == ">1.0"

    def test_all_labels(self):
        assert len(RING_BUCKETS) == 6


class TestMakeRecord:
    def test_fields(self):
        r = make_record("p", (10.0, 0.0), (0.0, 0.0), 100, 0.5, 800, 80.0)
        assert r.sd_m == pytest.approx(5.0)
        assert r.rds == pytest.approx(math.exp(-10 * r.rd))
        assert r.scale_bucket == 800
        assert r.ring_bucket == ">1.0"
        assert set(r.row()) == {"pair_id", "scale_bucket", "altitude_m", "ring_bucket",
                                "sd_m", "rd", "rds"}


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

class TestMA:
    def test_strict_threshold(self):
        records = [_record(1.0), _record(9.0), _record(21.0)]
        assert ma(records, 10.0) == pytest.approx(2 / 3)
        assert ma(records, 9.0) == pytest.approx(1 / 3)

    def test_empty(self):
        with pytest.raises(DataError):
            ma([], 10.0)

    @settings(max_examples=100, deadline=None)
    @given(
        sds=st.lists(st.floats(0, 200), min_size=1, max_size=40),
        k1=st.floats(0, 250), k2=st.floats(0, 250),
    )
    def test_monotone_in_threshold(self, sds, k1, k2):
        records = [_record(sd) for sd in sds]
        low, high = sorted((k1, k2))
        assert ma(records, low) <= ma(records, high)

    def test_labels(self):
        assert k_label(10.0) == "10"
        assert k_label(2.5) == "2.5"


class TestReport:
    def test_groups(self):
        records = [
            _record(1.0, scale=700, altitude=80.0, rds_value=1.0),
            _record(9.0, scale=700, altitude=90.0, rds_value=0.5),
            _record(21.0, scale=800, ring=">1.0", altitude=90.0, rds_value=0.0),
        ]
        result = report(records, ReportConfig(ma_thresholds_m=(10.0,)))
        assert result.count == 3
        assert result.rds_mean == pytest.approx(0.5)
        assert result.sd_mean == pytest.approx(31.0 / 3)
        assert result.ma == {10.0: pytest.approx(2 / 3)}
        assert list(result.by_scale) == [700, 800]
        assert result.by_scale[700].count == 2
        assert list(result.by_ring) == ["0-0.2", ">1.0"]
        assert result.by_altitude[90.0].rds_mean == pytest.approx(0.25)

    def test_empty(self):
        with pytest.raises(DataError):
            report([])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ReportConfig(k=0.0)
        with pytest.raises(ConfigError):
            ReportConfig(ma_thresholds_m=())

    def test_summary_has_bars(self):
        text = report([_record(1.0, rds_value=0.5)]).summary()
        assert "Localisation" in text
        assert "█" * 10 + "░" * 10 in text
        assert "By scale" in text

    def test_write_report(self, tmp_path):
        records = [_record(1.0, pair_id="a"), _record(12.0, pair_id="b")]
        csv_path, json_path = write_report(records, report(records), tmp_path / "out")
        with csv_path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["pair_id"] for r in rows] == ["a", "b"]
        assert rows[1]["sd_m"] == "12.000000"
        summary = json.loads(json_path.read_text())
        assert summary["count"] == 2
        assert summary["ma"]["10"] == pytest.approx(0.5)
        assert summary["by_scale"]["700"]["count"] == 2
