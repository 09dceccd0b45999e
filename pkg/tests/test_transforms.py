"""Cleaning, aggregation, and merge against hand-computed and
brute-force oracles."""

import random
from statistics import median

import pytest

from aeropipe.model import (
    CalibrationFlag,
    HourlyRecord,
    RawMeasurement,
    Registry,
    SiteMeta,
    WeatherRecord,
)
from aeropipe.transforms import CleanBounds, TransformConfig, aggregate, clean, merge

H0 = 485760
T0 = H0 * 3600.0


def _m(pm=10.0, ts=T0, device="dev-1", pm10=None, temp=None, hum=None):
    return RawMeasurement(device, ts, pm, pm10, temp, hum, "airqo-like")


# --- clean: drop rules in order ---------------------------------------------


def test_clean_keeps_valid_rows_untouched():
    rows = [_m(10.0), _m(11.0, ts=T0 + 60)]
    kept, report = clean(rows)
    assert kept == rows
    assert report.kept == 2
    assert report.dropped == 0


def test_clean_type_invalid():
    kept, report = clean(["not a measurement", _m(float("nan")), _m(10.0)])
    assert report.dropped_type_invalid == 2
    assert [m.pm2_5 for m in kept] == [10.0]


def test_clean_missing_required():
    kept, report = clean([_m(None), _m(10.0)])
    assert report.dropped_missing_required == 1
    assert len(kept) == 1


def test_clean_out_of_range():
    bad_pm = _m(-3.0)
    bad_hum = _m(10.0, hum=123.0)
    kept, report = clean([bad_pm, bad_hum, _m(10.0)])
    assert report.dropped_out_of_range == 2
    assert len(kept) == 1


def test_clean_custom_bounds():
    cfg = TransformConfig(bounds=CleanBounds(pm2_5=(5.0, 20.0)))
    kept, report = clean([_m(4.0), _m(6.0), _m(21.0)], cfg)
    assert report.dropped_out_of_range == 2
    assert [m.pm2_5 for m in kept] == [6.0]


def test_clean_rule_order_one_tally_per_row():
    # NaN pm2_5 is type-invalid, not missing and not out-of-range
    _, report = clean([_m(float("nan"))])
    assert (
        report.dropped_type_invalid,
        report.dropped_missing_required,
        report.dropped_out_of_range,
    ) == (1, 0, 0)


def test_clean_mad_hand_computed_example():
    """values 10,11,12,13,100 for one device-hour.

    median = 12, deviations = [2,1,0,1,88], MAD = 1, threshold 5*1 = 5.
    Only 100 exceeds it (|100-12| = 88 > 5).
    """
    values = [10.0, 11.0, 12.0, 13.0, 100.0]
    rows = [_m(v, ts=T0 + i) for i, v in enumerate(values)]
    kept, report = clean(rows)
    assert report.dropped_outlier == 1
    assert [m.pm2_5 for m in kept] == [10.0, 11.0, 12.0, 13.0]


def test_clean_mad_all_identical_keeps_everything():
    # MAD = 0 so the threshold is 0: |x - median| = 0 is not > 0
    rows = [_m(7.0, ts=T0 + i) for i in range(6)]
    kept, report = clean(rows)
    assert report.dropped_outlier == 0
    assert len(kept) == 6


def test_clean_mad_skips_small_groups():
    # four readings < mad_min_n=5: the obvious outlier survives
    rows = [_m(v, ts=T0 + i) for i, v in enumerate([10.0, 11.0, 12.0, 500.0])]
    kept, report = clean(rows)
    assert report.dropped_outlier == 0
    assert len(kept) == 4


def test_clean_mad_groups_are_per_device_and_hour():
    # 5 readings split across two devices: neither group reaches min_n
    rows = [_m(v, ts=T0 + i, device=f"d{i % 2}") for i, v in enumerate([10, 11, 12, 13, 900.0])]
    _, report = clean(rows)
    assert report.dropped_outlier == 0


def test_clean_conservation_property():
    rng = random.Random(42)
    for _ in range(200):
        rows = []
        for i in range(rng.randrange(0, 30)):
            choice = rng.randrange(5)
            if choice == 0:
                rows.append("garbage")
            elif choice == 1:
                rows.append(_m(None, ts=T0 + i))
            elif choice == 2:
                rows.append(_m(rng.uniform(-100, 1500), ts=T0 + i))
            else:
                rows.append(_m(rng.uniform(0, 100), ts=T0 + i, device=f"d{rng.randrange(3)}"))
        kept, report = clean(rows)
        assert report.kept + report.dropped == report.input_count == len(rows)
        assert len(kept) == report.kept


def test_clean_mad_matches_brute_force_oracle():
    """Randomized cross-check of the whole MAD stage against a direct
    reimplementation from the definition."""
    rng = random.Random(7)
    for _ in range(300):
        rows = [
            _m(
                round(rng.uniform(0, 200), 2),
                ts=T0 + rng.randrange(3) * 3600 + rng.randrange(3600),
                device=f"d{rng.randrange(3)}",
            )
            for _ in range(rng.randrange(0, 25))
        ]
        kept, _ = clean(rows)

        groups = {}
        for m in rows:
            groups.setdefault((m.device_id, int(m.ts // 3600)), []).append(m)
        expected = []
        for m in rows:
            group = groups[(m.device_id, int(m.ts // 3600))]
            if len(group) >= 5:
                med = median(x.pm2_5 for x in group)
                mad = median(abs(x.pm2_5 - med) for x in group)
                if abs(m.pm2_5 - med) > 5.0 * mad:
                    continue
            expected.append(m)
        assert kept == expected


# --- aggregate ----------------------------------------------------------------


def test_aggregate_means_hand_computed():
    rows = [
        _m(10.0, ts=T0, pm10=20.0, temp=25.0),
        _m(14.0, ts=T0 + 600, pm10=30.0),
        _m(18.0, ts=T0 + 1200, temp=27.0, hum=50.0),
    ]
    records, report = aggregate(rows, H0)
    assert report.records == 1
    (rec,) = records
    assert rec.pm2_5_mean == pytest.approx(14.0)
    assert rec.pm10_mean == pytest.approx(25.0)  # mean of the two present values
    assert rec.temperature_mean == pytest.approx(26.0)
    assert rec.humidity_mean == pytest.approx(50.0)
    assert rec.sample_count == 3


def test_aggregate_rejects_readings_outside_window():
    rows = [_m(10.0, ts=T0), _m(99.0, ts=T0 + 3600), _m(12.0, ts=T0 + 10)]
    records, report = aggregate(rows, H0)
    assert report.rejected_out_of_window == 1
    assert records[0].pm2_5_mean == pytest.approx(11.0)


def test_aggregate_min_samples_threshold():
    rows = [_m(10.0, device="lonely")] + [_m(5.0, device="ok", ts=T0 + i) for i in range(2)]
    records, report = aggregate(rows, H0, TransformConfig(min_samples=2))
    assert report.devices_below_min_samples == 1
    assert [r.device_id for r in records] == ["ok"]


def test_aggregate_empty_input():
    records, report = aggregate([], H0)
    assert records == []
    assert report.input_count == 0


def test_aggregate_output_sorted_by_device():
    rows = [_m(1.0, device="z", ts=T0 + i) for i in range(2)]
    rows += [_m(1.0, device="a", ts=T0 + i) for i in range(2)]
    records, _ = aggregate(rows, H0)
    assert [r.device_id for r in records] == ["a", "z"]


def test_aggregate_matches_independent_mean():
    rng = random.Random(3)
    for _ in range(300):
        per_device = {}
        rows = []
        for _ in range(rng.randrange(0, 40)):
            d = f"d{rng.randrange(4)}"
            v = round(rng.uniform(0, 150), 3)
            rows.append(_m(v, ts=T0 + rng.randrange(3600), device=d))
            per_device.setdefault(d, []).append(v)
        records, _ = aggregate(rows, H0, TransformConfig(min_samples=1))
        expected = {d: sum(vs) / len(vs) for d, vs in per_device.items()}
        assert {r.device_id: r.pm2_5_mean for r in records} == pytest.approx(expected)
        assert {r.device_id: r.sample_count for r in records} == {
            d: len(vs) for d, vs in per_device.items()
        }


# --- merge -------------------------------------------------------------------


def _registry():
    reg = Registry()
    reg.register_site(SiteMeta("site-001", "S1", 0.3, 32.5, "Kampala"))
    reg.register_site(SiteMeta("site-002", "S2", 0.4, 32.6, "Kampala"))
    reg.register_device("dev-1", "site-001", "airqo-like")
    reg.register_device("dev-2", "site-002", "airqo-like")
    return reg


def _hr(device, hour=H0, pm=10.0, temp=25.0, hum=60.0):
    return HourlyRecord(device, hour, pm, None, temp, hum, 3)


def test_merge_weather_hit_overrides_device_readings():
    reg = _registry()
    weather = [WeatherRecord("site-001", H0, 19.5, 72.0)]
    out, report = merge([_hr("dev-1")], weather, reg)
    assert report.merged == 1
    (rec,) = out
    assert rec.temperature == 19.5
    assert rec.humidity == 72.0
    assert rec.site_id == "site-001"
    assert rec.calibration_flag is CalibrationFlag.MODEL_UNAVAILABLE
    assert rec.calibrated_pm2_5 is None


def test_merge_miss_keeps_device_values_and_flags():
    reg = _registry()
    out, report = merge([_hr("dev-1", temp=25.0, hum=60.0)], [], reg)
    assert report.missing_weather == 1
    (rec,) = out
    assert rec.temperature == 25.0
    assert rec.humidity == 60.0
    assert rec.calibration_flag is CalibrationFlag.MISSING_WEATHER


def test_merge_join_is_on_site_and_hour():
    reg = _registry()
    weather = [
        WeatherRecord("site-001", H0, 1.0, 10.0),
        WeatherRecord("site-002", H0, 2.0, 20.0),
        WeatherRecord("site-001", H0 + 1, 3.0, 30.0),
    ]
    hourly = [_hr("dev-1", H0), _hr("dev-2", H0), _hr("dev-1", H0 + 1), _hr("dev-2", H0 + 1)]
    out, report = merge(hourly, weather, reg)
    got = {(r.device_id, r.hour): r.temperature for r in out}
    assert got[("dev-1", H0)] == 1.0
    assert got[("dev-2", H0)] == 2.0
    assert got[("dev-1", H0 + 1)] == 3.0
    assert out[3].calibration_flag is CalibrationFlag.MISSING_WEATHER  # no site-002 weather at H0+1
    assert report.merged == 3
    assert report.missing_weather == 1


def test_merge_unregistered_device_rejected():
    reg = _registry()
    out, report = merge([_hr("ghost"), _hr("dev-1")], [], reg)
    assert report.rejected_unregistered == 1
    assert report.rejected_devices == ["ghost"]
    assert len(out) == 1


def test_merge_matches_nested_loop_oracle():
    """Randomized join vs the quadratic definition."""
    rng = random.Random(11)
    reg = Registry()
    sites = [f"site-{i:03d}" for i in range(1, 5)]
    for i, s in enumerate(sites):
        reg.register_site(SiteMeta(s, s, 0.3 + i * 0.01, 32.5, "Kampala"))
    devices = {}
    for i in range(8):
        d = f"dev-{i}"
        devices[d] = sites[rng.randrange(len(sites))]
        reg.register_device(d, devices[d], "airqo-like")

    for _ in range(200):
        hourly = [
            _hr(f"dev-{rng.randrange(8)}", H0 + rng.randrange(4))
            for _ in range(rng.randrange(0, 20))
        ]
        weather = [
            WeatherRecord(sites[rng.randrange(len(sites))], H0 + rng.randrange(4),
                          round(rng.uniform(10, 35), 2), round(rng.uniform(20, 95), 2))
            for _ in range(rng.randrange(0, 10))
        ]
        # later duplicates win in the implementation's dict; dedupe the same way
        wmap = {}
        for w in weather:
            wmap[(w.site_id, w.hour)] = w

        out, _ = merge(hourly, weather, reg)
        assert len(out) == len(hourly)
        for rec, src in zip(out, hourly):
            expected_site = devices[src.device_id]
            hits = [w for (s, h), w in wmap.items() if s == expected_site and h == src.hour]
            assert rec.site_id == expected_site
            if hits:
                assert rec.temperature == hits[0].temperature
                assert rec.calibration_flag is CalibrationFlag.MODEL_UNAVAILABLE
            else:
                assert rec.temperature == src.temperature_mean
                assert rec.calibration_flag is CalibrationFlag.MISSING_WEATHER
