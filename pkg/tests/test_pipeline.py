"""End-to-end pipeline runs on small scenarios: counter arithmetic,
store contents, fault handling, and backfill idempotence."""

import json

import pytest

from aeropipe.metrics import Counters, availability, calibration_rate
from aeropipe.model import CalibrationFlag, Registry, format_hour, parse_hour
from aeropipe.orchestrator import TaskState
from aeropipe.pipeline import (
    DAG_ID,
    Pipeline,
    PipelineError,
    read_info,
)
from aeropipe.scenario import parse_string
from aeropipe.warehouse import Warehouse

H0 = parse_hour("2025-06-01T00")

SMALL = """\
[scenario]
name = unit-pipe
start = 2025-06-01T00
end = 2025-06-01T04
seed = 11

[fleet:airqo-like]
devices = 2
cadence = 4
noise_std = 0.5

[fleet:iqair-like]
devices = 1
cadence = 3
noise_std = 0.5
"""


def _run(text, data_dir):
    pipe = Pipeline(parse_string(text), data_dir)
    code, results = pipe.run()
    return pipe, code, results


def test_clean_run_counter_arithmetic(tmp_path):
    pipe, code, results = _run(SMALL, tmp_path)
    assert code == 0
    assert all(r.ok for r in results)
    assert len(results) == 4

    c = pipe.counters
    period = (H0, H0 + 4)
    # 2x4 + 1x3 readings per hour, nothing dropped at this noise level
    assert c.total("raw-ingested", period) == 44
    assert c.total("cleaned-kept", period) == 44
    assert c.total("aggregated", period) == 12
    assert c.total("calibrated", period) == 12
    assert c.total("published", period) == 12
    assert c.total("consumed", period) == 12
    # per hour: 11 raw + 3 averaged + 3 consolidated rows upserted
    assert c.total("upserted", period) == 68


def test_clean_run_store_contents(tmp_path):
    pipe, code, _ = _run(SMALL, tmp_path)
    assert code == 0

    wh = Warehouse(tmp_path)
    assert wh.count("raw") == 44
    assert wh.count("averaged") == 12
    consolidated = list(wh.query("consolidated"))
    assert len(consolidated) == 12
    assert all(r.calibration_flag is CalibrationFlag.CALIBRATED for r in consolidated)
    assert all(r.calibrated_pm2_5 is not None for r in consolidated)
    assert wh.count("forecast") == 0

    # one outbox file per hour, one line per consolidated row
    for h in range(H0, H0 + 4):
        lines = (tmp_path / "api-outbox" / f"{format_hour(h)}.ndjson").read_text().splitlines()
        assert len(lines) == 3
        assert json.loads(lines[0])["flag"] == "calibrated"

    sink = (tmp_path / "sinks" / "hourly-feed.ndjson").read_text().splitlines()
    assert len(sink) == 12

    info = read_info(tmp_path)
    assert info["name"] == "unit-pipe"
    assert info["fleets"] == "airqo-like:2;iqair-like:1"
    assert (tmp_path / "registry.tbl").exists()
    assert (tmp_path / "models" / "airqo-like.model").exists()
    assert (tmp_path / "models" / "iqair-like.model").exists()
    for name in ("availability.csv", "calibration.csv", "parity.csv", "counters.csv",
                 "availability.png", "parity.png"):
        assert (tmp_path / "reports" / name).exists(), name

    # run logs: one per hour, summary line says ok
    for h in range(H0, H0 + 4):
        log = tmp_path / "runs" / DAG_ID / f"{format_hour(h)}.log"
        assert json.loads(log.read_text().splitlines()[-1])["run_ok"] is True


def test_latest_view_holds_final_hour_per_device(tmp_path):
    _run(SMALL, tmp_path)
    from aeropipe.broker import Broker

    with Broker(tmp_path) as broker:
        view = broker.latest_view("latest-hourly")
    assert sorted(view) == ["airqo-like-001", "airqo-like-002", "iqair-like-001"]
    assert all(rec.hour == H0 + 3 for rec in view.values())


def test_full_weather_means_calibration_rate_exactly_100(tmp_path):
    pipe, _, _ = _run(SMALL, tmp_path)
    reg = Registry.load(tmp_path / "registry.tbl")
    stats = calibration_rate(Warehouse(tmp_path), reg, (H0, H0 + 4))
    (overall,) = [s for s in stats if s.scope == "all"]
    assert overall.rate == 100.0  # exact: numerator equals denominator


def test_weather_gap_leaves_flagged_rows_and_exact_rate(tmp_path):
    text = SMALL + "\n[weather]\ngaps = site-001@2025-06-01T01..2025-06-01T02\n"
    pipe, code, results = _run(text, tmp_path)
    assert code == 0 and all(r.ok for r in results)

    wh = Warehouse(tmp_path)
    gap_hour = list(wh.query("consolidated", hour_range=(H0 + 1, H0 + 2)))
    assert len(gap_hour) == 3
    for rec in gap_hour:
        assert rec.calibration_flag is CalibrationFlag.MISSING_WEATHER
        assert rec.calibrated_pm2_5 is None
        assert rec.temperature is not None  # device means fill the gap

    reg = Registry.load(tmp_path / "registry.tbl")
    (overall,) = [s for s in calibration_rate(wh, reg, (H0, H0 + 4)) if s.scope == "all"]
    # 3 of 4 hours calibrated for every device
    assert (overall.numerator, overall.denominator) == (9, 12)
    assert overall.rate == 75.0


def test_injected_fault_fails_run_and_skips_descendants(tmp_path):
    text = SMALL + (
        "\n[pipeline]\nmax_retries = 0\n"
        "\n[faults]\ntask = merge_weather\nhours = 2025-06-01T01..2025-06-01T02\n"
    )
    pipe, code, results = _run(text, tmp_path)
    assert code == 1
    bad = results[1]
    assert bad.hour == H0 + 1
    assert bad.states["merge_weather"] is TaskState.FAILED_FINAL
    for task in ("calibrate", "send_api", "send_broker", "send_warehouse", "update_latest"):
        assert bad.states[task] is TaskState.SKIPPED
    for task in ("extract_raw", "clean_raw", "snapshot_cleaned", "aggregate_hourly", "extract_weather"):
        assert bad.states[task] is TaskState.SUCCESS
    assert all(r.ok for r in results if r.hour != H0 + 1)

    # nothing reached the warehouse for the failed hour
    wh = Warehouse(tmp_path)
    assert wh.count("consolidated", hour_range=(H0 + 1, H0 + 2)) == 0
    assert wh.count("consolidated") == 9
    assert pipe.counters.get("calibrated", H0 + 1) == 0


def test_backfill_repairs_a_faulted_hour(tmp_path):
    faulty = SMALL + (
        "\n[pipeline]\nmax_retries = 0\n"
        "\n[faults]\ntask = merge_weather\nhours = 2025-06-01T01..2025-06-01T02\n"
    )
    _, code, _ = _run(faulty, tmp_path)
    assert code == 1

    # same deployment, fault cleared: repair just the broken hour
    repair = Pipeline(parse_string(SMALL), tmp_path)
    out = repair.backfill(H0 + 1, H0 + 2)
    (result, rows_changed) = out[0]
    assert result.ok
    assert result.kind == "backfill"
    assert rows_changed == 17  # 11 raw + 3 averaged + 3 consolidated inserts

    wh = Warehouse(tmp_path)
    assert wh.count("consolidated") == 12
    counters = Counters.load(tmp_path / "counters.tbl")
    assert counters.get("calibrated", H0 + 1) == 3


def test_backfill_of_unchanged_hours_is_idempotent(tmp_path):
    _run(SMALL, tmp_path)
    table_bytes = {
        p: p.read_bytes() for p in sorted((tmp_path / "warehouse").rglob("*.tbl"))
    }

    again = Pipeline(parse_string(SMALL), tmp_path)
    out = again.backfill(H0, H0 + 4)
    assert [changed for _, changed in out] == [0, 0, 0, 0]
    assert all(r.ok for r, _ in out)
    for h, (result, _) in zip(range(H0, H0 + 4), out):
        stats = again.upserts_by_hour[h]
        assert stats["inserted"] == 0
        assert stats["replaced"] == 17  # identical rows re-upserted in place

    after = {p: p.read_bytes() for p in sorted((tmp_path / "warehouse").rglob("*.tbl"))}
    assert after == table_bytes


def test_mismatched_data_dir_is_refused(tmp_path):
    _run(SMALL, tmp_path)
    other = parse_string(SMALL.replace("seed = 11", "seed = 12"))
    with pytest.raises(PipelineError, match="different scenario: seed"):
        Pipeline(other, tmp_path).run()


def test_open_existing_requires_models(tmp_path):
    _run(SMALL, tmp_path)
    (tmp_path / "models" / "iqair-like.model").unlink()
    with pytest.raises(PipelineError, match="missing model file"):
        Pipeline(parse_string(SMALL), tmp_path).report_only()


def test_report_only_recomputes_from_disk(tmp_path):
    _run(SMALL, tmp_path)
    for p in (tmp_path / "reports").iterdir():
        p.unlink()
    paths = Pipeline(parse_string(SMALL), tmp_path).report_only()
    assert paths["availability"].exists()
    header = paths["availability"].read_text().splitlines()[0]
    assert header == "month,scope,hours_with_data,total_hours,availability_pct"


def test_decommission_flows_into_availability(tmp_path):
    text = SMALL + "decommission = iqair-like-001@2025-06-01T02\n"
    pipe, code, _ = _run(text, tmp_path)
    assert code == 0
    reg = Registry.load(tmp_path / "registry.tbl")
    assert reg.lookup("iqair-like-001").decommissioned_at == H0 + 2
    stats = availability(Warehouse(tmp_path), reg, (H0, H0 + 4))
    dev = [s for s in stats if s.scope == "device:iqair-like-001"]
    assert (dev[0].numerator, dev[0].denominator) == (2, 2)
    wh = Warehouse(tmp_path)
    assert wh.count("consolidated", device_filter="iqair-like-001") == 2


def test_forecast_pass_writes_a_day_ahead(tmp_path):
    text = """\
[scenario]
name = unit-fc
start = 2025-06-01T00
end = 2025-06-03T02
seed = 3
store_raw = false
forecast = true

[fleet:airqo-like]
devices = 1
cadence = 2
"""
    pipe, code, _ = _run(text, tmp_path)
    assert code == 0
    wh = Warehouse(tmp_path)
    rows = list(wh.query("forecast"))
    assert len(rows) == 24
    end = parse_hour("2025-06-03T02")
    assert [r.hour for r in rows] == list(range(end, end + 24))
    assert [r.horizon for r in rows] == list(range(1, 25))
    # seasonal-naive: tomorrow repeats yesterday's observed mean
    consolidated = {r.hour: r for r in wh.query("consolidated")}
    for row in rows:
        src = consolidated[row.hour - 24]
        want = (
            src.calibrated_pm2_5
            if src.calibration_flag is CalibrationFlag.CALIBRATED
            else src.raw_pm2_5_mean
        )
        assert row.predicted_pm2_5 == want
    assert wh.count("raw") == 0  # store_raw off
