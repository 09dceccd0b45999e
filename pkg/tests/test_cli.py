"""Operator CLI: exit codes, output shapes, and the env fallback."""

import pytest
from click.testing import CliRunner

from aeropipe.cli import main
from aeropipe.model import parse_hour

H0 = parse_hour("2025-06-01T00")

CONFIG = """\
[scenario]
name = unit-cli
start = 2025-06-01T00
end = 2025-06-01T02
seed = 11

[fleet:airqo-like]
devices = 2
cadence = 4
noise_std = 0.5
"""


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "unit.cfg"
    p.write_text(CONFIG, encoding="utf-8")
    return p


@pytest.fixture
def ran(runner, cfg, tmp_path):
    """A completed two-hour run in tmp_path/data."""
    data = tmp_path / "data"
    result = runner.invoke(main, ["run", "--config", str(cfg), "--data-dir", str(data)])
    assert result.exit_code == 0, result.stderr
    return data


def test_validate_ok(runner, cfg):
    result = runner.invoke(main, ["validate", "--config", str(cfg)])
    assert result.exit_code == 0
    assert result.stdout.strip() == "ok: scenario 'unit-cli', 2 hours, 2 devices, 1 fleets, seed 11"


def test_validate_names_offending_field(runner, tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text(CONFIG.replace("seed = 11", "seed = nope"), encoding="utf-8")
    result = runner.invoke(main, ["validate", "--config", str(p)])
    assert result.exit_code == 2
    assert "invalid: [scenario] seed: not an integer" in result.stderr


def test_validate_missing_config(runner, tmp_path):
    result = runner.invoke(main, ["validate", "--config", str(tmp_path / "absent.cfg")])
    assert result.exit_code == 2
    assert "no such config" in result.stderr


def test_run_writes_reports_and_logs_progress(runner, cfg, tmp_path):
    data = tmp_path / "data"
    result = runner.invoke(main, ["run", "--config", str(cfg), "--data-dir", str(data)])
    assert result.exit_code == 0
    assert "[INFO]" in result.stderr
    assert "2/2 hourly runs ok" in result.stderr
    assert (data / "reports" / "availability.csv").exists()
    assert (data / "reports" / "availability.png").exists()


def test_run_quiet_suppresses_progress(runner, cfg, tmp_path):
    result = runner.invoke(
        main, ["run", "--config", str(cfg), "--data-dir", str(tmp_path / "d"), "--quiet"]
    )
    assert result.exit_code == 0
    assert "[INFO]" not in result.stderr


def test_run_rejects_bad_scale(runner, cfg, tmp_path):
    result = runner.invoke(
        main,
        ["run", "--config", str(cfg), "--data-dir", str(tmp_path / "d"), "--scale", "-2"],
    )
    assert result.exit_code == 2
    assert "--scale must be positive" in result.stderr


def test_run_exit_1_on_failed_hours(runner, tmp_path):
    p = tmp_path / "faulty.cfg"
    p.write_text(
        CONFIG
        + "\n[pipeline]\nmax_retries = 0\n"
        + "\n[faults]\ntask = calibrate\nhours = 2025-06-01T00..2025-06-01T01\n",
        encoding="utf-8",
    )
    result = runner.invoke(main, ["run", "--config", str(p), "--data-dir", str(tmp_path / "d")])
    assert result.exit_code == 1
    assert "failed" in result.stderr


def test_report_table_mode(runner, ran):
    result = runner.invoke(main, ["report", "--data-dir", str(ran)])
    assert result.exit_code == 0, result.stderr
    out = result.stdout
    assert "availability" in out
    assert "hours_with_data" in out and "total_hours" in out
    assert "hours_with_calibrated" in out and "hours_with_raw" in out
    assert "raw/calibrated parity" in out
    assert "stage counters" in out
    assert "network:airqo-like" in out


def test_report_csv_mode(runner, ran):
    result = runner.invoke(main, ["report", "--data-dir", str(ran), "--format", "csv"])
    assert result.exit_code == 0
    assert "month,scope,hours_with_data,total_hours,availability_pct" in result.stdout
    assert "month,raw_points,calibrated_points" in result.stdout
    assert "stage,month,records" in result.stdout


def test_report_without_state_fails_cleanly(runner, tmp_path):
    result = runner.invoke(main, ["report", "--data-dir", str(tmp_path / "empty")])
    assert result.exit_code == 1
    assert "scenario.info" in result.stderr


def test_report_config_mismatch(runner, ran, tmp_path):
    p = tmp_path / "other.cfg"
    p.write_text(CONFIG.replace("seed = 11", "seed = 99"), encoding="utf-8")
    result = runner.invoke(main, ["report", "--data-dir", str(ran), "--config", str(p)])
    assert result.exit_code == 1
    assert "different scenario" in result.stderr


def test_report_run_tree(runner, ran):
    result = runner.invoke(main, ["report", "--data-dir", str(ran), "--run-tree", "2025-06-01T01"])
    assert result.exit_code == 0, result.stderr
    out = result.stdout
    assert "hourly-ingest @ 2025-06-01T01 [scheduled]" in out
    for task in ("extract_raw", "clean_raw", "aggregate_hourly", "calibrate", "send_warehouse"):
        assert task in out
    assert "[success]" in out


def test_export_full_and_ranged(runner, ran, tmp_path):
    out = tmp_path / "averaged.csv"
    result = runner.invoke(
        main, ["export", "--data-dir", str(ran), "--dataset", "averaged", "--out", str(out)]
    )
    assert result.exit_code == 0
    assert result.stdout.strip() == f"exported 4 rows to {out}"
    lines = out.read_text().splitlines()
    assert len(lines) == 5  # header + 2 devices x 2 hours

    ranged = tmp_path / "averaged-1h.csv"
    result = runner.invoke(
        main,
        [
            "export", "--data-dir", str(ran), "--dataset", "averaged", "--out", str(ranged),
            "--from", "2025-06-01T01", "--to", "2025-06-01T02",
        ],
    )
    assert result.exit_code == 0
    assert "exported 2 rows" in result.stdout


def test_export_rejects_unknown_dataset(runner, ran, tmp_path):
    result = runner.invoke(
        main,
        ["export", "--data-dir", str(ran), "--dataset", "bogus", "--out", str(tmp_path / "x.csv")],
    )
    assert result.exit_code == 2
    assert "bogus" in result.stderr


def test_export_range_flags_must_pair(runner, ran, tmp_path):
    base = ["export", "--data-dir", str(ran), "--dataset", "averaged", "--out", str(tmp_path / "x.csv")]
    result = runner.invoke(main, base + ["--from", "2025-06-01T00"])
    assert result.exit_code == 2
    assert "together" in result.stderr
    result = runner.invoke(main, base + ["--from", "2025-06-01T02", "--to", "2025-06-01T00"])
    assert result.exit_code == 2
    assert "malformed range" in result.stderr


def test_export_bad_hour_text(runner, ran, tmp_path):
    result = runner.invoke(
        main,
        [
            "export", "--data-dir", str(ran), "--dataset", "averaged",
            "--out", str(tmp_path / "x.csv"), "--from", "garbage", "--to", "2025-06-01T02",
        ],
    )
    assert result.exit_code == 2


def test_data_dir_env_fallback(runner, ran, tmp_path):
    out = tmp_path / "env.csv"
    result = runner.invoke(
        main,
        ["export", "--dataset", "consolidated", "--out", str(out)],
        env={"AEROPIPE_DATA_DIR": str(ran)},
    )
    assert result.exit_code == 0, result.stderr
    assert "exported 4 rows" in result.stdout


def test_backfill_idempotent_rerun(runner, cfg, ran):
    result = runner.invoke(
        main,
        [
            "backfill", "--config", str(cfg), "--data-dir", str(ran),
            "--from", "2025-06-01T00", "--to", "2025-06-01T02",
        ],
    )
    assert result.exit_code == 0, result.stderr
    lines = result.stdout.splitlines()
    # 8 raw + 2 averaged + 2 consolidated rows per hour, all identical
    assert lines[0] == "2025-06-01T00 ok rows_changed=0 inserted=0 replaced=12"
    assert lines[1] == "2025-06-01T01 ok rows_changed=0 inserted=0 replaced=12"
    assert lines[2] == "backfill complete: 2 hours, 0 rows changed"


def test_backfill_before_scenario_window_runs_empty(runner, cfg, ran, tmp_path):
    # fleets exist only inside the scenario window, so earlier hours
    # must run the whole DAG over empty loads and change nothing
    def snapshot(name):
        out = tmp_path / name
        res = runner.invoke(
            main, ["export", "--data-dir", str(ran), "--dataset", "averaged", "--out", str(out)]
        )
        assert res.exit_code == 0, res.stderr
        return out.read_bytes()

    before = snapshot("before.csv")
    result = runner.invoke(
        main,
        [
            "backfill", "--config", str(cfg), "--data-dir", str(ran),
            "--from", "2025-05-31T22", "--to", "2025-06-01T00",
        ],
    )
    assert result.exit_code == 0, result.stderr
    lines = result.stdout.splitlines()
    assert lines[0] == "2025-05-31T22 ok rows_changed=0 inserted=0 replaced=0"
    assert lines[1] == "2025-05-31T23 ok rows_changed=0 inserted=0 replaced=0"
    assert lines[2] == "backfill complete: 2 hours, 0 rows changed"
    assert snapshot("after.csv") == before


def test_export_empty_range_writes_header_only(runner, ran, tmp_path):
    out = tmp_path / "none.csv"
    result = runner.invoke(
        main,
        [
            "export", "--data-dir", str(ran), "--dataset", "averaged", "--out", str(out),
            "--from", "2024-01-01T00", "--to", "2024-01-01T01",
        ],
    )
    assert result.exit_code == 0
    assert "exported 0 rows" in result.stdout
    lines = out.read_text().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith("device_id,")


def test_backfill_rejects_malformed_range(runner, cfg, ran):
    result = runner.invoke(
        main,
        [
            "backfill", "--config", str(cfg), "--data-dir", str(ran),
            "--from", "2025-06-01T02", "--to", "2025-06-01T00",
        ],
    )
    assert result.exit_code == 2
    assert "malformed range" in result.stderr


def test_backfill_rejects_unknown_dag(runner, cfg, ran):
    result = runner.invoke(
        main,
        [
            "backfill", "--config", str(cfg), "--data-dir", str(ran), "--dag", "other-dag",
            "--from", "2025-06-01T00", "--to", "2025-06-01T01",
        ],
    )
    assert result.exit_code == 2
    assert "unknown dag" in result.stderr
