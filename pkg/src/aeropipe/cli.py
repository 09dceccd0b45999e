"""Operator surface: run scenarios, backfill, export, report, validate.

Exit codes: 0 success, 1 runtime failure (including runs with
failed-final tasks), 2 config/usage rejection. Progress goes to
standard error; reports and exports go to files.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
from pathlib import Path

import click

from . import pipeline as pipeline_mod
from . import report as report_mod
from . import scenario as scenario_mod
from .metrics import Counters, availability, calibration_rate, parity
from .model import AeropipeError, Registry, format_hour, parse_hour
from .orchestrator import DagSpec, RunResult, TaskSpec, TaskState, render_tree
from .pipeline import DAG_ID, Pipeline, PipelineError, render_reports, validate_scenario
from .scenario import ScenarioError
from .warehouse import DATASETS, Warehouse

log = logging.getLogger("aeropipe")


def _setup_logging(quiet: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)


def _hour_param(_ctx, param, value):
    if value is None:
        return None
    try:
        return parse_hour(value)
    except (ValueError, TypeError) as exc:
        raise click.BadParameter(str(exc), param=param)


def _load_scenario(config: str, seed: int | None, scale: float | None = None):
    sc = scenario_mod.load(config)
    if seed is not None:
        sc = dataclasses.replace(sc, seed=seed)
    if scale is not None and scale != 1.0:
        sc = sc.scaled(scale)
    validate_scenario(sc)
    return sc


_config_option = click.option(
    "--config", required=True, help="Scenario file path or bundled scenario name."
)
_data_dir_option = click.option(
    "--data-dir",
    required=True,
    envvar="AEROPIPE_DATA_DIR",
    type=click.Path(path_type=Path),
    help="Pipeline state directory (env: AEROPIPE_DATA_DIR).",
)
_quiet_option = click.option("--quiet", is_flag=True, help="Suppress progress logging.")


@click.group()
def main() -> None:
    """Deterministic sensor-fleet ETL pipeline in a directory."""


@main.command()
@_config_option
@_data_dir_option
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--scale", type=float, default=1.0, show_default=True, help="Scale fleet sizes.")
@_quiet_option
def run(config: str, data_dir: Path, seed: int | None, scale: float, quiet: bool) -> None:
    """Execute a scenario end to end: setup, hourly runs, reports."""
    _setup_logging(quiet)
    try:
        sc = _load_scenario(config, seed, scale)
    except ScenarioError as exc:
        log.error("%s", exc)
        sys.exit(2)
    try:
        code, results = Pipeline(sc, data_dir).run()
    except AeropipeError as exc:
        log.error("%s", exc)
        sys.exit(1)
    ok = sum(1 for r in results if r.ok)
    log.info("%d/%d hourly runs ok; reports in %s", ok, len(results), data_dir / "reports")
    sys.exit(code)


@main.command()
@_config_option
@_data_dir_option
@click.option("--dag", default=DAG_ID, show_default=True, help="DAG to backfill.")
@click.option("--from", "start", required=True, callback=_hour_param, help="First hour (inclusive).")
@click.option("--to", "end", required=True, callback=_hour_param, help="End hour (exclusive).")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@_quiet_option
def backfill(
    config: str, data_dir: Path, dag: str, start: int, end: int, seed: int | None, quiet: bool
) -> None:
    """Re-run past hours against an existing data directory."""
    _setup_logging(quiet)
    if dag != DAG_ID:
        log.error("unknown dag %r (this pipeline defines %r)", dag, DAG_ID)
        sys.exit(2)
    if start >= end:
        log.error("malformed range: --from %s is not before --to %s", start, end)
        sys.exit(2)
    try:
        sc = _load_scenario(config, seed)
    except ScenarioError as exc:
        log.error("%s", exc)
        sys.exit(2)
    pipe = Pipeline(sc, data_dir)
    try:
        outcomes = pipe.backfill(start, end)
    except AeropipeError as exc:
        log.error("%s", exc)
        sys.exit(1)
    total_changed = 0
    failed = 0
    for result, changed in outcomes:
        total_changed += changed
        status = "ok" if result.ok else "FAILED"
        extra = pipe.upserts_by_hour.get(result.hour, {"inserted": 0, "replaced": 0})
        click.echo(
            f"{format_hour(result.hour)} {status} rows_changed={changed} "
            f"inserted={extra['inserted']} replaced={extra['replaced']}"
        )
        if not result.ok:
            failed += 1
    click.echo(f"backfill complete: {len(outcomes)} hours, {total_changed} rows changed")
    sys.exit(1 if failed else 0)


@main.command()
@_data_dir_option
@click.option("--dataset", required=True, type=click.Choice(DATASETS))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--from", "start", callback=_hour_param, default=None, help="First hour (inclusive).")
@click.option("--to", "end", callback=_hour_param, default=None, help="End hour (exclusive).")
@_quiet_option
def export(
    data_dir: Path, dataset: str, out: Path, start: int | None, end: int | None, quiet: bool
) -> None:
    """Write one dataset (optionally an hour range) as RFC-4180 CSV."""
    _setup_logging(quiet)
    hour_range = None
    if (start is None) != (end is None):
        log.error("--from and --to must be given together")
        sys.exit(2)
    if start is not None:
        if start >= end:
            log.error("malformed range: --from %s is not before --to %s", start, end)
            sys.exit(2)
        hour_range = (start, end)
    try:
        n = Warehouse(data_dir).export_csv(dataset, out, hour_range=hour_range)
    except AeropipeError as exc:
        log.error("%s", exc)
        sys.exit(1)
    except OSError as exc:
        log.error("cannot write %s: %s", out, exc)
        sys.exit(1)
    click.echo(f"exported {n} rows to {out}")


def _load_run_result(data_dir: Path, hour: int) -> RunResult:
    """Rebuild a run's final states from its NDJSON log."""
    path = data_dir / "runs" / DAG_ID / f"{format_hour(hour)}.log"
    if not path.exists():
        raise PipelineError(f"no run log at {path}")
    states: dict[str, TaskState] = {}
    attempts: dict[str, int] = {}
    errors: dict[str, str] = {}
    skipped_by: dict[str, str] = {}
    kind = "scheduled"
    backoff = 0.0
    for line in path.read_text(encoding="utf-8").splitlines():
        event = json.loads(line)
        if "run_ok" in event:
            backoff = event.get("backoff_s", 0.0)
            continue
        task = event["task"]
        kind = event.get("kind", kind)
        states[task] = TaskState(event["state"])
        attempts[task] = event.get("attempt", 0)
        if event.get("error"):
            errors[task] = event["error"]
        if event.get("blocked_by"):
            skipped_by[task] = event["blocked_by"]
    for name in pipeline_mod.TASK_NAMES:
        states.setdefault(name, TaskState.PENDING)
        attempts.setdefault(name, 0)
    return RunResult(
        dag_id=DAG_ID,
        hour=hour,
        kind=kind,
        states=states,
        attempts=attempts,
        errors=errors,
        skipped_by=skipped_by,
        total_backoff_s=backoff,
        log_path=path,
    )


def _shape_spec() -> DagSpec:
    noop = lambda ctx: None  # noqa: E731 - shape only, never executed
    return DagSpec(
        DAG_ID,
        [
            TaskSpec(name=n, fn=noop, depends_on=pipeline_mod.TASK_DEPS[n])
            for n in pipeline_mod.TASK_NAMES
        ],
    )


@main.command()
@_data_dir_option
@click.option("--config", default=None, help="Scenario file; checked against the data-dir.")
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["table", "csv"]),
    default="table",
    show_default=True,
)
@click.option(
    "--run-tree",
    callback=_hour_param,
    default=None,
    help="Print one hourly run as a task tree instead of metric reports.",
)
@_quiet_option
def report(data_dir: Path, config: str | None, fmt: str, run_tree: int | None, quiet: bool) -> None:
    """Recompute metrics from the warehouse; write reports/ and print."""
    _setup_logging(quiet)
    try:
        if run_tree is not None:
            click.echo(render_tree(_shape_spec(), _load_run_result(data_dir, run_tree)))
            return
        if config is not None:
            sc = _load_scenario(config, None)
            Pipeline(sc, data_dir).report_only()
            period = sc.period
        else:
            info = pipeline_mod.read_info(data_dir)
            render_reports(data_dir)
            period = (int(info["start"]), int(info["end"]))
    except ScenarioError as exc:
        log.error("%s", exc)
        sys.exit(2)
    except AeropipeError as exc:
        log.error("%s", exc)
        sys.exit(1)

    registry = Registry.load(data_dir / "registry.tbl")
    warehouse = Warehouse(data_dir)
    counters = Counters.load(data_dir / "counters.tbl")
    avail = availability(warehouse, registry, period)
    cal = calibration_rate(warehouse, registry, period)
    par = parity(warehouse, period)
    if fmt == "csv":
        for name in ("availability", "calibration", "parity", "counters"):
            click.echo((data_dir / "reports" / f"{name}.csv").read_text(encoding="utf-8"), nl=False)
            click.echo()
    else:
        click.echo("availability")
        click.echo(
            report_mod.rate_table(
                avail,
                "availability_pct",
                numerator_label="hours_with_data",
                denominator_label="total_hours",
            )
        )
        click.echo()
        click.echo("calibration")
        click.echo(
            report_mod.rate_table(
                cal,
                "calibration_pct",
                numerator_label="hours_with_calibrated",
                denominator_label="hours_with_raw",
            )
        )
        click.echo()
        click.echo("raw/calibrated parity")
        click.echo(report_mod.parity_table(par))
        click.echo()
        click.echo("stage counters")
        click.echo(report_mod.counters_table(counters))
    log.info("reports written to %s", data_dir / "reports")


@main.command()
@_config_option
def validate(config: str) -> None:
    """Parse and validate a scenario; exit 2 with the offending field on error."""
    _setup_logging(False)
    try:
        sc = _load_scenario(config, None)
    except ScenarioError as exc:
        click.echo(f"invalid: {exc}", err=True)
        sys.exit(2)
    hours = sc.end_hour - sc.start_hour
    devices = sum(f.device_count for f in sc.fleets)
    click.echo(
        f"ok: scenario {sc.name!r}, {hours} hours, {devices} devices, "
        f"{len(sc.fleets)} fleets, seed {sc.seed}"
    )


if __name__ == "__main__":
    main()
