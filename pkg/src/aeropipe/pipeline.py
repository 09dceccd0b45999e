"""End-to-end wiring: scenario in, populated data directory out.

One hourly DAG of eleven tasks covers the whole flow:

    extract_raw ─ clean_raw ─┬─ snapshot_cleaned
                             └─ aggregate_hourly ─┐
    extract_weather ─────────────────────────────┴─ merge_weather
        ─ calibrate ─┬─ send_api
                     ├─ send_broker
                     ├─ send_warehouse
                     └─ update_latest

Fleet generators stand in for live devices: extract_raw renders each
network's readings in its external format and parses them back through
the adapter, so the ingest boundary is exercised every hour.

Everything lives under one data directory:

    registry.tbl        site/device registry
    scenario.info       fingerprint of the scenario that built the dir
    models/             per-network calibration models
    broker/             commit log (hourly feed + compacted latest)
    warehouse/          raw / averaged / consolidated / forecast
    staging/            in-flight task artifacts + cleaned snapshots
    runs/               per-hour NDJSON run logs
    api-outbox/         per-hour NDJSON payloads (API send stand-in)
    sinks/              downstream consumer output (at-least-once)
    counters.tbl        per-stage, per-hour record counts
    reports/            CSV reports and figures
"""

from __future__ import annotations

import json
import logging
import os
import threading
from pathlib import Path

from . import adapters, calibration, sources, transforms
from .broker import Broker
from .metrics import Counters, availability, calibration_rate, parity
from .model import (
    AeropipeError,
    CalibrationFlag,
    ConsolidatedRecord,
    HourKey,
    Registry,
    SiteMeta,
    format_hour,
)
from .orchestrator import DagRunner, DagSpec, RunResult, Scheduler, SimClock, Staging, TaskSpec
from .report import (
    write_availability_csv,
    write_calibration_csv,
    write_counters_csv,
    write_parity_csv,
)
from .scenario import Scenario, ScenarioError
from .warehouse import Warehouse

log = logging.getLogger("aeropipe")

DAG_ID = "hourly-ingest"
TOPIC_HOURLY = "hourly-measurements"
TOPIC_LATEST = "latest-hourly"
CONSUMER_GROUP = "data-management"

TASK_DEPS: dict[str, tuple[str, ...]] = {
    "extract_raw": (),
    "clean_raw": ("extract_raw",),
    "snapshot_cleaned": ("clean_raw",),
    "aggregate_hourly": ("clean_raw",),
    "extract_weather": (),
    "merge_weather": ("aggregate_hourly", "extract_weather"),
    "calibrate": ("merge_weather",),
    "send_api": ("calibrate",),
    "send_broker": ("calibrate",),
    "send_warehouse": ("calibrate",),
    "update_latest": ("calibrate",),
}
TASK_NAMES = tuple(TASK_DEPS)

# Around Kampala; exact values only need to be stable and in range.
_SITE_LAT0, _SITE_LON0 = 0.313, 32.581


class PipelineError(AeropipeError):
    """Runtime failure outside task bodies (setup, incompatible dir)."""


def validate_scenario(sc: Scenario) -> None:
    """Checks beyond the grammar: references into the pipeline's DAG."""
    if sc.fault is not None and sc.fault.task not in TASK_NAMES:
        raise ScenarioError(
            f"[faults] task: unknown task {sc.fault.task!r} (expected one of {', '.join(TASK_NAMES)})"
        )


def _info_fields(sc: Scenario) -> dict[str, str]:
    fleets = ";".join(f"{f.network}:{f.device_count}" for f in sc.fleets)
    return {
        "name": sc.name,
        "seed": str(sc.seed),
        "start": str(sc.start_hour),
        "end": str(sc.end_hour),
        "sites": str(sc.sites),
        "store_raw": str(sc.store_raw).lower(),
        "forecast": str(sc.forecast).lower(),
        "fleets": fleets,
    }


def read_info(data_dir: Path) -> dict[str, str]:
    path = Path(data_dir) / "scenario.info"
    if not path.exists():
        raise PipelineError(f"{data_dir} has no scenario.info; run a scenario there first")
    fields = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            fields[key] = value
    return fields


class Pipeline:
    def __init__(self, scenario: Scenario, data_dir: Path):
        validate_scenario(scenario)
        self.scenario = scenario
        self.data_dir = Path(data_dir)
        self.registry = Registry()
        self.models: dict[str, calibration.CalibrationModel] = {}
        self.counters = Counters()
        self.broker: Broker | None = None
        self.warehouse = None
        self.runner: DagRunner | None = None
        self._tconfig = scenario.transform_config()
        self._site_of: dict[str, str] = {}
        self._stats_lock = threading.Lock()
        self.upserts_by_hour: dict[HourKey, dict[str, int]] = {}

    # --- paths ---

    @property
    def counters_path(self) -> Path:
        return self.data_dir / "counters.tbl"

    @property
    def registry_path(self) -> Path:
        return self.data_dir / "registry.tbl"

    @property
    def reports_dir(self) -> Path:
        return self.data_dir / "reports"

    def model_path(self, network: str) -> Path:
        return self.data_dir / "models" / f"{network}.model"

    # --- setup ---

    def _check_info(self, *, write: bool) -> None:
        path = self.data_dir / "scenario.info"
        fields = _info_fields(self.scenario)
        if path.exists():
            existing = read_info(self.data_dir)
            for key, value in fields.items():
                if existing.get(key) != value:
                    raise PipelineError(
                        f"data-dir {self.data_dir} was built by a different scenario: "
                        f"{key}={existing.get(key)!r}, config says {value!r}"
                    )
        elif write:
            path.write_text(
                "".join(f"{k}={v}\n" for k, v in fields.items()), encoding="utf-8"
            )

    def _build_registry(self) -> None:
        sc = self.scenario
        sites = sc.site_ids()
        for i, site_id in enumerate(sites):
            self.registry.register_site(
                SiteMeta(
                    site_id=site_id,
                    name=f"Site {i + 1}",
                    latitude=_SITE_LAT0 + 0.01 * i,
                    longitude=_SITE_LON0 + 0.01 * i,
                    city="Kampala",
                )
            )
        idx = 0
        for fleet in sc.fleets:
            for device_id in fleet.device_ids():
                self.registry.register_device(device_id, sites[idx % len(sites)], fleet.network)
                idx += 1
            for device_id, hour in sorted(fleet.decommission.items()):
                self.registry.decommission(device_id, hour)
        self.registry.save(self.registry_path)
        self._site_of = {d.device_id: d.site_id for d in self.registry.devices()}

    def _fit_models(self) -> None:
        sc = self.scenario
        for fleet in sc.fleets:
            rows = sources.generate_collocation(
                sc.calibration_rows,
                sc.calibration_coefficients,
                sc.calibration_noise_std,
                seed=sources.derive_seed(sc.seed, fleet.network),
            )
            model = calibration.fit(fleet.network, rows)
            model.save(self.model_path(fleet.network))
            self.models[fleet.network] = model
            log.info(
                "fitted %s model on %d rows (rmse %.4f)",
                fleet.network,
                model.training_rows,
                model.rmse,
            )

    def _open_stores(self) -> None:
        self.broker = Broker(self.data_dir)
        self.warehouse = Warehouse(self.data_dir)
        self.runner = DagRunner(
            clock=SimClock(self.scenario.start_hour * 3600.0),
            run_log_dir=self.data_dir / "runs",
            staging=Staging(self.data_dir / "staging"),
            max_workers=self.scenario.workers,
        )

    def initialize(self) -> None:
        """Fresh or compatible data-dir: build registry and models."""
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._check_info(write=True)
        self._build_registry()
        try:
            self._fit_models()
        except calibration.CalibrationError as exc:
            raise PipelineError(f"model fit failed: {exc}") from exc
        self._open_stores()
        log.info(
            "setup: %d devices across %d sites, hours [%s, %s)",
            len(self.registry.devices()),
            len(self.registry.sites()),
            format_hour(self.scenario.start_hour),
            format_hour(self.scenario.end_hour),
        )

    def open_existing(self) -> None:
        """Attach to a data-dir a previous run built."""
        self._check_info(write=False)
        self.registry = Registry.load(self.registry_path)
        self._site_of = {d.device_id: d.site_id for d in self.registry.devices()}
        for fleet in self.scenario.fleets:
            path = self.model_path(fleet.network)
            if not path.exists():
                raise PipelineError(f"data-dir incomplete: missing model file {path}")
            self.models[fleet.network] = calibration.CalibrationModel.load(path)
        self.counters = Counters.load(self.counters_path)
        self._open_stores()

    def close(self) -> None:
        if self.runner is not None:
            self.runner.close()
        if self.broker is not None:
            self.broker.close()

    # --- task bodies (run on worker threads) ---

    def _in_window(self, hour: HourKey) -> bool:
        return self.scenario.start_hour <= hour < self.scenario.end_hour

    def _t_extract_raw(self, hour: HourKey, ctx) -> list:
        batch = []
        if not self._in_window(hour):
            # fleets exist only inside the scenario window; a backfill
            # of earlier hours runs the full DAG over empty loads
            self.counters.add("raw-ingested", hour, 0)
            return batch
        for fleet in self.scenario.fleets:
            rows = sources.generate_hour(fleet, self._site_of, hour, self.scenario.seed)
            if fleet.network in ("iqair-like", "metone-like", "airqo-like"):
                # Devices deliver in their network's external format;
                # parse back through the adapter so the ingest boundary
                # runs on every batch.
                if fleet.network == "iqair-like":
                    payload = adapters.export_iqair_csv(rows)
                elif fleet.network == "metone-like":
                    payload = adapters.export_metone_fixed(rows)
                else:
                    payload = adapters.export_airqo_frames(rows)
                rows, report = adapters.adapt(payload, fleet.network)
                if report.malformed:
                    log.warning(
                        "%s delivered %d malformed rows at %s",
                        fleet.network,
                        report.malformed,
                        format_hour(hour),
                    )
            batch.extend(rows)
        self.counters.add("raw-ingested", hour, len(batch))
        return batch

    def _t_clean_raw(self, hour: HourKey, ctx) -> list:
        kept, report = transforms.clean(ctx.inputs["extract_raw"], self._tconfig)
        self.counters.add("cleaned-kept", hour, report.kept)
        if report.dropped:
            log.debug("clean dropped %d rows at %s", report.dropped, format_hour(hour))
        return kept

    def _t_snapshot_cleaned(self, hour: HourKey, ctx) -> list:
        # The runner stages this with keep_artifact, which is the whole
        # point: a durable snapshot of the cleaned batch for inspection.
        return ctx.inputs["clean_raw"]

    def _t_aggregate_hourly(self, hour: HourKey, ctx) -> list:
        records, _ = transforms.aggregate(ctx.inputs["clean_raw"], hour, self._tconfig)
        self.counters.add("aggregated", hour, len(records))
        return records

    def _t_extract_weather(self, hour: HourKey, ctx) -> list:
        out = []
        if not self._in_window(hour):
            return out
        for site_id in self.scenario.site_ids():
            rec = sources.generate_weather(
                site_id, hour, self.scenario.seed, self.scenario.weather_gaps
            )
            if rec is not None:
                out.append(rec)
        return out

    def _t_merge_weather(self, hour: HourKey, ctx) -> list:
        merged, report = transforms.merge(
            ctx.inputs["aggregate_hourly"], ctx.inputs["extract_weather"], self.registry
        )
        if report.rejected_unregistered:
            log.warning(
                "merge rejected %d rows from unregistered devices at %s",
                report.rejected_unregistered,
                format_hour(hour),
            )
        return merged

    def _t_calibrate(self, hour: HourKey, ctx) -> list:
        records = ctx.inputs["merge_weather"]
        by_network: dict[str, list[ConsolidatedRecord]] = {}
        for rec in records:
            network = self.registry.lookup(rec.device_id).network
            by_network.setdefault(network, []).append(rec)
        out: list[ConsolidatedRecord] = []
        for network in sorted(by_network):
            out.extend(calibration.calibrate(by_network[network], self.models.get(network)))
        out.sort(key=lambda r: (r.device_id, r.hour))
        self.counters.add(
            "calibrated",
            hour,
            sum(1 for r in out if r.calibration_flag is CalibrationFlag.CALIBRATED),
        )
        return out

    def _t_send_api(self, hour: HourKey, ctx) -> int:
        rows = ctx.inputs["calibrate"]
        outbox = self.data_dir / "api-outbox"
        outbox.mkdir(parents=True, exist_ok=True)
        path = outbox / f"{format_hour(hour)}.ndjson"
        with open(path, "w", encoding="utf-8") as fh:
            for rec in rows:
                fh.write(
                    json.dumps(
                        {
                            "device_id": rec.device_id,
                            "site_id": rec.site_id,
                            "hour": rec.hour,
                            "pm2_5_raw": rec.raw_pm2_5_mean,
                            "pm2_5_calibrated": rec.calibrated_pm2_5,
                            "flag": rec.calibration_flag.value,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        return len(rows)

    def _t_send_broker(self, hour: HourKey, ctx) -> int:
        rows = ctx.inputs["calibrate"]
        if rows:
            self.broker.publish(TOPIC_HOURLY, rows)
        self.counters.add("published", hour, len(rows))
        return len(rows)

    def _t_send_warehouse(self, hour: HourKey, ctx) -> dict[str, int]:
        rows = ctx.inputs["calibrate"]
        staging = self.runner.staging
        results = []
        if self.scenario.store_raw:
            # clean_raw is an ancestor through aggregate/merge/calibrate,
            # so its staged artifact is complete and stable here.
            cleaned = staging.load(DAG_ID, hour, "clean_raw")
            results.append(self.warehouse.upsert("raw", cleaned))
        averaged = staging.load(DAG_ID, hour, "aggregate_hourly")
        results.append(self.warehouse.upsert("averaged", averaged))
        results.append(self.warehouse.upsert("consolidated", rows))
        inserted = sum(r.inserted for r in results)
        replaced = sum(r.replaced for r in results)
        rejected = sum(r.rejected for r in results)
        if rejected:
            log.warning("warehouse rejected %d rows at %s", rejected, format_hour(hour))
        self.counters.add("upserted", hour, inserted + replaced)
        with self._stats_lock:
            self.upserts_by_hour[hour] = {"inserted": inserted, "replaced": replaced}
        return {"inserted": inserted, "replaced": replaced, "rejected": rejected}

    def _t_update_latest(self, hour: HourKey, ctx) -> int:
        rows = ctx.inputs["calibrate"]
        for rec in rows:
            self.broker.update_latest(TOPIC_LATEST, rec.device_id, rec)
        return len(rows)

    # --- DAG assembly ---

    def build_dag(self, hour: HourKey) -> DagSpec:
        sc = self.scenario
        bodies = {
            "extract_raw": self._t_extract_raw,
            "clean_raw": self._t_clean_raw,
            "snapshot_cleaned": self._t_snapshot_cleaned,
            "aggregate_hourly": self._t_aggregate_hourly,
            "extract_weather": self._t_extract_weather,
            "merge_weather": self._t_merge_weather,
            "calibrate": self._t_calibrate,
            "send_api": self._t_send_api,
            "send_broker": self._t_send_broker,
            "send_warehouse": self._t_send_warehouse,
            "update_latest": self._t_update_latest,
        }

        def bind(name):
            body = bodies[name]

            def run_task(ctx):
                if sc.fault is not None and sc.fault.applies(name, hour):
                    raise RuntimeError(f"injected fault in {name} at {format_hour(hour)}")
                return body(hour, ctx)

            return run_task

        tasks = [
            TaskSpec(
                name=name,
                fn=bind(name),
                depends_on=TASK_DEPS[name],
                max_retries=sc.max_retries,
                backoff_base=sc.backoff_base,
                keep_artifact=(name == "snapshot_cleaned"),
            )
            for name in TASK_NAMES
        ]
        return DagSpec(DAG_ID, tasks)

    # --- downstream consumer ---

    def drain_consumer(self) -> int:
        """Deliver published batches to the downstream sink, at least once.

        The sink append happens before the offset commit, so a crash in
        between redelivers (duplicates are the contract, not a bug).
        """
        if TOPIC_HOURLY not in self.broker.topics():
            return 0
        sink_dir = self.data_dir / "sinks"
        sink_dir.mkdir(parents=True, exist_ok=True)
        sink = sink_dir / "hourly-feed.ndjson"
        total = 0
        while True:
            batches, next_offset = self.broker.consume(TOPIC_HOURLY, CONSUMER_GROUP, 200)
            if not batches:
                break
            with open(sink, "a", encoding="utf-8") as fh:
                for records in batches:
                    per_hour: dict[HourKey, int] = {}
                    for rec in records:
                        fh.write(
                            json.dumps(
                                {
                                    "device_id": rec.device_id,
                                    "hour": rec.hour,
                                    "pm2_5_raw": rec.raw_pm2_5_mean,
                                    "pm2_5_calibrated": rec.calibrated_pm2_5,
                                    "flag": rec.calibration_flag.value,
                                },
                                sort_keys=True,
                            )
                            + "\n"
                        )
                        per_hour[rec.hour] = per_hour.get(rec.hour, 0) + 1
                    for h, n in per_hour.items():
                        self.counters.add("consumed", h, n)
                    total += len(records)
                fh.flush()
                os.fsync(fh.fileno())
            self.broker.commit(TOPIC_HOURLY, CONSUMER_GROUP, next_offset)
        return total

    # --- forecasting pass ---

    def run_forecast(self) -> int:
        """Seasonal-naive forecasts from the end of the scenario window.

        The per-device history prefers calibrated values and falls back
        to the raw hourly mean where calibration was not possible.
        """
        now = self.scenario.end_hour - 1
        history: dict[str, dict[HourKey, float]] = {}
        for rec in self.warehouse.query("consolidated", hour_range=self.scenario.period):
            value = (
                rec.calibrated_pm2_5
                if rec.calibration_flag is CalibrationFlag.CALIBRATED
                else rec.raw_pm2_5_mean
            )
            history.setdefault(rec.device_id, {})[rec.hour] = value
        rows = []
        for device_id in sorted(history):
            rows.extend(calibration.forecast(history[device_id], now, device_id))
        if rows:
            self.warehouse.upsert("forecast", rows)
        log.info("forecast pass wrote %d rows", len(rows))
        return len(rows)

    # --- reports ---

    def write_reports(self) -> dict[str, Path]:
        return render_reports_for(
            self.warehouse, self.registry, self.counters, self.scenario.period, self.reports_dir
        )

    # --- entry points ---

    def run(self) -> tuple[int, list[RunResult]]:
        """Full scenario: setup, every scheduled hour, drain, reports.

        Returns (exit_code, results); 0 iff every task of every run
        succeeded.
        """
        self.initialize()
        sc = self.scenario
        scheduler = Scheduler(self.runner, self.build_dag, first_hour=sc.start_hour)
        results: list[RunResult] = []
        try:
            for day_start in range(sc.start_hour, sc.end_hour, 24):
                day_end = min(day_start + 24, sc.end_hour)
                results.extend(scheduler.catch_up(day_end - 1))
                done = day_end - sc.start_hour
                if done % 240 == 0 or day_end == sc.end_hour:
                    ok = sum(1 for r in results if r.ok)
                    log.info(
                        "processed %d/%d hours (%d ok)",
                        done,
                        sc.end_hour - sc.start_hour,
                        ok,
                    )
            consumed = self.drain_consumer()
            log.info("drained %d records to the downstream sink", consumed)
            if sc.forecast:
                self.run_forecast()
            self.counters.save(self.counters_path)
            self.write_reports()
        finally:
            self.close()
        failed = [r for r in results if not r.ok]
        for r in failed:
            bad = {n: s.value for n, s in r.states.items() if s.value.startswith("failed")}
            log.error("run %s failed: %s", format_hour(r.hour), bad)
        return (1 if failed else 0), results

    def backfill(self, start: HourKey, end: HourKey) -> list[tuple[RunResult, int]]:
        """Re-run [start, end) ascending against the existing data-dir.

        Returns (result, rows_changed) per hour, where rows_changed
        counts physical warehouse writes (0 for a fully idempotent
        re-run of unchanged data).
        """
        self.open_existing()
        scheduler = Scheduler(self.runner, self.build_dag, first_hour=self.scenario.start_hour)
        out: list[tuple[RunResult, int]] = []
        try:
            for hour in range(start, end):
                self.counters.clear_hour(hour)
                before = self.warehouse.total_writes()
                results = scheduler.backfill(hour, hour + 1)
                changed = self.warehouse.total_writes() - before
                out.append((results[0], changed))
            self.drain_consumer()
            self.counters.save(self.counters_path)
        finally:
            self.close()
        return out

    def report_only(self) -> dict[str, Path]:
        """Recompute metrics and reports from an existing data-dir."""
        self.open_existing()
        try:
            paths = self.write_reports()
        finally:
            self.close()
        return paths


def render_reports_for(
    warehouse: Warehouse,
    registry: Registry,
    counters: Counters,
    period: tuple[HourKey, HourKey],
    reports_dir: Path,
) -> dict[str, Path]:
    # Figures pull in the plotting toolkit; keep that import off the
    # validate/export paths.
    from . import figures

    reports_dir.mkdir(parents=True, exist_ok=True)
    avail = availability(warehouse, registry, period)
    cal = calibration_rate(warehouse, registry, period)
    par = parity(warehouse, period)
    paths = {
        "availability": reports_dir / "availability.csv",
        "calibration": reports_dir / "calibration.csv",
        "parity": reports_dir / "parity.csv",
        "counters": reports_dir / "counters.csv",
        "availability_figure": reports_dir / "availability.png",
        "parity_figure": reports_dir / "parity.png",
    }
    write_availability_csv(avail, paths["availability"])
    write_calibration_csv(cal, paths["calibration"])
    write_parity_csv(par, paths["parity"])
    write_counters_csv(counters, paths["counters"])
    figures.availability_figure(avail, paths["availability_figure"])
    figures.parity_figure(par, paths["parity_figure"])
    return paths


def render_reports(data_dir: Path) -> dict[str, Path]:
    """Reports straight from a data-dir, using its recorded period."""
    data_dir = Path(data_dir)
    info = read_info(data_dir)
    try:
        period = (int(info["start"]), int(info["end"]))
    except (KeyError, ValueError) as exc:
        raise PipelineError(f"corrupt scenario.info in {data_dir}: {exc}") from exc
    registry = Registry.load(data_dir / "registry.tbl")
    warehouse = Warehouse(data_dir)
    counters = Counters.load(data_dir / "counters.tbl")
    return render_reports_for(warehouse, registry, counters, period, data_dir / "reports")
