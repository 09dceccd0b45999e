"""Embedded analytical store with four fixed datasets and idempotent writes.

Datasets and their dedup keys:

    raw           RawMeasurement      (device_id, ts)
    averaged      HourlyRecord        (device_id, hour)
    consolidated  ConsolidatedRecord  (device_id, hour)
    forecast      ForecastRow         (device_id, hour, horizon)

Upserts are last-writer-wins per key and skip the disk write entirely
when the incoming row equals the stored one, so re-running a load (or a
whole backfill) leaves both the in-memory state and the files
byte-identical. Schema violations are per-row: the batch continues and
the summary reports each rejected row.

Storage is one append-plus-compaction text file per dataset per month
(``<data-dir>/warehouse/<dataset>/<YYYY-MM>.tbl``); the key index is
rebuilt on open by replaying files in name order. Floats are written
with ``repr`` so every value round-trips exactly.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .model import (
    AeropipeError,
    CalibrationFlag,
    ConsolidatedRecord,
    ForecastRow,
    HourlyRecord,
    RawMeasurement,
    hour_key,
    month_of,
)

DATASETS = ("raw", "averaged", "consolidated", "forecast")


class WarehouseError(AeropipeError):
    pass


class UnknownDatasetError(WarehouseError):
    pass


@dataclass(frozen=True)
class RowError:
    index: int
    message: str


@dataclass
class UpsertResult:
    inserted: int = 0
    replaced: int = 0
    errors: list[RowError] = field(default_factory=list)

    @property
    def rejected(self) -> int:
        return len(self.errors)


def _opt(value: float | None) -> str:
    return "" if value is None else repr(value)


def _opt_f(text: str) -> float | None:
    return None if text == "" else float(text)


def _finite(value, name: str, optional: bool = False) -> None:
    if value is None:
        if optional:
            return
        raise WarehouseError(f"{name} is required")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise WarehouseError(f"{name} must be numeric, got {type(value).__name__}")
    if not math.isfinite(value):
        raise WarehouseError(f"{name} must be finite, got {value!r}")


def _ident(value, name: str) -> None:
    if not isinstance(value, str) or not value:
        raise WarehouseError(f"{name} must be a non-empty string")
    if any(c in value for c in "\t\n\r"):
        raise WarehouseError(f"{name} contains control characters")


# --- per-dataset schema adapters -------------------------------------------


class _Schema:
    name: str
    columns: tuple[str, ...]
    record_type: type

    def key(self, row) -> tuple: ...
    def validate(self, row) -> None: ...
    def to_fields(self, row) -> list[str]: ...
    def from_fields(self, fields: list[str]): ...
    def month(self, row) -> str: ...

    def check_type(self, row) -> None:
        if not isinstance(row, self.record_type):
            raise WarehouseError(
                f"expected {self.record_type.__name__}, got {type(row).__name__}"
            )


class _RawSchema(_Schema):
    name = "raw"
    record_type = RawMeasurement
    columns = ("device_id", "ts", "pm2_5", "pm10", "temperature", "humidity", "network")

    def key(self, row: RawMeasurement) -> tuple:
        return (row.device_id, row.ts)

    def validate(self, row: RawMeasurement) -> None:
        self.check_type(row)
        _ident(row.device_id, "device_id")
        _ident(row.network, "network")
        _finite(row.ts, "ts")
        for f in ("pm2_5", "pm10", "temperature", "humidity"):
            _finite(getattr(row, f), f, optional=True)

    def to_fields(self, row: RawMeasurement) -> list[str]:
        return [
            row.device_id,
            repr(row.ts),
            _opt(row.pm2_5),
            _opt(row.pm10),
            _opt(row.temperature),
            _opt(row.humidity),
            row.network,
        ]

    def from_fields(self, f: list[str]) -> RawMeasurement:
        return RawMeasurement(
            f[0], float(f[1]), _opt_f(f[2]), _opt_f(f[3]), _opt_f(f[4]), _opt_f(f[5]), f[6]
        )

    def month(self, row: RawMeasurement) -> str:
        return month_of(hour_key(row.ts))

    def hour_of(self, row: RawMeasurement) -> int:
        return hour_key(row.ts)


class _AveragedSchema(_Schema):
    name = "averaged"
    record_type = HourlyRecord
    columns = (
        "device_id",
        "hour",
        "pm2_5_mean",
        "pm10_mean",
        "temperature_mean",
        "humidity_mean",
        "sample_count",
    )

    def key(self, row: HourlyRecord) -> tuple:
        return (row.device_id, row.hour)

    def validate(self, row: HourlyRecord) -> None:
        self.check_type(row)
        _ident(row.device_id, "device_id")
        if not isinstance(row.hour, int):
            raise WarehouseError("hour must be an integer hour key")
        if not isinstance(row.sample_count, int) or row.sample_count < 1:
            raise WarehouseError(f"sample_count must be >= 1, got {row.sample_count!r}")
        _finite(row.pm2_5_mean, "pm2_5_mean")
        for f in ("pm10_mean", "temperature_mean", "humidity_mean"):
            _finite(getattr(row, f), f, optional=True)

    def to_fields(self, row: HourlyRecord) -> list[str]:
        return [
            row.device_id,
            str(row.hour),
            repr(row.pm2_5_mean),
            _opt(row.pm10_mean),
            _opt(row.temperature_mean),
            _opt(row.humidity_mean),
            str(row.sample_count),
        ]

    def from_fields(self, f: list[str]) -> HourlyRecord:
        return HourlyRecord(
            f[0], int(f[1]), float(f[2]), _opt_f(f[3]), _opt_f(f[4]), _opt_f(f[5]), int(f[6])
        )

    def month(self, row: HourlyRecord) -> str:
        return month_of(row.hour)

    def hour_of(self, row: HourlyRecord) -> int:
        return row.hour


class _ConsolidatedSchema(_Schema):
    name = "consolidated"
    record_type = ConsolidatedRecord
    columns = (
        "device_id",
        "site_id",
        "hour",
        "raw_pm2_5_mean",
        "raw_pm10_mean",
        "sample_count",
        "temperature",
        "humidity",
        "calibrated_pm2_5",
        "calibration_flag",
    )

    def key(self, row: ConsolidatedRecord) -> tuple:
        return (row.device_id, row.hour)

    def validate(self, row: ConsolidatedRecord) -> None:
        self.check_type(row)
        _ident(row.device_id, "device_id")
        _ident(row.site_id, "site_id")
        if not isinstance(row.hour, int):
            raise WarehouseError("hour must be an integer hour key")
        if not isinstance(row.sample_count, int) or row.sample_count < 1:
            raise WarehouseError(f"sample_count must be >= 1, got {row.sample_count!r}")
        _finite(row.raw_pm2_5_mean, "raw_pm2_5_mean")
        for f in ("raw_pm10_mean", "temperature", "humidity"):
            _finite(getattr(row, f), f, optional=True)
        if not isinstance(row.calibration_flag, CalibrationFlag):
            raise WarehouseError("calibration_flag must be a CalibrationFlag")
        calibrated = row.calibration_flag is CalibrationFlag.CALIBRATED
        if calibrated:
            _finite(row.calibrated_pm2_5, "calibrated_pm2_5")
        elif row.calibrated_pm2_5 is not None:
            raise WarehouseError(
                "calibrated_pm2_5 must be absent unless calibration_flag is calibrated"
            )

    def to_fields(self, row: ConsolidatedRecord) -> list[str]:
        return [
            row.device_id,
            row.site_id,
            str(row.hour),
            repr(row.raw_pm2_5_mean),
            _opt(row.raw_pm10_mean),
            str(row.sample_count),
            _opt(row.temperature),
            _opt(row.humidity),
            _opt(row.calibrated_pm2_5),
            row.calibration_flag.value,
        ]

    def from_fields(self, f: list[str]) -> ConsolidatedRecord:
        return ConsolidatedRecord(
            device_id=f[0],
            site_id=f[1],
            hour=int(f[2]),
            raw_pm2_5_mean=float(f[3]),
            raw_pm10_mean=_opt_f(f[4]),
            sample_count=int(f[5]),
            temperature=_opt_f(f[6]),
            humidity=_opt_f(f[7]),
            calibrated_pm2_5=_opt_f(f[8]),
            calibration_flag=CalibrationFlag(f[9]),
        )

    def month(self, row: ConsolidatedRecord) -> str:
        return month_of(row.hour)

    def hour_of(self, row: ConsolidatedRecord) -> int:
        return row.hour


class _ForecastSchema(_Schema):
    name = "forecast"
    record_type = ForecastRow
    columns = ("device_id", "hour", "horizon", "predicted_pm2_5")

    def key(self, row: ForecastRow) -> tuple:
        return (row.device_id, row.hour, row.horizon)

    def validate(self, row: ForecastRow) -> None:
        self.check_type(row)
        _ident(row.device_id, "device_id")
        if not isinstance(row.hour, int):
            raise WarehouseError("hour must be an integer hour key")
        if not isinstance(row.horizon, int) or not 1 <= row.horizon <= 24:
            raise WarehouseError(f"horizon must be in 1..24, got {row.horizon!r}")
        _finite(row.predicted_pm2_5, "predicted_pm2_5")

    def to_fields(self, row: ForecastRow) -> list[str]:
        return [row.device_id, str(row.hour), str(row.horizon), repr(row.predicted_pm2_5)]

    def from_fields(self, f: list[str]) -> ForecastRow:
        return ForecastRow(f[0], int(f[1]), int(f[2]), float(f[3]))

    def month(self, row: ForecastRow) -> str:
        return month_of(row.hour)

    def hour_of(self, row: ForecastRow) -> int:
        return row.hour


_SCHEMAS: dict[str, _Schema] = {
    s.name: s
    for s in (_RawSchema(), _AveragedSchema(), _ConsolidatedSchema(), _ForecastSchema())
}


class _Dataset:
    def __init__(self, schema: _Schema, directory: Path) -> None:
        self.schema = schema
        self.directory = directory
        self.rows: dict[tuple, object] = {}
        self.lock = threading.Lock()
        self.writes = 0  # rows actually appended (new or value-changed)

    def load(self) -> None:
        if not self.directory.exists():
            return
        for path in sorted(self.directory.glob("*.tbl")):
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    row = self.schema.from_fields(line.split("\t"))
                    self.rows[self.schema.key(row)] = row

    def _flush_appends(self, pending: dict[str, list[str]]) -> None:
        if not pending:
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        for month, lines in pending.items():
            with open(self.directory / f"{month}.tbl", "a", encoding="utf-8") as fh:
                fh.write("".join(lines))

    def compact(self) -> None:
        """Rewrite month files keeping only live rows, sorted by key."""
        with self.lock:
            by_month: dict[str, list] = {}
            for key in sorted(self.rows):
                row = self.rows[key]
                by_month.setdefault(self.schema.month(row), []).append(row)
            if not self.directory.exists():
                return
            for path in sorted(self.directory.glob("*.tbl")):
                month = path.stem
                rows = by_month.get(month, [])
                if not rows:
                    path.unlink()
                    continue
                tmp = path.with_suffix(".tbl.tmp")
                with open(tmp, "w", encoding="utf-8") as fh:
                    for row in rows:
                        fh.write("\t".join(self.schema.to_fields(row)) + "\n")
                tmp.replace(path)


class Warehouse:
    def __init__(self, data_dir) -> None:
        self.root = Path(data_dir) / "warehouse"
        self._datasets = {
            name: _Dataset(schema, self.root / name) for name, schema in _SCHEMAS.items()
        }
        for ds in self._datasets.values():
            ds.load()

    def _dataset(self, dataset: str) -> _Dataset:
        ds = self._datasets.get(dataset)
        if ds is None:
            raise UnknownDatasetError(
                f"unknown dataset {dataset!r}; expected one of {', '.join(DATASETS)}"
            )
        return ds

    def upsert(self, dataset: str, rows: Iterable) -> UpsertResult:
        """Insert-or-replace each row under its dedup key.

        Rows violating the dataset schema are reported in the result and
        skipped; the rest of the batch still loads. Identical re-upserts
        count as replacements but write nothing.
        """
        ds = self._dataset(dataset)
        result = UpsertResult()
        pending: dict[str, list[str]] = {}
        with ds.lock:
            for i, row in enumerate(rows):
                try:
                    ds.schema.validate(row)
                except WarehouseError as exc:
                    result.errors.append(RowError(i, str(exc)))
                    continue
                key = ds.schema.key(row)
                current = ds.rows.get(key)
                if current is not None and current == row:
                    result.replaced += 1
                    continue
                if current is None:
                    result.inserted += 1
                else:
                    result.replaced += 1
                ds.rows[key] = row
                ds.writes += 1
                line = "\t".join(ds.schema.to_fields(row)) + "\n"
                pending.setdefault(ds.schema.month(row), []).append(line)
            ds._flush_appends(pending)
        return result

    def query(
        self,
        dataset: str,
        device_filter: str | set[str] | None = None,
        hour_range: tuple[int, int] | None = None,
    ) -> Iterator:
        """Rows matching the filters, ordered by dedup key (device, hour, ...).

        ``hour_range`` is half-open ``[start, end)`` over the row's hour
        (for the raw dataset, the hour containing its timestamp).
        """
        ds = self._dataset(dataset)
        devices: set[str] | None
        if device_filter is None:
            devices = None
        elif isinstance(device_filter, str):
            devices = {device_filter}
        else:
            devices = set(device_filter)
        if hour_range is not None:
            start, end = hour_range
            if start > end:
                raise WarehouseError(f"hour range start {start} > end {end}")
        with ds.lock:
            keys = sorted(ds.rows)
            rows = [ds.rows[k] for k in keys]
        for row in rows:
            if devices is not None and row.device_id not in devices:
                continue
            if hour_range is not None:
                h = ds.schema.hour_of(row)
                if not start <= h < end:
                    continue
            yield row

    def count(
        self,
        dataset: str,
        hour_range: tuple[int, int] | None = None,
        predicate: Callable[[object], bool] | None = None,
        device_filter: str | set[str] | None = None,
    ) -> int:
        n = 0
        for row in self.query(dataset, device_filter, hour_range):
            if predicate is None or predicate(row):
                n += 1
        return n

    def row_count(self, dataset: str) -> int:
        return len(self._dataset(dataset).rows)

    def total_writes(self) -> int:
        """Monotone count of rows physically appended across all datasets."""
        return sum(ds.writes for ds in self._datasets.values())

    def export_csv(
        self,
        dataset: str,
        path,
        device_filter: str | set[str] | None = None,
        hour_range: tuple[int, int] | None = None,
    ) -> int:
        """Write matching rows as RFC-4180 CSV with a header; returns row count."""
        ds = self._dataset(dataset)
        n = 0
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(ds.schema.columns)
            for row in self.query(dataset, device_filter, hour_range):
                writer.writerow(ds.schema.to_fields(row))
                n += 1
        return n

    def import_csv(self, dataset: str, path) -> UpsertResult:
        """Load rows from a CSV previously produced by export_csv."""
        ds = self._dataset(dataset)
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is not None and tuple(header) != ds.schema.columns:
                raise WarehouseError(
                    f"unexpected CSV header for {dataset}: {header!r}"
                )
            rows = [ds.schema.from_fields(fields) for fields in reader if fields]
        return self.upsert(dataset, rows)

    def compact(self) -> None:
        for ds in self._datasets.values():
            ds.compact()
