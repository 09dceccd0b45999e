"""Data-quality accounting over the warehouse and pipeline counters.

Two rate families share one shape:

    availability  = 100 * hours_with_data / total_hours
    calibration   = 100 * hours_with_calibrated / hours_with_raw

Both are computed per device per calendar month, then rolled up to
network and fleet scope by summing numerators and denominators (never
by averaging the per-device percentages, which weights sparse devices
wrongly). A zero denominator is reported as rate None (N/A), not 0.

Availability counts a device-hour iff an averaged record exists, so
the metric does not vary with raw cadence. Calibration counts rows of
the consolidated dataset, split by flag; the points fields carry the
same monthly tallies for the raw-versus-calibrated parity view.

Counters track monotone per-stage, per-hour record counts through the
pipeline and persist to a TSV file that is rewritten whole, so a
repeated run leaves it byte-identical.
"""

from __future__ import annotations

import os
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .model import (
    AeropipeError,
    CalibrationFlag,
    HourKey,
    Registry,
    month_bounds,
    month_of,
    months_in_range,
)
from .warehouse import Warehouse

STAGES = (
    "raw-ingested",
    "published",
    "consumed",
    "cleaned-kept",
    "aggregated",
    "calibrated",
    "upserted",
)


class MetricsError(AeropipeError):
    """Metric computation with unusable inputs (e.g. empty registry)."""


@dataclass(frozen=True)
class RateStat:
    """One numerator/denominator pair for a scope and month.

    scope is "device:<id>", "network:<name>", or "all".
    """

    scope: str
    month: str
    numerator: int
    denominator: int

    @property
    def rate(self) -> float | None:
        if self.denominator == 0:
            return None
        return 100.0 * self.numerator / self.denominator

    def formatted(self) -> str:
        r = self.rate
        return "N/A" if r is None else f"{r:.2f}"


@dataclass(frozen=True)
class CalibrationStat(RateStat):
    """Calibration rate plus the monthly point tallies behind the
    raw/calibrated parity comparison. numerator = hours_with_calibrated,
    denominator = hours_with_raw."""

    raw_points: int = 0
    calibrated_points: int = 0


def _clip(lo: int, hi: int, period: tuple[HourKey, HourKey]) -> tuple[int, int]:
    return max(lo, period[0]), min(hi, period[1])


def _sum_sides(device_stats: list[RateStat], registry: Registry) -> tuple[dict[str, list[int]], list[int]]:
    by_network: dict[str, list[int]] = {}
    total = [0, 0]
    for stat in device_stats:
        device_id = stat.scope.removeprefix("device:")
        network = registry.lookup(device_id).network
        acc = by_network.setdefault(network, [0, 0])
        acc[0] += stat.numerator
        acc[1] += stat.denominator
        total[0] += stat.numerator
        total[1] += stat.denominator
    return by_network, total


def availability(
    warehouse: Warehouse,
    registry: Registry,
    period: tuple[HourKey, HourKey],
) -> list[RateStat]:
    """Hours holding an averaged record over hours the device was in
    service, per device per month, with network and fleet roll-ups.

    Decommissioning shrinks the denominator from that hour on, so a
    retired device stops dragging its network's rate toward zero.
    """
    if not registry.devices():
        raise MetricsError("empty registry: no devices to report on")
    start, end = period
    out: list[RateStat] = []
    for month in months_in_range(start, end):
        lo, hi = _clip(*month_bounds(month), period)
        have = Counter(
            row.device_id for row in warehouse.query("averaged", hour_range=(lo, hi))
        )
        device_rows: list[RateStat] = []
        for dev in registry.devices():
            dev_hi = hi if dev.decommissioned_at is None else min(hi, dev.decommissioned_at)
            total_hours = max(0, dev_hi - lo)
            device_rows.append(
                RateStat(
                    f"device:{dev.device_id}",
                    month,
                    min(have[dev.device_id], total_hours),
                    total_hours,
                )
            )
        by_network, total = _sum_sides(device_rows, registry)
        out.extend(device_rows)
        out.extend(
            RateStat(f"network:{net}", month, num, den)
            for net, (num, den) in sorted(by_network.items())
        )
        out.append(RateStat("all", month, total[0], total[1]))
    return out


def calibration_rate(
    warehouse: Warehouse,
    registry: Registry,
    period: tuple[HourKey, HourKey],
) -> list[CalibrationStat]:
    """Calibrated consolidated rows over all consolidated rows, per
    device per month, with the same roll-ups as availability."""
    if not registry.devices():
        raise MetricsError("empty registry: no devices to report on")
    start, end = period
    out: list[CalibrationStat] = []
    for month in months_in_range(start, end):
        lo, hi = _clip(*month_bounds(month), period)
        raw_hours: Counter[str] = Counter()
        calibrated_hours: Counter[str] = Counter()
        for row in warehouse.query("consolidated", hour_range=(lo, hi)):
            raw_hours[row.device_id] += 1
            if row.calibration_flag is CalibrationFlag.CALIBRATED:
                calibrated_hours[row.device_id] += 1
        device_rows = [
            CalibrationStat(
                f"device:{dev.device_id}",
                month,
                calibrated_hours[dev.device_id],
                raw_hours[dev.device_id],
                raw_points=raw_hours[dev.device_id],
                calibrated_points=calibrated_hours[dev.device_id],
            )
            for dev in registry.devices()
        ]
        by_network, total = _sum_sides(device_rows, registry)
        out.extend(device_rows)
        out.extend(
            CalibrationStat(
                f"network:{net}", month, num, den, raw_points=den, calibrated_points=num
            )
            for net, (num, den) in sorted(by_network.items())
        )
        out.append(
            CalibrationStat(
                "all", month, total[0], total[1], raw_points=total[1], calibrated_points=total[0]
            )
        )
    return out


@dataclass(frozen=True)
class ParityRow:
    month: str
    raw_points: int
    calibrated_points: int


def parity(warehouse: Warehouse, period: tuple[HourKey, HourKey]) -> list[ParityRow]:
    """Monthly count of raw aggregated hourly records next to
    calibrated consolidated records."""
    start, end = period
    rows = []
    for month in months_in_range(start, end):
        lo, hi = _clip(*month_bounds(month), period)
        raw = warehouse.count("averaged", hour_range=(lo, hi))
        calibrated = warehouse.count(
            "consolidated",
            hour_range=(lo, hi),
            predicate=lambda r: r.calibration_flag is CalibrationFlag.CALIBRATED,
        )
        rows.append(ParityRow(month, raw, calibrated))
    return rows


class Counters:
    """Monotone (stage, hour) record counts with whole-file persistence."""

    def __init__(self) -> None:
        self._counts: dict[tuple[str, HourKey], int] = {}
        self._lock = threading.Lock()

    def add(self, stage: str, hour: HourKey, n: int) -> None:
        if n < 0:
            raise ValueError(f"counter increments must be non-negative, got {n}")
        key = (stage, hour)
        with self._lock:
            self._counts[key] = self._counts.get(key, 0) + n

    def get(self, stage: str, hour: HourKey) -> int:
        return self._counts.get((stage, hour), 0)

    def total(self, stage: str, hour_range: tuple[HourKey, HourKey] | None = None) -> int:
        return sum(
            n
            for (s, h), n in self._counts.items()
            if s == stage and (hour_range is None or hour_range[0] <= h < hour_range[1])
        )

    def by_month(self, stage: str) -> dict[str, int]:
        out: dict[str, int] = {}
        for (s, h), n in self._counts.items():
            if s == stage:
                m = month_of(h)
                out[m] = out.get(m, 0) + n
        return dict(sorted(out.items()))

    def stages(self) -> list[str]:
        return sorted({s for s, _ in self._counts})

    def clear_hour(self, hour: HourKey) -> None:
        """Drop all stage counts for one hour before it is reprocessed."""
        for key in [k for k in self._counts if k[1] == hour]:
            del self._counts[key]

    def save(self, path: Path) -> None:
        lines = [
            f"{stage}\t{hour}\t{count}"
            for (stage, hour), count in sorted(self._counts.items())
        ]
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".counters-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + ("\n" if lines else ""))
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: Path) -> "Counters":
        counters = cls()
        if not Path(path).exists():
            return counters
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            stage, hour, count = line.split("\t")
            counters._counts[(stage, int(hour))] = int(count)
        return counters


def throughput(counters: Counters) -> dict[str, dict[str, int]]:
    """Monthly record totals per pipeline stage."""
    return {stage: counters.by_month(stage) for stage in counters.stages()}
