"""Cleaning, hourly aggregation, and weather-merge stages.

Cleaning never throws: every input row either survives or lands in
exactly one drop tally (type-invalid, missing-required, out-of-range,
outlier, checked in that order), so kept + dropped always equals the
input count. Range bounds and the robust outlier rule live in
CleanBounds/TransformConfig so scenarios can override them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import median

from .model import (
    CalibrationFlag,
    ConsolidatedRecord,
    HourlyRecord,
    RawMeasurement,
    Registry,
    RegistryError,
    WeatherRecord,
    hour_key,
)

_OPTIONAL_FIELDS = ("pm10", "temperature", "humidity")


@dataclass(frozen=True)
class CleanBounds:
    """Accepted physical ranges; a present field outside its range drops the row."""

    pm2_5: tuple[float, float] = (0.0, 1000.0)
    pm10: tuple[float, float] = (0.0, 2000.0)
    temperature: tuple[float, float] = (-20.0, 55.0)
    humidity: tuple[float, float] = (0.0, 100.0)


@dataclass(frozen=True)
class TransformConfig:
    bounds: CleanBounds = CleanBounds()
    # Robust per-device-hour outlier rejection on pm2_5: drop readings with
    # |x - median| > mad_k * MAD, applied only when the group has >= mad_min_n.
    mad_k: float = 5.0
    mad_min_n: int = 5
    # Minimum readings per device-hour for an hourly aggregate to be emitted.
    min_samples: int = 2


@dataclass
class CleanReport:
    input_count: int = 0
    kept: int = 0
    dropped_out_of_range: int = 0
    dropped_missing_required: int = 0
    dropped_type_invalid: int = 0
    dropped_outlier: int = 0

    @property
    def dropped(self) -> int:
        return (
            self.dropped_out_of_range
            + self.dropped_missing_required
            + self.dropped_type_invalid
            + self.dropped_outlier
        )


@dataclass
class AggregateReport:
    input_count: int = 0
    records: int = 0
    rejected_out_of_window: int = 0
    devices_below_min_samples: int = 0


@dataclass
class MergeReport:
    input_count: int = 0
    merged: int = 0
    missing_weather: int = 0
    rejected_unregistered: int = 0
    rejected_devices: list[str] = field(default_factory=list)


def _numeric_or_invalid(value) -> bool:
    """True when the value is usable: None (absent) or a finite real number."""
    if value is None:
        return True
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return False
    return math.isfinite(value)


def clean(
    batch: list[RawMeasurement], config: TransformConfig = TransformConfig()
) -> tuple[list[RawMeasurement], CleanReport]:
    """Drop malformed, incomplete, out-of-range, and outlier readings."""
    report = CleanReport(input_count=len(batch))
    candidates: list[RawMeasurement] = []

    for m in batch:
        if not isinstance(m, RawMeasurement):
            report.dropped_type_invalid += 1
            continue
        values = (m.ts, m.pm2_5, m.pm10, m.temperature, m.humidity)
        if not all(_numeric_or_invalid(v) for v in values) or not isinstance(
            m.device_id, str
        ):
            report.dropped_type_invalid += 1
            continue
        if not m.device_id or m.ts is None or m.pm2_5 is None:
            report.dropped_missing_required += 1
            continue
        lo, hi = config.bounds.pm2_5
        in_range = lo <= m.pm2_5 <= hi
        for name in _OPTIONAL_FIELDS:
            v = getattr(m, name)
            if v is not None:
                lo, hi = getattr(config.bounds, name)
                in_range = in_range and lo <= v <= hi
        if not in_range:
            report.dropped_out_of_range += 1
            continue
        candidates.append(m)

    # MAD filter groups candidates by (device, hour); output preserves order.
    groups: dict[tuple[str, int], list[int]] = {}
    for i, m in enumerate(candidates):
        groups.setdefault((m.device_id, hour_key(m.ts)), []).append(i)

    outliers: set[int] = set()
    for indices in groups.values():
        if len(indices) < config.mad_min_n:
            continue
        values = [candidates[i].pm2_5 for i in indices]
        med = median(values)
        mad = median([abs(v - med) for v in values])
        threshold = config.mad_k * mad
        for i in indices:
            if abs(candidates[i].pm2_5 - med) > threshold:
                outliers.add(i)

    kept = [m for i, m in enumerate(candidates) if i not in outliers]
    report.dropped_outlier = len(outliers)
    report.kept = len(kept)
    return kept, report


def _mean(values: list[float]) -> float | None:
    if not values:
        return None
    return sum(values) / len(values)


def aggregate(
    batch: list[RawMeasurement],
    hour: int,
    config: TransformConfig = TransformConfig(),
) -> tuple[list[HourlyRecord], AggregateReport]:
    """Resample one hour's cleaned readings to per-device hourly means.

    Readings outside [hour, hour+1) are rejected per-row; devices with
    fewer than min_samples readings are omitted (tallied, not errors).
    Means are taken per field over the readings where it was present,
    summing in input order so results are deterministic.
    """
    report = AggregateReport(input_count=len(batch))
    per_device: dict[str, list[RawMeasurement]] = {}
    for m in batch:
        if hour_key(m.ts) != hour:
            report.rejected_out_of_window += 1
            continue
        per_device.setdefault(m.device_id, []).append(m)

    records: list[HourlyRecord] = []
    for device_id in sorted(per_device):
        readings = per_device[device_id]
        if len(readings) < config.min_samples:
            report.devices_below_min_samples += 1
            continue
        pm2_5 = _mean([m.pm2_5 for m in readings if m.pm2_5 is not None])
        assert pm2_5 is not None  # pm2_5 is required in every cleaned reading
        records.append(
            HourlyRecord(
                device_id=device_id,
                hour=hour,
                pm2_5_mean=pm2_5,
                pm10_mean=_mean([m.pm10 for m in readings if m.pm10 is not None]),
                temperature_mean=_mean(
                    [m.temperature for m in readings if m.temperature is not None]
                ),
                humidity_mean=_mean(
                    [m.humidity for m in readings if m.humidity is not None]
                ),
                sample_count=len(readings),
            )
        )
    report.records = len(records)
    return records, report


def merge(
    hourly: list[HourlyRecord],
    weather: list[WeatherRecord],
    registry: Registry,
) -> tuple[list[ConsolidatedRecord], MergeReport]:
    """Join hourly aggregates with site weather on (site_of(device), hour).

    On a weather hit the weather temperature/humidity override the
    device-reported means; on a miss the device values are retained and
    the row is flagged uncalibrated-missing-weather. Rows leave this
    stage uncalibrated; the calibration stage finalizes the flag.
    """
    report = MergeReport(input_count=len(hourly))
    weather_by_key = {(w.site_id, w.hour): w for w in weather}
    out: list[ConsolidatedRecord] = []
    for rec in hourly:
        try:
            info = registry.lookup(rec.device_id)
        except RegistryError:
            report.rejected_unregistered += 1
            report.rejected_devices.append(rec.device_id)
            continue
        hit = weather_by_key.get((info.site_id, rec.hour))
        if hit is not None:
            temperature: float | None = hit.temperature
            humidity: float | None = hit.humidity
            flag = CalibrationFlag.MODEL_UNAVAILABLE
            report.merged += 1
        else:
            temperature = rec.temperature_mean
            humidity = rec.humidity_mean
            flag = CalibrationFlag.MISSING_WEATHER
            report.missing_weather += 1
        out.append(
            ConsolidatedRecord(
                device_id=rec.device_id,
                site_id=info.site_id,
                hour=rec.hour,
                raw_pm2_5_mean=rec.pm2_5_mean,
                raw_pm10_mean=rec.pm10_mean,
                sample_count=rec.sample_count,
                temperature=temperature,
                humidity=humidity,
                calibrated_pm2_5=None,
                calibration_flag=flag,
            )
        )
    return out, report
