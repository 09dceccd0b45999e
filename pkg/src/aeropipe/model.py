"""Domain types shared by every pipeline stage.

Time is UTC everywhere. Timestamps are seconds since the Unix epoch,
hour keys are integer hours since the epoch, and hour windows are
half-open ``[h, h+1)`` with inclusive start. Months are UTC calendar
months labelled ``YYYY-MM``.

Missing sensor fields are ``None``, never a sentinel value: cleaning and
calibration must distinguish "absent" from "zero".
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum

SECONDS_PER_HOUR = 3600

# Hour keys are plain ints (hours since the epoch); the alias marks intent
# in signatures without runtime cost.
HourKey = int

BUILTIN_NETWORKS = ("airqo-like", "iqair-like", "metone-like")


class AeropipeError(Exception):
    """Base class for all pipeline errors."""


class RegistryError(AeropipeError):
    """Invalid registry operation (unknown id, conflicting registration)."""


def is_valid_network(tag: str) -> bool:
    """A network tag is one of the built-in fleets or ``custom:<name>``."""
    if tag in BUILTIN_NETWORKS:
        return True
    return tag.startswith("custom:") and len(tag) > len("custom:")


def _check_identifier(value: str, what: str) -> str:
    if not isinstance(value, str) or not value:
        raise ValueError(f"{what} must be a non-empty string, got {value!r}")
    if any(c in value for c in "\t\n\r"):
        raise ValueError(f"{what} must not contain control characters: {value!r}")
    return value


# --- time arithmetic -------------------------------------------------------


def hour_key(ts: float) -> int:
    """Aligned hour containing ``ts`` (floor of hours since epoch)."""
    if not math.isfinite(ts):
        raise ValueError(f"timestamp must be finite, got {ts!r}")
    return math.floor(ts / SECONDS_PER_HOUR)


def hour_start(hour: int) -> float:
    """Timestamp of the inclusive start of an hour window."""
    return hour * float(SECONDS_PER_HOUR)


def hour_to_datetime(hour: int) -> datetime:
    return datetime.fromtimestamp(hour * SECONDS_PER_HOUR, tz=timezone.utc)


def datetime_to_hour(dt: datetime) -> int:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return hour_key(dt.timestamp())


def month_of(hour: int) -> str:
    """Calendar month label ``YYYY-MM`` containing the hour."""
    return hour_to_datetime(hour).strftime("%Y-%m")


def month_bounds(month: str) -> tuple[int, int]:
    """Half-open hour range ``[start, end)`` covering a ``YYYY-MM`` month."""
    try:
        start_dt = datetime.strptime(month, "%Y-%m").replace(tzinfo=timezone.utc)
    except ValueError as exc:
        raise ValueError(f"month label must be YYYY-MM, got {month!r}") from exc
    if start_dt.month == 12:
        end_dt = start_dt.replace(year=start_dt.year + 1, month=1)
    else:
        end_dt = start_dt.replace(month=start_dt.month + 1)
    return datetime_to_hour(start_dt), datetime_to_hour(end_dt)


def months_in_range(start_hour: int, end_hour: int) -> list[str]:
    """Month labels overlapping the half-open hour range, in order."""
    if end_hour < start_hour:
        raise ValueError("end_hour must be >= start_hour")
    labels: list[str] = []
    h = start_hour
    while h < end_hour:
        label = month_of(h)
        labels.append(label)
        h = month_bounds(label)[1]
    return labels


def format_hour(hour: int) -> str:
    """Compact ISO form used in file names and run logs."""
    return hour_to_datetime(hour).strftime("%Y-%m-%dT%H")


def parse_hour(text: str) -> int:
    """Parse an hour key from an integer, a date, or an ISO timestamp.

    Accepts raw hour integers ("484416"), dates ("2025-06-01", midnight),
    and ISO timestamps with optional Z suffix aligned to the hour.
    """
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    iso = text[:-1] + "+00:00" if text.endswith("Z") else text
    try:
        dt = datetime.fromisoformat(iso)
    except ValueError as exc:
        raise ValueError(f"cannot parse hour from {text!r}") from exc
    if dt.minute or dt.second or dt.microsecond:
        raise ValueError(f"hour boundary required, got {text!r}")
    return datetime_to_hour(dt)


# --- records ---------------------------------------------------------------


@dataclass(frozen=True)
class RawMeasurement:
    """One sensor reading; optional fields are None when the sensor omitted them."""

    device_id: str
    ts: float
    pm2_5: float | None
    pm10: float | None
    temperature: float | None
    humidity: float | None
    network: str


@dataclass(frozen=True)
class WeatherRecord:
    """Hourly weather for one site; at most one record per (site, hour)."""

    site_id: str
    hour: int
    temperature: float
    humidity: float


@dataclass(frozen=True)
class SiteMeta:
    site_id: str
    name: str
    latitude: float
    longitude: float
    city: str

    def __post_init__(self) -> None:
        _check_identifier(self.site_id, "site_id")
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")


@dataclass(frozen=True)
class HourlyRecord:
    """Per-device hourly aggregate; means cover only readings where the field was present."""

    device_id: str
    hour: int
    pm2_5_mean: float
    pm10_mean: float | None
    temperature_mean: float | None
    humidity_mean: float | None
    sample_count: int


class CalibrationFlag(Enum):
    CALIBRATED = "calibrated"
    MISSING_WEATHER = "uncalibrated-missing-weather"
    MODEL_UNAVAILABLE = "uncalibrated-model-unavailable"


@dataclass(frozen=True)
class ConsolidatedRecord:
    """Hourly aggregate merged with weather and site context.

    ``calibrated_pm2_5`` is present iff ``calibration_flag`` is CALIBRATED.
    """

    device_id: str
    site_id: str
    hour: int
    raw_pm2_5_mean: float
    raw_pm10_mean: float | None
    sample_count: int
    temperature: float | None
    humidity: float | None
    calibrated_pm2_5: float | None
    calibration_flag: CalibrationFlag


@dataclass(frozen=True)
class ForecastRow:
    """Predicted PM2.5 for a target hour, issued ``horizon`` hours ahead."""

    device_id: str
    hour: int
    horizon: int
    predicted_pm2_5: float


# --- device / site registry ------------------------------------------------


@dataclass(frozen=True)
class DeviceInfo:
    device_id: str
    site_id: str
    network: str
    decommissioned_at: int | None = None


class Registry:
    """Device and site registry.

    Read-mostly: writes happen during scenario setup and are serialized
    by an internal lock; lookups are lock-free dict reads.
    """

    def __init__(self) -> None:
        self._sites: dict[str, SiteMeta] = {}
        self._devices: dict[str, DeviceInfo] = {}
        self._write_lock = threading.Lock()

    def register_site(self, site: SiteMeta) -> None:
        with self._write_lock:
            existing = self._sites.get(site.site_id)
            if existing is not None and existing != site:
                raise RegistryError(
                    f"site {site.site_id!r} already registered with different metadata"
                )
            self._sites[site.site_id] = site

    def register_device(self, device_id: str, site_id: str, network: str) -> DeviceInfo:
        _check_identifier(device_id, "device_id")
        if not is_valid_network(network):
            raise ValueError(f"invalid network tag: {network!r}")
        with self._write_lock:
            if site_id not in self._sites:
                raise RegistryError(f"unknown site: {site_id!r}")
            info = DeviceInfo(device_id, site_id, network)
            existing = self._devices.get(device_id)
            if existing is not None:
                if (existing.site_id, existing.network) != (site_id, network):
                    raise RegistryError(
                        f"device {device_id!r} already registered to "
                        f"({existing.site_id}, {existing.network})"
                    )
                return existing
            self._devices[device_id] = info
            return info

    def decommission(self, device_id: str, hour: int) -> None:
        with self._write_lock:
            info = self._devices.get(device_id)
            if info is None:
                raise RegistryError(f"unknown device: {device_id!r}")
            self._devices[device_id] = DeviceInfo(
                info.device_id, info.site_id, info.network, hour
            )

    def lookup(self, device_id: str) -> DeviceInfo:
        info = self._devices.get(device_id)
        if info is None:
            raise RegistryError(f"unknown device: {device_id!r}")
        return info

    def site(self, site_id: str) -> SiteMeta:
        meta = self._sites.get(site_id)
        if meta is None:
            raise RegistryError(f"unknown site: {site_id!r}")
        return meta

    def devices(self) -> list[DeviceInfo]:
        return sorted(self._devices.values(), key=lambda d: d.device_id)

    def sites(self) -> list[SiteMeta]:
        return sorted(self._sites.values(), key=lambda s: s.site_id)

    def devices_in_network(self, network: str) -> list[DeviceInfo]:
        return [d for d in self.devices() if d.network == network]

    def networks(self) -> list[str]:
        return sorted({d.network for d in self._devices.values()})

    # Persistence: one tab-separated line per site and device, sorted, so
    # a rewrite of identical state is byte-identical.

    def save(self, path) -> None:
        lines = []
        for s in self.sites():
            lines.append(
                f"site\t{s.site_id}\t{s.name}\t{s.latitude!r}\t{s.longitude!r}\t{s.city}"
            )
        for d in self.devices():
            dec = "" if d.decommissioned_at is None else str(d.decommissioned_at)
            lines.append(f"device\t{d.device_id}\t{d.site_id}\t{d.network}\t{dec}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path) -> "Registry":
        reg = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                kind, *fields = line.split("\t")
                if kind == "site":
                    site_id, name, lat, lon, city = fields
                    reg.register_site(SiteMeta(site_id, name, float(lat), float(lon), city))
                elif kind == "device":
                    device_id, site_id, network, dec = fields
                    reg.register_device(device_id, site_id, network)
                    if dec:
                        reg.decommission(device_id, int(dec))
                else:
                    raise ValueError(f"unknown registry line kind: {kind!r}")
        return reg
