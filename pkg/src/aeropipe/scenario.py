"""Scenario files: the text format describing one simulated deployment.

The grammar is flat INI: a [scenario] section with the time range and
seed, one [fleet:<network>] section per sensor network, and optional
[pipeline], [bounds], [calibration], [weather], and [faults] sections.
Values are scalars, "lo..hi" hour ranges, or semicolon-separated
entries. docs/formats.md documents every key.

Validation is strict and front-loaded: unknown sections or keys,
out-of-range probabilities, malformed months, and references to
devices that do not exist are all reported with the offending section
and key named, before anything runs.
"""

from __future__ import annotations

import configparser
import io
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .model import AeropipeError, HourKey, parse_hour
from .sources import FleetProfile, OutageWindow, WeatherGap
from .transforms import CleanBounds, TransformConfig

_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")
_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")

_KNOWN_KEYS = {
    "scenario": {"name", "start", "end", "seed", "sites", "store_raw", "forecast"},
    "pipeline": {"min_samples", "max_retries", "backoff_base", "workers"},
    "bounds": {"pm2_5", "pm10", "temperature", "humidity"},
    "calibration": {"rows", "noise_std", "coefficients"},
    "weather": {"gaps"},
    "faults": {"task", "hours"},
}
_FLEET_KEYS = {
    "devices",
    "cadence",
    "availability",
    "noise_std",
    "drift_per_day",
    "cadence_jitter",
    "decommission",
    "outages",
}


class ScenarioError(AeropipeError):
    """Config rejected; the message names the offending section/key."""


@dataclass(frozen=True)
class FaultPlan:
    """Deterministic fault injection: the named task raises on every
    attempt for hours in the half-open range."""

    task: str
    hours: tuple[HourKey, HourKey]

    def applies(self, task: str, hour: HourKey) -> bool:
        return task == self.task and self.hours[0] <= hour < self.hours[1]


@dataclass(frozen=True)
class Scenario:
    name: str
    start_hour: HourKey
    end_hour: HourKey
    seed: int
    sites: int
    store_raw: bool
    forecast: bool
    fleets: tuple[FleetProfile, ...]
    weather_gaps: tuple[WeatherGap, ...] = ()
    min_samples: int = 2
    max_retries: int = 2
    backoff_base: float = 30.0
    workers: int = 4
    bounds: CleanBounds = field(default_factory=CleanBounds)
    calibration_rows: int = 200
    calibration_noise_std: float = 1.0
    calibration_coefficients: tuple[float, float, float, float] = (4.0, 0.85, 0.12, -0.05)
    fault: FaultPlan | None = None

    @property
    def period(self) -> tuple[HourKey, HourKey]:
        return (self.start_hour, self.end_hour)

    def transform_config(self) -> TransformConfig:
        return TransformConfig(bounds=self.bounds, min_samples=self.min_samples)

    def site_ids(self) -> list[str]:
        return [f"site-{i:03d}" for i in range(1, self.sites + 1)]

    def scaled(self, factor: float) -> "Scenario":
        """Scenario with device counts scaled by `factor` (min 1 per
        fleet); schedule entries naming devices that no longer exist
        are dropped."""
        if factor <= 0:
            raise ScenarioError(f"--scale must be positive, got {factor}")
        if factor == 1.0:
            return self
        fleets = []
        for f in self.fleets:
            count = max(1, round(f.device_count * factor))
            ids = {f"{f.network.replace('custom:', '')}-{i:03d}" for i in range(1, count + 1)}
            fleets.append(
                replace(
                    f,
                    device_count=count,
                    decommission={d: h for d, h in f.decommission.items() if d in ids},
                    outages=[
                        o for o in f.outages if o.selector == f.network or o.selector in ids
                    ],
                )
            )
        return replace(self, fleets=tuple(fleets))


def _fail(section: str, key: str, problem: str) -> ScenarioError:
    return ScenarioError(f"[{section}] {key}: {problem}")


def _split_entries(value: str) -> list[str]:
    parts: list[str] = []
    for chunk in value.replace("\n", ";").split(";"):
        chunk = chunk.strip()
        if chunk:
            parts.append(chunk)
    return parts


def _parse_hour_field(section: str, key: str, value: str) -> HourKey:
    try:
        return parse_hour(value.strip())
    except (ValueError, TypeError) as exc:
        raise _fail(section, key, f"bad hour {value.strip()!r} ({exc})") from exc


def _parse_hour_range(section: str, key: str, value: str) -> tuple[HourKey, HourKey]:
    if ".." not in value:
        raise _fail(section, key, f"expected 'start..end', got {value!r}")
    lo_text, hi_text = value.split("..", 1)
    lo = _parse_hour_field(section, key, lo_text)
    hi = _parse_hour_field(section, key, hi_text)
    if lo >= hi:
        raise _fail(section, key, f"empty range: {value!r}")
    return lo, hi


def _parse_float(section: str, key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise _fail(section, key, f"not a number: {value!r}") from exc


def _parse_int(section: str, key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise _fail(section, key, f"not an integer: {value!r}") from exc


def _parse_bool(section: str, key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise _fail(section, key, f"not a boolean: {value!r}")


def _parse_month_key(section: str, key: str) -> str:
    # key looks like "availability@2025-04"
    month = key.split("@", 1)[1]
    m = _MONTH_RE.match(month)
    if not m or not 1 <= int(m.group(2)) <= 12:
        raise _fail(section, key, f"bad month {month!r} (want YYYY-MM)")
    return month


def _parse_bounds_pair(section: str, key: str, value: str) -> tuple[float, float]:
    if ".." not in value:
        raise _fail(section, key, f"expected 'lo..hi', got {value!r}")
    lo_text, hi_text = value.split("..", 1)
    lo = _parse_float(section, key, lo_text.strip())
    hi = _parse_float(section, key, hi_text.strip())
    if lo >= hi:
        raise _fail(section, key, f"empty bounds: {value!r}")
    return lo, hi


def _parse_fleet(section: str, network: str, items: dict[str, str]) -> FleetProfile:
    months: dict[str, float] = {}
    plain: dict[str, str] = {}
    for key, value in items.items():
        if key.startswith("availability@"):
            months[_parse_month_key(section, key)] = _parse_float(section, key, value)
        elif key in _FLEET_KEYS:
            plain[key] = value
        else:
            raise _fail(section, key, "unknown key")
    if "devices" not in plain:
        raise _fail(section, "devices", "required key missing")
    devices = _parse_int(section, "devices", plain["devices"])
    if devices < 1:
        raise _fail(section, "devices", f"must be >= 1, got {devices}")
    cadence = _parse_int(section, "cadence", plain.get("cadence", "20"))
    if cadence < 1:
        raise _fail(section, "cadence", f"must be >= 1, got {cadence}")
    availability = _parse_float(section, "availability", plain.get("availability", "1.0"))
    for key, p in [("availability", availability)] + [
        (f"availability@{m}", p) for m, p in months.items()
    ]:
        if not 0.0 <= p <= 1.0:
            raise _fail(section, key, f"probability must be within [0, 1], got {p}")
    noise_std = _parse_float(section, "noise_std", plain.get("noise_std", "0"))
    if noise_std < 0:
        raise _fail(section, "noise_std", f"must be >= 0, got {noise_std}")
    drift = _parse_float(section, "drift_per_day", plain.get("drift_per_day", "0"))
    jitter = _parse_bool(section, "cadence_jitter", plain.get("cadence_jitter", "false"))

    prefix = network.replace("custom:", "")
    valid_ids = {f"{prefix}-{i:03d}" for i in range(1, devices + 1)}

    decommission: dict[str, HourKey] = {}
    for entry in _split_entries(plain.get("decommission", "")):
        if "@" not in entry:
            raise _fail(section, "decommission", f"expected 'device@hour', got {entry!r}")
        device, hour_text = entry.rsplit("@", 1)
        device = device.strip()
        if device not in valid_ids:
            raise _fail(section, "decommission", f"unknown device {device!r}")
        decommission[device] = _parse_hour_field(section, "decommission", hour_text)

    outages: list[OutageWindow] = []
    for entry in _split_entries(plain.get("outages", "")):
        if "@" not in entry:
            raise _fail(section, "outages", f"expected 'selector@start..end', got {entry!r}")
        selector, range_text = entry.rsplit("@", 1)
        selector = selector.strip()
        # Resolve to the form OutageWindow matches on: the network tag
        # for whole-fleet outages, the bare id for single devices.
        if selector == "network":
            resolved = network
        else:
            if not selector.startswith("device:"):
                raise _fail(section, "outages", f"selector must be 'network' or 'device:<id>', got {selector!r}")
            resolved = selector.removeprefix("device:")
            if resolved not in valid_ids:
                raise _fail(section, "outages", f"unknown device {resolved!r}")
        lo, hi = _parse_hour_range(section, "outages", range_text)
        outages.append(OutageWindow(selector=resolved, start_hour=lo, end_hour=hi))

    return FleetProfile(
        network=network,
        device_count=devices,
        cadence=cadence,
        availability=availability,
        availability_by_month=months,
        noise_std=noise_std,
        drift_per_day=drift,
        cadence_jitter=jitter,
        decommission=decommission,
        outages=outages,
    )


def parse_string(text: str) -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str  # keep key case; device ids are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(f"config syntax: {exc}") from exc

    sections = set(cp.sections())
    if "scenario" not in sections:
        raise ScenarioError("[scenario] section is required")
    for section in sections:
        if section in _KNOWN_KEYS:
            continue
        if section.startswith("fleet:"):
            continue
        raise ScenarioError(f"[{section}]: unknown section")
    for section, allowed in _KNOWN_KEYS.items():
        if section not in sections:
            continue
        for key in cp[section]:
            if key not in allowed and not (section == "scenario" and key == "name"):
                raise _fail(section, key, "unknown key")

    sc = dict(cp["scenario"])
    for required in ("name", "start", "end", "seed"):
        if required not in sc:
            raise _fail("scenario", required, "required key missing")
    name = sc["name"].strip()
    if not _NAME_RE.match(name):
        raise _fail("scenario", "name", f"must match {_NAME_RE.pattern}, got {name!r}")
    start_hour = _parse_hour_field("scenario", "start", sc["start"])
    end_hour = _parse_hour_field("scenario", "end", sc["end"])
    if start_hour >= end_hour:
        raise _fail("scenario", "end", "time range is empty")
    seed = _parse_int("scenario", "seed", sc["seed"])
    if seed < 0:
        raise _fail("scenario", "seed", f"must be >= 0, got {seed}")
    sites = _parse_int("scenario", "sites", sc.get("sites", "1"))
    if sites < 1:
        raise _fail("scenario", "sites", f"must be >= 1, got {sites}")
    store_raw = _parse_bool("scenario", "store_raw", sc.get("store_raw", "true"))
    forecast = _parse_bool("scenario", "forecast", sc.get("forecast", "false"))

    fleets = []
    for section in sorted(sections):
        if not section.startswith("fleet:"):
            continue
        network = section.removeprefix("fleet:")
        if not network or not _NAME_RE.match(network.removeprefix("custom:")):
            raise ScenarioError(f"[{section}]: bad network name")
        try:
            fleets.append(_parse_fleet(section, network, dict(cp[section])))
        except ValueError as exc:
            raise ScenarioError(f"[{section}]: {exc}") from exc
    if not fleets:
        raise ScenarioError("at least one [fleet:<network>] section is required")
    networks = [f.network for f in fleets]
    if len(set(networks)) != len(networks):
        raise ScenarioError("duplicate [fleet:<network>] sections")
    # Drift is measured from the scenario's first hour.
    fleets = [replace(f, epoch_hour=start_hour) for f in fleets]

    pipeline = dict(cp["pipeline"]) if "pipeline" in sections else {}
    min_samples = _parse_int("pipeline", "min_samples", pipeline.get("min_samples", "2"))
    if min_samples < 1:
        raise _fail("pipeline", "min_samples", f"must be >= 1, got {min_samples}")
    max_retries = _parse_int("pipeline", "max_retries", pipeline.get("max_retries", "2"))
    if max_retries < 0:
        raise _fail("pipeline", "max_retries", f"must be >= 0, got {max_retries}")
    backoff_base = _parse_float("pipeline", "backoff_base", pipeline.get("backoff_base", "30"))
    if backoff_base <= 0:
        raise _fail("pipeline", "backoff_base", f"must be > 0, got {backoff_base}")
    workers = _parse_int("pipeline", "workers", pipeline.get("workers", "4"))
    if workers < 1:
        raise _fail("pipeline", "workers", f"must be >= 1, got {workers}")

    bounds_section = dict(cp["bounds"]) if "bounds" in sections else {}
    defaults = CleanBounds()
    bounds = CleanBounds(
        pm2_5=_parse_bounds_pair("bounds", "pm2_5", bounds_section["pm2_5"]) if "pm2_5" in bounds_section else defaults.pm2_5,
        pm10=_parse_bounds_pair("bounds", "pm10", bounds_section["pm10"]) if "pm10" in bounds_section else defaults.pm10,
        temperature=_parse_bounds_pair("bounds", "temperature", bounds_section["temperature"]) if "temperature" in bounds_section else defaults.temperature,
        humidity=_parse_bounds_pair("bounds", "humidity", bounds_section["humidity"]) if "humidity" in bounds_section else defaults.humidity,
    )

    cal = dict(cp["calibration"]) if "calibration" in sections else {}
    cal_rows = _parse_int("calibration", "rows", cal.get("rows", "200"))
    if cal_rows < 10:
        raise _fail("calibration", "rows", f"must be >= 10, got {cal_rows}")
    cal_noise = _parse_float("calibration", "noise_std", cal.get("noise_std", "1.0"))
    if cal_noise < 0:
        raise _fail("calibration", "noise_std", f"must be >= 0, got {cal_noise}")
    coef_text = cal.get("coefficients", "4.0, 0.85, 0.12, -0.05")
    coef_parts = [p.strip() for p in coef_text.split(",") if p.strip()]
    if len(coef_parts) != 4:
        raise _fail("calibration", "coefficients", f"expected 4 comma-separated numbers, got {len(coef_parts)}")
    coefficients = tuple(_parse_float("calibration", "coefficients", p) for p in coef_parts)

    site_ids = {f"site-{i:03d}" for i in range(1, sites + 1)}
    gaps: list[WeatherGap] = []
    weather = dict(cp["weather"]) if "weather" in sections else {}
    for entry in _split_entries(weather.get("gaps", "")):
        if "@" not in entry:
            raise _fail("weather", "gaps", f"expected 'site@start..end', got {entry!r}")
        site, range_text = entry.rsplit("@", 1)
        site = site.strip()
        if site not in site_ids:
            raise _fail("weather", "gaps", f"unknown site {site!r} (scenario has {sites} sites)")
        lo, hi = _parse_hour_range("weather", "gaps", range_text)
        gaps.append(WeatherGap(site_id=site, start_hour=lo, end_hour=hi))

    fault = None
    if "faults" in sections:
        fa = dict(cp["faults"])
        if "task" not in fa or "hours" not in fa:
            raise _fail("faults", "task", "faults section needs both 'task' and 'hours'")
        fault = FaultPlan(task=fa["task"].strip(), hours=_parse_hour_range("faults", "hours", fa["hours"]))

    return Scenario(
        name=name,
        start_hour=start_hour,
        end_hour=end_hour,
        seed=seed,
        sites=sites,
        store_raw=store_raw,
        forecast=forecast,
        fleets=tuple(fleets),
        weather_gaps=tuple(gaps),
        min_samples=min_samples,
        max_retries=max_retries,
        backoff_base=backoff_base,
        workers=workers,
        bounds=bounds,
        calibration_rows=cal_rows,
        calibration_noise_std=cal_noise,
        calibration_coefficients=coefficients,  # type: ignore[arg-type]
        fault=fault,
    )


def parse_file(path: Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read config {path}: {exc}") from exc
    return parse_string(text)


def bundled_path(name: str) -> Path:
    """Resolve a bundled scenario by bare name ('smoke')."""
    p = Path(__file__).parent / "scenarios" / f"{name}.cfg"
    if not p.exists():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return p


def load(ref: str | Path) -> Scenario:
    """Accept a filesystem path or a bundled scenario name."""
    p = Path(ref)
    if p.exists():
        return parse_file(p)
    if isinstance(ref, str) and _NAME_RE.match(ref):
        return parse_file(bundled_path(ref))
    raise ScenarioError(f"no such config file or bundled scenario: {ref}")
