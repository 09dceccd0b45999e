"""Deterministic simulators for sensor fleets, weather, and collocation data.

Everything here is a pure function of (configuration, seed, time): the
same inputs produce byte-identical outputs on any machine. Seeds are
derived with BLAKE2b over stable strings, then stretched per hour with
a splitmix-style integer mix, so per-device-per-hour streams are
independent and cheap to derive.

The underlying "truth" PM2.5 signal is a synthetic 24-hour sinusoid
(base 35 ug/m3, amplitude 15); only its relative behavior matters.
Device readings add per-day drift and Gaussian noise on top, clamped at
zero. A device-hour produces either all of its configured cadence of
readings (probability p) or nothing, which is what the availability
metric ultimately measures.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field

from .model import (
    RawMeasurement,
    SECONDS_PER_HOUR,
    WeatherRecord,
    month_of,
)

TRUTH_BASE = 35.0
TRUTH_AMPLITUDE = 15.0
PM10_RATIO = 1.9

_MASK64 = (1 << 64) - 1


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from the given parts (no PYTHONHASHSEED dependence)."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def mix_seed(seed: int, value: int) -> int:
    """splitmix64 finalizer over seed+value; cheap per-hour stream derivation."""
    z = (seed + 0x9E3779B97F4A7C15 * (value + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def truth_pm2_5(hour: int) -> float:
    """Synthetic diurnal PM2.5 signal, constant within each hour."""
    return TRUTH_BASE + TRUTH_AMPLITUDE * math.sin(2.0 * math.pi * (hour % 24) / 24.0)


def _diurnal_temperature(hour: int) -> float:
    # Warmest mid-afternoon, coolest pre-dawn.
    return 23.0 + 5.0 * math.sin(2.0 * math.pi * ((hour % 24) - 9) / 24.0)


def _diurnal_humidity(hour: int) -> float:
    return 62.0 - 18.0 * math.sin(2.0 * math.pi * ((hour % 24) - 9) / 24.0)


@dataclass(frozen=True)
class OutageWindow:
    """No data from the selected device or network during [start, end)."""

    selector: str  # device id or network tag
    start_hour: int
    end_hour: int

    def covers(self, device_id: str, network: str, hour: int) -> bool:
        if self.selector not in (device_id, network):
            return False
        return self.start_hour <= hour < self.end_hour


@dataclass
class FleetProfile:
    """One simulated sensor network."""

    network: str
    device_count: int
    cadence: int = 20  # readings per hour when the device-hour has data
    availability: float = 1.0  # default hourly probability p
    availability_by_month: dict[str, float] = field(default_factory=dict)
    noise_std: float = 0.0  # ug/m3
    drift_per_day: float = 0.0  # ug/m3 per elapsed day
    epoch_hour: int = 0  # drift reference point (scenario start)
    cadence_jitter: bool = False  # irregular intra-hour timing instead of a fixed grid
    decommission: dict[str, int] = field(default_factory=dict)  # device -> hour
    outages: list[OutageWindow] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.cadence < 1:
            raise ValueError(f"cadence must be >= 1, got {self.cadence}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        for p in [self.availability, *self.availability_by_month.values()]:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"availability probability out of [0,1]: {p}")

    def device_ids(self) -> list[str]:
        prefix = self.network.replace("custom:", "")
        return [f"{prefix}-{i:03d}" for i in range(1, self.device_count + 1)]

    def availability_for(self, hour: int) -> float:
        return self.availability_by_month.get(month_of(hour), self.availability)

    def active(self, device_id: str, hour: int) -> bool:
        dec = self.decommission.get(device_id)
        return dec is None or hour < dec


def generate_hour(
    profile: FleetProfile, site_of: dict[str, str], hour: int, seed: int
) -> list[RawMeasurement]:
    """All readings for one fleet for one hour.

    Per device: with probability p (seeded per device-hour) the device
    reports ``cadence`` readings spread across the hour, otherwise
    nothing. Decommissioned devices and outage windows produce nothing.
    ``site_of`` only chooses the weather context downstream; readings
    carry the device and network ids.
    """
    out: list[RawMeasurement] = []
    p = profile.availability_for(hour)
    base_pm = truth_pm2_5(hour)
    days_elapsed = (hour - profile.epoch_hour) / 24.0
    drift = profile.drift_per_day * days_elapsed
    temp_base = _diurnal_temperature(hour)
    hum_base = _diurnal_humidity(hour)
    step = SECONDS_PER_HOUR / profile.cadence

    for device_id in profile.device_ids():
        if not profile.active(device_id, hour):
            continue
        if any(w.covers(device_id, profile.network, hour) for w in profile.outages):
            continue
        device_seed = derive_seed(seed, profile.network, device_id)
        rng = random.Random(mix_seed(device_seed, hour))
        if rng.random() >= p:
            continue
        if profile.cadence_jitter:
            offsets = sorted(
                rng.uniform(0.0, SECONDS_PER_HOUR - 1.0) for _ in range(profile.cadence)
            )
        else:
            offsets = [(i + 0.5) * step for i in range(profile.cadence)]
        for offset in offsets:
            ts = hour * SECONDS_PER_HOUR + offset
            noise = rng.normalvariate(0.0, profile.noise_std) if profile.noise_std else 0.0
            pm2_5 = max(0.0, base_pm + drift + noise)
            pm10_noise = (
                rng.normalvariate(0.0, profile.noise_std * 1.5) if profile.noise_std else 0.0
            )
            pm10 = max(0.0, base_pm * PM10_RATIO + drift + pm10_noise)
            temperature = temp_base + (rng.normalvariate(0.0, 0.4) if profile.noise_std else 0.0)
            humidity = min(
                100.0,
                max(0.0, hum_base + (rng.normalvariate(0.0, 1.2) if profile.noise_std else 0.0)),
            )
            out.append(
                RawMeasurement(
                    device_id=device_id,
                    ts=ts,
                    pm2_5=pm2_5,
                    pm10=pm10,
                    temperature=temperature,
                    humidity=humidity,
                    network=profile.network,
                )
            )
    return out


@dataclass(frozen=True)
class WeatherGap:
    """No weather record for the site during [start, end)."""

    site_id: str
    start_hour: int
    end_hour: int

    def covers(self, site_id: str, hour: int) -> bool:
        return site_id == self.site_id and self.start_hour <= hour < self.end_hour


def generate_weather(
    site_id: str, hour: int, seed: int, gaps: tuple[WeatherGap, ...] | list[WeatherGap] = ()
) -> WeatherRecord | None:
    """Hourly site weather, or None inside a configured gap window."""
    if any(g.covers(site_id, hour) for g in gaps):
        return None
    rng = random.Random(mix_seed(derive_seed(seed, "weather", site_id), hour))
    temperature = _diurnal_temperature(hour) + rng.normalvariate(0.0, 0.8)
    humidity = min(100.0, max(0.0, _diurnal_humidity(hour) + rng.normalvariate(0.0, 2.5)))
    return WeatherRecord(site_id=site_id, hour=hour, temperature=temperature, humidity=humidity)


@dataclass(frozen=True)
class CollocationRow:
    """One paired hourly observation from a low-cost device beside a reference monitor."""

    raw_pm2_5: float
    temperature: float
    humidity: float
    reference_pm2_5: float


def generate_collocation(
    n: int,
    true_coefficients: tuple[float, float, float, float],
    noise_std: float,
    seed: int,
) -> list[CollocationRow]:
    """Synthetic training pairs: reference = b0 + b1*raw + b2*temp + b3*hum + noise."""
    b0, b1, b2, b3 = true_coefficients
    rng = random.Random(derive_seed(seed, "collocation"))
    rows: list[CollocationRow] = []
    for _ in range(n):
        raw = rng.uniform(5.0, 180.0)
        temp = rng.uniform(15.0, 33.0)
        hum = rng.uniform(25.0, 95.0)
        noise = rng.normalvariate(0.0, noise_std) if noise_std else 0.0
        reference = b0 + b1 * raw + b2 * temp + b3 * hum + noise
        reference = min(1000.0, max(0.0, reference))
        rows.append(CollocationRow(raw, temp, hum, reference))
    return rows
