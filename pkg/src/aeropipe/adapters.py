"""Normalization of third-party input formats to RawMeasurement batches.

Three genuinely different external formats are supported, one per
built-in network (field-by-field layouts in docs/formats.md):

    iqair-like   headered CSV
    metone-like  fixed-width text
    airqo-like   binary frames (the broker wire format)

Malformed rows are dropped and tallied, never fatal; an unparseable
file (bad header, bad magic) raises AdapterError. Every adapter has an
export counterpart so clean batches round-trip exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from . import framing
from .model import AeropipeError, RawMeasurement

IQAIR_COLUMNS = ("device_id", "timestamp", "pm2_5", "pm10", "temperature", "humidity")

# Fixed-width layout: (name, width). Numeric cells are right-justified,
# blank when absent; device ids are left-justified.
METONE_FIELDS = (
    ("device_id", 16),
    ("timestamp", 20),
    ("pm2_5", 12),
    ("pm10", 12),
    ("temperature", 10),
    ("humidity", 10),
)


class AdapterError(AeropipeError):
    """Input not parseable as the declared network format."""


@dataclass
class AdaptReport:
    parsed: int = 0
    malformed: int = 0


def _opt_float(text: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    return float(text)


# --- iqair-like: headered CSV ---


def parse_iqair_csv(text: str, network: str = "iqair-like") -> tuple[list[RawMeasurement], AdaptReport]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != IQAIR_COLUMNS:
        raise AdapterError(f"bad CSV header: expected {','.join(IQAIR_COLUMNS)}")
    report = AdaptReport()
    out: list[RawMeasurement] = []
    for row in reader:
        if not row:
            continue
        try:
            if len(row) != len(IQAIR_COLUMNS):
                raise ValueError(f"expected {len(IQAIR_COLUMNS)} fields, got {len(row)}")
            device_id = row[0].strip()
            if not device_id:
                raise ValueError("empty device_id")
            ts = float(row[1])
            m = RawMeasurement(
                device_id=device_id,
                ts=ts,
                pm2_5=_opt_float(row[2]),
                pm10=_opt_float(row[3]),
                temperature=_opt_float(row[4]),
                humidity=_opt_float(row[5]),
                network=network,
            )
        except ValueError:
            report.malformed += 1
            continue
        out.append(m)
        report.parsed += 1
    return out, report


def export_iqair_csv(batch: list[RawMeasurement]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(IQAIR_COLUMNS)
    for m in batch:
        writer.writerow(
            [
                m.device_id,
                repr(m.ts),
                "" if m.pm2_5 is None else repr(m.pm2_5),
                "" if m.pm10 is None else repr(m.pm10),
                "" if m.temperature is None else repr(m.temperature),
                "" if m.humidity is None else repr(m.humidity),
            ]
        )
    return buf.getvalue()


# --- metone-like: fixed-width text ---


def parse_metone_fixed(text: str, network: str = "metone-like") -> tuple[list[RawMeasurement], AdaptReport]:
    report = AdaptReport()
    out: list[RawMeasurement] = []
    width = sum(w for _, w in METONE_FIELDS)
    for line in text.splitlines():
        if not line.strip():
            continue
        try:
            if len(line) != width:
                raise ValueError(f"expected {width}-char line, got {len(line)}")
            cells: dict[str, str] = {}
            pos = 0
            for name, w in METONE_FIELDS:
                cells[name] = line[pos : pos + w]
                pos += w
            device_id = cells["device_id"].strip()
            if not device_id:
                raise ValueError("empty device_id")
            m = RawMeasurement(
                device_id=device_id,
                ts=float(cells["timestamp"]),
                pm2_5=_opt_float(cells["pm2_5"]),
                pm10=_opt_float(cells["pm10"]),
                temperature=_opt_float(cells["temperature"]),
                humidity=_opt_float(cells["humidity"]),
                network=network,
            )
        except ValueError:
            report.malformed += 1
            continue
        out.append(m)
        report.parsed += 1
    return out, report


def export_metone_fixed(batch: list[RawMeasurement]) -> str:
    """Render readings in the fixed-width layout.

    The format carries fixed precision (0.1 s timestamps, 4 decimal
    places elsewhere); values are rounded to it on the way out, so a
    parse-export cycle is stable after the first rounding.
    """
    lines = []
    for m in batch:

        def num(v: float | None, spec: str, width: int) -> str:
            text = "" if v is None else format(v, spec)
            if len(text) > width:
                raise AdapterError(f"value {text!r} too wide for fixed layout")
            return text.rjust(width)

        device = m.device_id.ljust(METONE_FIELDS[0][1])
        if len(device) > METONE_FIELDS[0][1]:
            raise AdapterError(f"device id too wide for fixed layout: {m.device_id!r}")
        line = (
            device
            + num(m.ts, ".1f", METONE_FIELDS[1][1])
            + num(m.pm2_5, ".4f", METONE_FIELDS[2][1])
            + num(m.pm10, ".4f", METONE_FIELDS[3][1])
            + num(m.temperature, ".4f", METONE_FIELDS[4][1])
            + num(m.humidity, ".4f", METONE_FIELDS[5][1])
        )
        lines.append(line)
    return "\n".join(lines) + ("\n" if lines else "")


# --- airqo-like: binary frames ---


def parse_airqo_frames(data: bytes, network: str = "airqo-like") -> tuple[list[RawMeasurement], AdaptReport]:
    """Decode a concatenation of raw-measurement frames.

    A frame that fails its CRC is dropped whole (its records are tallied
    as one malformed unit) and parsing continues at the next frame
    boundary when the length header is intact.
    """
    report = AdaptReport()
    out: list[RawMeasurement] = []
    fh = io.BytesIO(data)
    while True:
        try:
            frame = framing.read_frame(fh)
        except framing.FramingError as exc:
            raise AdapterError(f"unparseable frame stream: {exc}") from exc
        if frame is None:
            break
        try:
            schema, records, _ = framing.decode_frame(frame)
            if schema != framing.SCHEMA_RAW:
                raise framing.FramingError(f"unexpected schema {schema}")
        except framing.FramingError:
            report.malformed += 1
            continue
        for rec in records:
            out.append(
                rec if rec.network == network
                else RawMeasurement(
                    rec.device_id, rec.ts, rec.pm2_5, rec.pm10,
                    rec.temperature, rec.humidity, network,
                )
            )
            report.parsed += 1
    return out, report


def export_airqo_frames(batch: list[RawMeasurement], batch_size: int = 100) -> bytes:
    out = bytearray()
    for i in range(0, len(batch), batch_size):
        out += framing.encode_batch(batch[i : i + batch_size])
    return bytes(out)


_PARSERS = {
    "iqair-like": lambda data, net: parse_iqair_csv(_as_text(data), net),
    "metone-like": lambda data, net: parse_metone_fixed(_as_text(data), net),
    "airqo-like": lambda data, net: parse_airqo_frames(_as_bytes(data), net),
}


def _as_text(data) -> str:
    return data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data


def _as_bytes(data) -> bytes:
    return data.encode("utf-8") if isinstance(data, str) else bytes(data)


def adapt(data, network: str) -> tuple[list[RawMeasurement], AdaptReport]:
    """Parse an external batch in the network's declared format."""
    parser = _PARSERS.get(network)
    if parser is None:
        raise AdapterError(f"no adapter for network {network!r}")
    return parser(data, network)
