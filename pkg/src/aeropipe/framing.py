"""Compact binary framing for record batches.

Frame layout, all integers big-endian:

    magic      u8   0xA7
    schema     u8   record type (RAW=1, CONSOLIDATED=2, KEYED=3)
    count      u16  records in the batch
    length     u32  payload byte length
    crc32      u32  CRC32 (IEEE) of the payload
    payload    length bytes

The payload is the concatenation of the batch's records. Each record
starts with a presence bitmap byte for its optional fields, followed by
the fields in fixed order; strings are u16-length-prefixed UTF-8 and
floats are IEEE-754 binary64. CRC failures, bad magic, and truncated
frames all raise FramingError on read.
"""

from __future__ import annotations

import struct
import zlib
from typing import BinaryIO, Sequence

from .model import (
    AeropipeError,
    CalibrationFlag,
    ConsolidatedRecord,
    RawMeasurement,
)

MAGIC = 0xA7
SCHEMA_RAW = 1
SCHEMA_CONSOLIDATED = 2
SCHEMA_KEYED = 3

HEADER = struct.Struct(">BBHII")
HEADER_SIZE = HEADER.size

_F64 = struct.Struct(">d")
_I64 = struct.Struct(">q")
_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")

_FLAG_ORDINALS = {flag: i for i, flag in enumerate(CalibrationFlag)}
_FLAGS_BY_ORDINAL = list(CalibrationFlag)


class FramingError(AeropipeError):
    """Malformed, truncated, or corrupt frame."""


def _put_str(out: bytearray, value: str) -> None:
    data = value.encode("utf-8")
    if len(data) > 0xFFFF:
        raise FramingError(f"string field too long ({len(data)} bytes)")
    out += _U16.pack(len(data))
    out += data


def _get_str(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = _U16.unpack_from(buf, pos)
    pos += 2
    return buf[pos : pos + n].decode("utf-8"), pos + n


def _put_opt_floats(out: bytearray, values: Sequence[float | None]) -> int:
    bitmap = 0
    for i, v in enumerate(values):
        if v is not None:
            bitmap |= 1 << i
    for v in values:
        if v is not None:
            out += _F64.pack(v)
    return bitmap


def _encode_raw(rec: RawMeasurement) -> bytes:
    out = bytearray()
    tail = bytearray()
    bitmap = _put_opt_floats(tail, (rec.pm2_5, rec.pm10, rec.temperature, rec.humidity))
    out.append(bitmap)
    _put_str(out, rec.device_id)
    _put_str(out, rec.network)
    out += _F64.pack(rec.ts)
    out += tail
    return bytes(out)


def _decode_raw(buf: bytes, pos: int) -> tuple[RawMeasurement, int]:
    bitmap = buf[pos]
    pos += 1
    device_id, pos = _get_str(buf, pos)
    network, pos = _get_str(buf, pos)
    (ts,) = _F64.unpack_from(buf, pos)
    pos += 8
    vals: list[float | None] = []
    for i in range(4):
        if bitmap & (1 << i):
            (v,) = _F64.unpack_from(buf, pos)
            pos += 8
            vals.append(v)
        else:
            vals.append(None)
    return RawMeasurement(device_id, ts, vals[0], vals[1], vals[2], vals[3], network), pos


def _encode_consolidated(rec: ConsolidatedRecord) -> bytes:
    out = bytearray()
    tail = bytearray()
    bitmap = _put_opt_floats(
        tail, (rec.raw_pm10_mean, rec.temperature, rec.humidity, rec.calibrated_pm2_5)
    )
    out.append(bitmap)
    _put_str(out, rec.device_id)
    _put_str(out, rec.site_id)
    out += _I64.pack(rec.hour)
    out += _F64.pack(rec.raw_pm2_5_mean)
    out += _U32.pack(rec.sample_count)
    out.append(_FLAG_ORDINALS[rec.calibration_flag])
    out += tail
    return bytes(out)


def _decode_consolidated(buf: bytes, pos: int) -> tuple[ConsolidatedRecord, int]:
    bitmap = buf[pos]
    pos += 1
    device_id, pos = _get_str(buf, pos)
    site_id, pos = _get_str(buf, pos)
    (hour,) = _I64.unpack_from(buf, pos)
    pos += 8
    (pm2_5,) = _F64.unpack_from(buf, pos)
    pos += 8
    (sample_count,) = _U32.unpack_from(buf, pos)
    pos += 4
    flag_ord = buf[pos]
    pos += 1
    if flag_ord >= len(_FLAGS_BY_ORDINAL):
        raise FramingError(f"unknown calibration flag ordinal {flag_ord}")
    vals: list[float | None] = []
    for i in range(4):
        if bitmap & (1 << i):
            (v,) = _F64.unpack_from(buf, pos)
            pos += 8
            vals.append(v)
        else:
            vals.append(None)
    rec = ConsolidatedRecord(
        device_id=device_id,
        site_id=site_id,
        hour=hour,
        raw_pm2_5_mean=pm2_5,
        raw_pm10_mean=vals[0],
        sample_count=sample_count,
        temperature=vals[1],
        humidity=vals[2],
        calibrated_pm2_5=vals[3],
        calibration_flag=_FLAGS_BY_ORDINAL[flag_ord],
    )
    return rec, pos


def _schema_of(record) -> int:
    if isinstance(record, RawMeasurement):
        return SCHEMA_RAW
    if isinstance(record, ConsolidatedRecord):
        return SCHEMA_CONSOLIDATED
    raise FramingError(f"unframeable record type: {type(record).__name__}")


def encode_batch(records: Sequence) -> bytes:
    """Frame a non-empty batch of same-type records."""
    if not records:
        raise FramingError("empty batch")
    if len(records) > 0xFFFF:
        raise FramingError(f"batch too large ({len(records)} records)")
    schema = _schema_of(records[0])
    payload = bytearray()
    for rec in records:
        if _schema_of(rec) != schema:
            raise FramingError("mixed record types in one batch")
        payload += _encode_raw(rec) if schema == SCHEMA_RAW else _encode_consolidated(rec)
    return _with_header(schema, len(records), bytes(payload))


def encode_keyed(key: str, record) -> bytes:
    """Frame a single keyed record (compacted latest-value topics)."""
    inner_schema = _schema_of(record)
    payload = bytearray()
    _put_str(payload, key)
    payload.append(inner_schema)
    payload += _encode_raw(record) if inner_schema == SCHEMA_RAW else _encode_consolidated(record)
    return _with_header(SCHEMA_KEYED, 1, bytes(payload))


def _with_header(schema: int, count: int, payload: bytes) -> bytes:
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return HEADER.pack(MAGIC, schema, count, len(payload), crc) + payload


def decode_frame(data: bytes) -> tuple[int, list, str | None]:
    """Decode one full frame; returns (schema, records, key).

    ``key`` is None except for KEYED frames.
    """
    if len(data) < HEADER_SIZE:
        raise FramingError(f"truncated header ({len(data)} bytes)")
    magic, schema, count, length, crc = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FramingError(f"bad magic byte 0x{magic:02X}")
    payload = data[HEADER_SIZE : HEADER_SIZE + length]
    if len(payload) != length:
        raise FramingError(f"truncated payload ({len(payload)} of {length} bytes)")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FramingError("CRC mismatch: payload corrupt")
    key: str | None = None
    records: list = []
    pos = 0
    try:
        if schema == SCHEMA_KEYED:
            if count != 1:
                raise FramingError(f"keyed frame must hold 1 record, has {count}")
            key, pos = _get_str(payload, pos)
            inner = payload[pos]
            pos += 1
            if inner == SCHEMA_RAW:
                rec, pos = _decode_raw(payload, pos)
            elif inner == SCHEMA_CONSOLIDATED:
                rec, pos = _decode_consolidated(payload, pos)
            else:
                raise FramingError(f"unknown inner schema {inner}")
            records.append(rec)
        elif schema in (SCHEMA_RAW, SCHEMA_CONSOLIDATED):
            decode = _decode_raw if schema == SCHEMA_RAW else _decode_consolidated
            for _ in range(count):
                rec, pos = decode(payload, pos)
                records.append(rec)
        else:
            raise FramingError(f"unknown schema byte {schema}")
    except (struct.error, IndexError) as exc:
        raise FramingError(f"malformed payload: {exc}") from exc
    if pos != length:
        raise FramingError(f"payload length mismatch: decoded {pos} of {length} bytes")
    return schema, records, key


def read_frame(fh: BinaryIO) -> bytes | None:
    """Read the next raw frame from a file, or None at clean EOF.

    Raises FramingError when the file ends mid-frame (torn tail).
    """
    header = fh.read(HEADER_SIZE)
    if not header:
        return None
    if len(header) < HEADER_SIZE:
        raise FramingError("torn frame: truncated header at end of file")
    magic, _, _, length, _ = HEADER.unpack(header)
    if magic != MAGIC:
        raise FramingError(f"bad magic byte 0x{magic:02X}")
    payload = fh.read(length)
    if len(payload) < length:
        raise FramingError("torn frame: truncated payload at end of file")
    return header + payload
