"""Binary frame format: hand-built byte oracle, round-trips, corruption."""

import io
import struct
import zlib

import pytest
from hypothesis import given, settings, strategies as st

from aeropipe import framing
from aeropipe.framing import (
    HEADER_SIZE,
    MAGIC,
    SCHEMA_CONSOLIDATED,
    SCHEMA_KEYED,
    SCHEMA_RAW,
    FramingError,
    decode_frame,
    encode_batch,
    encode_keyed,
    read_frame,
)
from aeropipe.model import CalibrationFlag, ConsolidatedRecord, RawMeasurement


def test_frame_bytes_match_hand_assembly():
    """Assemble the expected frame byte by byte, independent of the encoder.

    Record: device "d", network "n", ts=2.0, pm2_5=1.5, all other
    optionals absent (bitmap 0b0001).
    """
    rec = RawMeasurement("d", 2.0, 1.5, None, None, None, "n")

    payload = bytearray()
    payload.append(0b0001)  # presence bitmap: only pm2_5
    payload += struct.pack(">H", 1) + b"d"
    payload += struct.pack(">H", 1) + b"n"
    payload += struct.pack(">d", 2.0)
    payload += struct.pack(">d", 1.5)
    expected = (
        struct.pack(">BBHII", 0xA7, 1, 1, len(payload), zlib.crc32(bytes(payload)))
        + payload
    )

    assert encode_batch([rec]) == bytes(expected)


def _raw_strategy():
    ident = st.text(
        alphabet="abcdefghijklmnopqrstuvwxyz0123456789-_", min_size=1, max_size=24
    )
    opt = st.one_of(
        st.none(),
        st.floats(allow_nan=False, allow_infinity=False, width=64),
    )
    return st.builds(
        RawMeasurement,
        device_id=ident,
        ts=st.floats(min_value=0, max_value=4e9, allow_nan=False),
        pm2_5=opt,
        pm10=opt,
        temperature=opt,
        humidity=opt,
        network=ident,
    )


def _consolidated_strategy():
    ident = st.text(
        alphabet="abcdefghijklmnopqrstuvwxyz0123456789-_", min_size=1, max_size=24
    )
    opt = st.one_of(st.none(), st.floats(allow_nan=False, allow_infinity=False))
    return st.builds(
        ConsolidatedRecord,
        device_id=ident,
        site_id=ident,
        hour=st.integers(min_value=0, max_value=2_000_000),
        raw_pm2_5_mean=st.floats(allow_nan=False, allow_infinity=False),
        raw_pm10_mean=opt,
        sample_count=st.integers(min_value=0, max_value=10_000),
        temperature=opt,
        humidity=opt,
        calibrated_pm2_5=opt,
        calibration_flag=st.sampled_from(list(CalibrationFlag)),
    )


@given(st.lists(_raw_strategy(), min_size=1, max_size=20))
@settings(max_examples=200)
def test_raw_batch_round_trip(records):
    schema, decoded, key = decode_frame(encode_batch(records))
    assert schema == SCHEMA_RAW
    assert key is None
    assert decoded == records


@given(st.lists(_consolidated_strategy(), min_size=1, max_size=20))
@settings(max_examples=200)
def test_consolidated_batch_round_trip(records):
    schema, decoded, key = decode_frame(encode_batch(records))
    assert schema == SCHEMA_CONSOLIDATED
    assert decoded == records


@given(_raw_strategy(), st.text(min_size=1, max_size=40))
def test_keyed_round_trip(record, key):
    schema, decoded, got_key = decode_frame(encode_keyed(key, record))
    assert schema == SCHEMA_KEYED
    assert got_key == key
    assert decoded == [record]


def test_unicode_device_ids_survive():
    rec = RawMeasurement("装置-α", 1.0, None, None, None, None, "n")
    _, decoded, _ = decode_frame(encode_batch([rec]))
    assert decoded[0].device_id == "装置-α"


def test_empty_batch_rejected():
    with pytest.raises(FramingError):
        encode_batch([])


def test_mixed_batch_rejected():
    raw = RawMeasurement("d", 1.0, None, None, None, None, "n")
    con = ConsolidatedRecord("d", "s", 1, 2.0, None, 1, None, None, None, CalibrationFlag.CALIBRATED)
    with pytest.raises(FramingError):
        encode_batch([raw, con])


@given(st.data())
@settings(max_examples=150)
def test_any_single_bit_flip_in_payload_is_detected(data):
    records = data.draw(st.lists(_raw_strategy(), min_size=1, max_size=4))
    frame = bytearray(encode_batch(records))
    bit = data.draw(st.integers(min_value=HEADER_SIZE * 8, max_value=len(frame) * 8 - 1))
    frame[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(FramingError):
        decode_frame(bytes(frame))


def test_bad_magic_rejected():
    frame = bytearray(encode_batch([RawMeasurement("d", 1.0, None, None, None, None, "n")]))
    frame[0] = 0x00
    with pytest.raises(FramingError, match="magic"):
        decode_frame(bytes(frame))


def test_truncated_frame_rejected():
    frame = encode_batch([RawMeasurement("d", 1.0, 5.0, None, None, None, "n")])
    with pytest.raises(FramingError):
        decode_frame(frame[: HEADER_SIZE - 2])
    with pytest.raises(FramingError):
        decode_frame(frame[:-3])


def test_trailing_garbage_after_payload_not_silently_decoded():
    # decode_frame takes exactly one frame; extra payload bytes beyond the
    # declared length are ignored by slicing, but a *declared* length that
    # exceeds the records is a mismatch.
    rec = RawMeasurement("d", 1.0, None, None, None, None, "n")
    frame = bytearray(encode_batch([rec]))
    # grow payload and fix up length + crc, leaving count at 1
    payload = bytes(frame[HEADER_SIZE:]) + b"\x00\x00"
    header = struct.pack(">BBHII", MAGIC, SCHEMA_RAW, 1, len(payload), zlib.crc32(payload))
    with pytest.raises(FramingError, match="length mismatch"):
        decode_frame(header + payload)


def test_read_frame_walks_a_stream():
    recs = [
        RawMeasurement(f"d{i}", float(i), float(i), None, None, None, "n")
        for i in range(5)
    ]
    stream = io.BytesIO(b"".join(encode_batch([r]) for r in recs))
    seen = []
    while (frame := read_frame(stream)) is not None:
        _, records, _ = decode_frame(frame)
        seen.extend(records)
    assert seen == recs


def test_read_frame_torn_tail_raises():
    frame = encode_batch([RawMeasurement("d", 1.0, 5.0, None, None, None, "n")])
    stream = io.BytesIO(frame + frame[: len(frame) // 2])
    assert read_frame(stream) == frame
    with pytest.raises(FramingError, match="torn"):
        read_frame(stream)


def test_read_frame_clean_eof_returns_none():
    assert read_frame(io.BytesIO(b"")) is None
