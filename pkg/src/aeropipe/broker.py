"""Embedded append-only publish-subscribe log with consumer-group offsets.

One log file per topic holds framed record batches; offsets within a
topic count batches, starting at 0, and never reorder. Consumer groups
track their own committed positions in sidecar files, so delivery is
at-least-once: a consumer that crashes between consume and commit sees
the same batches again on restart.

Files under ``<data-dir>/broker/``:

    <topic>.log             framed batches (see framing module)
    <topic>.<group>.offset  committed offset, ASCII decimal + newline

Appends to a topic are serialized by a per-topic lock and flushed (and
by default fsynced) before publish returns. Reads use independent file
handles and never block producers. A torn frame at the tail of a log
(crash mid-write, before the publish was acknowledged) is truncated
away on open.
"""

from __future__ import annotations

import io
import logging
import os
import threading
from pathlib import Path

from . import framing
from .model import AeropipeError

logger = logging.getLogger(__name__)


class BrokerError(AeropipeError):
    pass


class UnknownTopicError(BrokerError):
    pass


class OffsetError(BrokerError):
    """Commit beyond log end or regressing an already-committed offset."""


class _TopicState:
    def __init__(self, log_path: Path) -> None:
        self.log_path = log_path
        self.lock = threading.Lock()
        self.frame_index: list[tuple[int, int]] = []  # (byte offset, byte length)
        self.latest: dict[str, object] = {}
        self.append_fh: io.BufferedWriter | None = None

    @property
    def length(self) -> int:
        return len(self.frame_index)


class Broker:
    """Single-node topic log. Topics auto-create on first publish;
    consumer groups auto-register at offset 0."""

    def __init__(self, data_dir, *, fsync: bool = True) -> None:
        self.root = Path(data_dir) / "broker"
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._topics: dict[str, _TopicState] = {}
        self._offsets: dict[tuple[str, str], int] = {}
        self._registry_lock = threading.Lock()
        for log_path in sorted(self.root.glob("*.log")):
            self._open_topic(log_path.stem)

    # --- topic lifecycle ---

    def _open_topic(self, topic: str) -> _TopicState:
        state = _TopicState(self.root / f"{topic}.log")
        if state.log_path.exists():
            self._scan_log(state)
        state.append_fh = open(state.log_path, "ab")
        self._topics[topic] = state
        return state

    def _scan_log(self, state: _TopicState) -> None:
        """Rebuild the frame index; truncate a torn (unacknowledged) tail."""
        good_end = 0
        with open(state.log_path, "rb") as fh:
            while True:
                pos = fh.tell()
                try:
                    frame = framing.read_frame(fh)
                except framing.FramingError:
                    logger.warning(
                        "truncating torn tail of %s at byte %d", state.log_path, pos
                    )
                    break
                if frame is None:
                    good_end = pos
                    break
                state.frame_index.append((pos, len(frame)))
                good_end = fh.tell()
                schema = frame[1]
                if schema == framing.SCHEMA_KEYED:
                    _, records, key = framing.decode_frame(frame)
                    state.latest[key] = records[0]
        if good_end < state.log_path.stat().st_size:
            with open(state.log_path, "r+b") as fh:
                fh.truncate(good_end)

    def _topic(self, topic: str) -> _TopicState:
        state = self._topics.get(topic)
        if state is None:
            raise UnknownTopicError(f"unknown topic: {topic!r}")
        return state

    def _topic_or_create(self, topic: str) -> _TopicState:
        state = self._topics.get(topic)
        if state is not None:
            return state
        with self._registry_lock:
            state = self._topics.get(topic)
            if state is None:
                if not topic or any(c in topic for c in "/\\\t\n"):
                    raise BrokerError(f"invalid topic name: {topic!r}")
                state = self._open_topic(topic)
            return state

    def topics(self) -> list[str]:
        return sorted(self._topics)

    # --- producing ---

    def publish(self, topic: str, records) -> int:
        """Append one batch; returns its offset. Durable before return."""
        if not records:
            raise BrokerError("empty batch rejected")
        frame = framing.encode_batch(records)
        return self._append(self._topic_or_create(topic), frame)

    def update_latest(self, topic: str, key: str, record) -> int:
        """Append a keyed record; the topic's latest view maps each key to
        the most recently written record."""
        frame = framing.encode_keyed(key, record)
        state = self._topic_or_create(topic)
        offset = self._append(state, frame)
        return offset

    def _append(self, state: _TopicState, frame: bytes) -> int:
        with state.lock:
            fh = state.append_fh
            assert fh is not None
            pos = fh.tell()
            fh.write(frame)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
            state.frame_index.append((pos, len(frame)))
            if frame[1] == framing.SCHEMA_KEYED:
                _, records, key = framing.decode_frame(frame)
                state.latest[key] = records[0]
            return len(state.frame_index) - 1

    # --- consuming ---

    def end_offset(self, topic: str) -> int:
        return self._topic(topic).length

    def committed(self, topic: str, group: str) -> int:
        self._topic(topic)
        key = (topic, group)
        cached = self._offsets.get(key)
        if cached is not None:
            return cached
        path = self._offset_path(topic, group)
        value = 0
        if path.exists():
            value = int(path.read_text().strip() or 0)
        self._offsets[key] = value
        return value

    def consume(self, topic: str, group: str, max_batches: int) -> tuple[list[list], int]:
        """Batches in offset order from the group's committed position.

        Returns (batches, next_offset); the committed offset is NOT
        advanced; call commit(next_offset) once processing is durable.
        """
        state = self._topic(topic)
        start = self.committed(topic, group)
        with state.lock:
            index = list(state.frame_index[start : start + max_batches])
        batches: list[list] = []
        if index:
            with open(state.log_path, "rb") as fh:
                for pos, length in index:
                    fh.seek(pos)
                    frame = fh.read(length)
                    _, records, _ = framing.decode_frame(frame)
                    batches.append(records)
        return batches, start + len(batches)

    def commit(self, topic: str, group: str, offset: int) -> None:
        state = self._topic(topic)
        if offset > state.length:
            raise OffsetError(
                f"commit {offset} beyond end of {topic!r} (length {state.length})"
            )
        current = self.committed(topic, group)
        if offset < current:
            raise OffsetError(
                f"regressing commit for {topic!r}/{group!r}: {offset} < {current}"
            )
        path = self._offset_path(topic, group)
        tmp = path.with_suffix(".offset.tmp")
        with open(tmp, "w", encoding="ascii") as fh:
            fh.write(f"{offset}\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        self._offsets[(topic, group)] = offset

    def _offset_path(self, topic: str, group: str) -> Path:
        if not group or any(c in group for c in "/\\\t\n"):
            raise BrokerError(f"invalid group name: {group!r}")
        return self.root / f"{topic}.{group}.offset"

    # --- compacted latest view ---

    def latest(self, topic: str, key: str):
        state = self._topic(topic)
        with state.lock:
            if key not in state.latest:
                raise BrokerError(f"no latest record for key {key!r} in {topic!r}")
            return state.latest[key]

    def latest_view(self, topic: str) -> dict[str, object]:
        state = self._topic(topic)
        with state.lock:
            return dict(state.latest)

    def close(self) -> None:
        for state in self._topics.values():
            with state.lock:
                if state.append_fh is not None:
                    state.append_fh.flush()
                    os.fsync(state.append_fh.fileno())
                    state.append_fh.close()
                    state.append_fh = None

    def __enter__(self) -> "Broker":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
