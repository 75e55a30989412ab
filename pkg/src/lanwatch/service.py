"""Query sessions: full pipeline ingest, scene streaming, timestamp-paced replay.

A session's frames always follow the wire grammar: hello first, then the
complete topology (devices, connections), then packet events paced by their
original timestamp gaps divided by the query's time scale. Slow consumers
pause the replay clock rather than losing pacing fidelity or dropping frames.
"""

from __future__ import annotations

import asyncio
import io
import threading
import uuid
from dataclasses import dataclass, field
from typing import Any, AsyncIterator, Iterable, Sequence

from .identity import DeviceKey, InvalidIp, InvalidMac, classify_record
from .pcap import (
    PacketRecord,
    Scope,
    TruncatedFrame,
    decode_frame as decode_capture_frame,
    parse_capture,
)
from .scene import PacketEvent, Scene, build_scene, iter_event_batches
from .store import InvalidQuery, TrafficQuery, TrafficStore
from .wire import (
    StreamFrame,
    connections_frame,
    devices_frame,
    end_frame,
    hello_frame,
    packets_frame,
    progress_frame,
)

PACKET_BATCH_LIMIT = 256
TOPOLOGY_BATCH_LIMIT = 512
SESSION_BUFFER_FRAMES = 64
# Lateness beyond this rebases the replay origin (clock pause, not a burst).
PAUSE_REBASE_SLACK = 0.05


@dataclass
class IngestReport:
    frames: int
    records: int
    malformed: int
    new_devices: int
    truncated: bool

    def to_payload(self) -> dict[str, Any]:
        return {
            "frames": self.frames,
            "records": self.records,
            "malformed": self.malformed,
            "new_devices": self.new_devices,
            "truncated": self.truncated,
        }


@dataclass
class SessionState:
    session_id: str
    query: TrafficQuery
    origin_wall: float | None = None
    virtual_ts_ns: int | None = None
    emitted: int = 0


class SessionRegistry:
    """Live sessions, inspectable from other threads (tests, admin surfaces)."""

    def __init__(self) -> None:
        self._sessions: dict[str, SessionState] = {}
        self._lock = threading.Lock()

    def register(self, state: SessionState) -> None:
        with self._lock:
            self._sessions[state.session_id] = state

    def unregister(self, session_id: str) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    def active(self) -> list[SessionState]:
        with self._lock:
            return list(self._sessions.values())

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)


def pace_events(
    events: Sequence[PacketEvent], time_scale: float
) -> list[tuple[float, list[PacketEvent]]]:
    """Emission schedule: (seconds after replay origin, coalesced batch).

    Events sharing a timestamp always land in one batch. Scale 0 emits
    everything immediately; scale s spaces batches by original gap / s.
    """
    events = list(events)
    if not events:
        return []
    if time_scale == 0:
        return [(0.0, events)]
    origin_ts = events[0].timestamp_ns
    schedule: list[tuple[float, list[PacketEvent]]] = []
    for event in events:
        if schedule and schedule[-1][1][0].timestamp_ns == event.timestamp_ns:
            schedule[-1][1].append(event)
        else:
            offset = (event.timestamp_ns - origin_ts) / 1e9 / time_scale
            schedule.append((offset, [event]))
    return schedule


def parse_query_payload(payload: dict[str, Any]) -> TrafficQuery:
    """Build a TrafficQuery from the client's JSON message (strict fields)."""
    if not isinstance(payload, dict):
        raise InvalidQuery("query must be a JSON object")
    allowed = {"from", "to", "device", "protocols", "scopes", "limit", "scale"}
    unknown = set(payload) - allowed
    if unknown:
        raise InvalidQuery(f"unknown query fields: {sorted(unknown)}")

    def opt_int(name: str) -> int | None:
        value = payload.get(name)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidQuery(f"{name} must be an integer nanosecond timestamp")
        return value

    device = None
    if payload.get("device") is not None:
        try:
            device = DeviceKey.parse(str(payload["device"]))
        except (ValueError, InvalidMac, InvalidIp) as exc:
            raise InvalidQuery(f"bad device key: {exc}") from exc
    protocols = None
    if payload.get("protocols") is not None:
        if not isinstance(payload["protocols"], list):
            raise InvalidQuery("protocols must be a list of protocol names")
        protocols = frozenset(str(p) for p in payload["protocols"])
    scopes = None
    if payload.get("scopes") is not None:
        if not isinstance(payload["scopes"], list):
            raise InvalidQuery("scopes must be a list of scope names")
        try:
            scopes = frozenset(Scope(s) for s in payload["scopes"])
        except ValueError as exc:
            raise InvalidQuery(str(exc)) from exc
    limit = payload.get("limit")
    if limit is not None and (isinstance(limit, bool) or not isinstance(limit, int)):
        raise InvalidQuery("limit must be an integer")
    scale = payload.get("scale", 0.0)
    if isinstance(scale, bool) or not isinstance(scale, (int, float)):
        raise InvalidQuery("scale must be a number")

    query = TrafficQuery(
        start_ns=opt_int("from"),
        end_ns=opt_int("to"),
        device=device,
        protocols=protocols,
        scopes=scopes,
        limit=limit,
        time_scale=float(scale),
    )
    query.validate()
    return query


class StreamService:
    """Ties the store to any number of streaming sessions plus serialized ingest."""

    def __init__(self, store: TrafficStore):
        self.store = store
        self.sessions = SessionRegistry()
        self._ingest_lock = threading.Lock()

    # ── ingest ───────────────────────────────────────────────────────

    def ingest_capture(self, data: bytes) -> IngestReport:
        """parse -> decode -> scope -> append, all-or-nothing on header failure.

        A mid-file truncation keeps the cleanly parsed prefix and flags the
        report. Raises CaptureError subclasses for unusable inputs.
        """
        with self._ingest_lock:
            meta, frames = parse_capture(io.BytesIO(data))
            records: list[PacketRecord] = []
            frame_count = 0
            truncated = False
            try:
                for frame in frames:
                    frame_count += 1
                    record = decode_capture_frame(frame, meta)
                    record.scope = classify_record(record, self.store.lan)
                    records.append(record)
            except TruncatedFrame:
                truncated = True
            devices_before = len(self.store.identity)
            receipt = self.store.append_batch(records)
            return IngestReport(
                frames=frame_count,
                records=receipt.count,
                malformed=sum(1 for r in records if r.malformed),
                new_devices=len(self.store.identity) - devices_before,
                truncated=truncated,
            )

    # ── streaming ────────────────────────────────────────────────────

    async def handle_query(self, query: TrafficQuery) -> AsyncIterator[StreamFrame]:
        """The session frame stream for one query.

        The hello frame is emitted before any scanning starts, so the first
        byte reaches the client immediately regardless of result size. The
        full topology precedes the first packet event.
        """
        state = SessionState(session_id=uuid.uuid4().hex, query=query)
        self.sessions.register(state)
        try:
            bounds = self.store.time_bounds()
            yield hello_frame(*(bounds if bounds else (None, None)))

            records, identities = self.store.snapshot_view(query)
            scene: Scene = await asyncio.to_thread(build_scene, records, identities)

            for chunk in _at_least_one(
                list(scene.nodes.values()), TOPOLOGY_BATCH_LIMIT
            ):
                yield devices_frame(chunk)
            for chunk in _at_least_one(
                list(scene.connections.values()), TOPOLOGY_BATCH_LIMIT
            ):
                yield connections_frame(chunk)

            loop = asyncio.get_running_loop()
            origin = loop.time()
            state.origin_wall = origin
            for offset, batch in pace_events(scene.events, query.time_scale):
                deadline = origin + offset
                now = loop.time()
                if now < deadline:
                    await asyncio.sleep(deadline - now)
                elif now - deadline > PAUSE_REBASE_SLACK:
                    # We were held back (slow client); resume without bursting.
                    origin += now - deadline
                for chunk in iter_event_batches(batch, PACKET_BATCH_LIMIT):
                    state.emitted += len(chunk)
                    state.virtual_ts_ns = chunk[-1].timestamp_ns
                    yield packets_frame(chunk)
                    yield progress_frame(chunk[-1].timestamp_ns, state.emitted)
            yield end_frame(state.emitted)
        finally:
            self.sessions.unregister(state.session_id)


def _at_least_one(items: list, batch_size: int) -> Iterable[list]:
    if not items:
        yield []
        return
    for start in range(0, len(items), batch_size):
        yield items[start : start + batch_size]
