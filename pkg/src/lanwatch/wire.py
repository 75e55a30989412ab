"""Streaming wire protocol: newline-delimited canonical JSON frames.

Every frame is one UTF-8 line ``{"payload":{...},"type":"..."}\\n`` with
sorted keys and no extra whitespace, so encodings are byte-stable and
golden-file testable. Field names are contractual; see docs/WIRE.md.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable

from .scene import Connection, PacketEvent, SceneNode

PROTOCOL_VERSION = 1

# Session frame order: hello, devices*, connections*, (packets|progress)*,
# then exactly one end or error.


class WireError(ValueError):
    pass


class FrameType(str, Enum):
    HELLO = "hello"
    DEVICES = "devices"
    CONNECTIONS = "connections"
    PACKETS = "packets"
    PROGRESS = "progress"
    END = "end"
    ERROR = "error"


@dataclass(frozen=True)
class StreamFrame:
    type: FrameType
    payload: dict[str, Any]


def encode_frame(frame: StreamFrame) -> bytes:
    """Canonical encoding: sorted keys, compact separators, ASCII-escaped."""
    text = json.dumps(
        {"payload": frame.payload, "type": frame.type.value},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=True,
    )
    return text.encode("utf-8") + b"\n"


def decode_frame(line: bytes | str) -> StreamFrame:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise WireError(f"frame is not JSON: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) != {"type", "payload"}:
        raise WireError("frame must be an object with exactly type and payload")
    try:
        frame_type = FrameType(obj["type"])
    except ValueError:
        raise WireError(f"unknown frame type {obj['type']!r}") from None
    if not isinstance(obj["payload"], dict):
        raise WireError("frame payload must be an object")
    return StreamFrame(type=frame_type, payload=obj["payload"])


# ── constructors ─────────────────────────────────────────────────────


def hello_frame(time_start_ns: int | None, time_end_ns: int | None) -> StreamFrame:
    return StreamFrame(
        FrameType.HELLO,
        {
            "version": PROTOCOL_VERSION,
            "time_start": time_start_ns,
            "time_end": time_end_ns,
        },
    )


def node_payload(node: SceneNode) -> dict[str, Any]:
    return {
        "key": str(node.key),
        "cluster": node.cluster,
        "name": node.display_name,
        "position": [node.position[0], node.position[1], node.position[2]],
        "role": node.role.value,
        "vendor": node.vendor,
    }


def devices_frame(nodes: Iterable[SceneNode]) -> StreamFrame:
    return StreamFrame(FrameType.DEVICES, {"nodes": [node_payload(n) for n in nodes]})


def connection_payload(conn: Connection) -> dict[str, Any]:
    return {
        "id": conn.id,
        "a": str(conn.key_a),
        "b": str(conn.key_b),
        "first_ts": conn.first_ts_ns,
        "packets": conn.packets,
    }


def connections_frame(conns: Iterable[Connection]) -> StreamFrame:
    return StreamFrame(
        FrameType.CONNECTIONS, {"connections": [connection_payload(c) for c in conns]}
    )


def event_payload(event: PacketEvent) -> dict[str, Any]:
    return {
        "seq": event.seq,
        "ts": event.timestamp_ns,
        "src": str(event.src),
        "dst": str(event.dst),
        "conn": event.connection_id,
        "app": event.app.value,
        "transport": event.transport.value if event.transport else None,
        "length": event.length,
    }


def packets_frame(events: Iterable[PacketEvent]) -> StreamFrame:
    return StreamFrame(FrameType.PACKETS, {"events": [event_payload(e) for e in events]})


def progress_frame(virtual_time_ns: int, emitted: int) -> StreamFrame:
    return StreamFrame(FrameType.PROGRESS, {"time": virtual_time_ns, "emitted": emitted})


def end_frame(total_events: int) -> StreamFrame:
    return StreamFrame(FrameType.END, {"events": total_events})


def error_frame(code: str, message: str) -> StreamFrame:
    return StreamFrame(FrameType.ERROR, {"code": code, "message": message})
