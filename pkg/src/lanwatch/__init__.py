"""Home-network capture backend: decode, identify, store, and replay-stream traffic."""

from .identity import (
    Continent,
    DeviceIdentity,
    DeviceKey,
    GeoRegistry,
    IdentityCache,
    KeyKind,
    LanConfig,
    OuiRegistry,
    Role,
    classify_scope,
)
from .pcap import (
    AppProtocol,
    CaptureMeta,
    PacketRecord,
    RawFrame,
    Scope,
    Transport,
    decode_frame,
    guess_app_protocol,
    parse_capture,
)
from .scene import Scene, build_scene, connections_of, layout
from .service import IngestReport, StreamService, pace_events
from .store import NodeAnalytics, TrafficQuery, TrafficStore
from .wire import FrameType, StreamFrame, decode_frame as decode_wire_frame, encode_frame as encode_wire_frame

__version__ = "0.1.0"

__all__ = [
    "AppProtocol",
    "CaptureMeta",
    "Continent",
    "DeviceIdentity",
    "DeviceKey",
    "FrameType",
    "GeoRegistry",
    "IdentityCache",
    "IngestReport",
    "KeyKind",
    "LanConfig",
    "NodeAnalytics",
    "OuiRegistry",
    "PacketRecord",
    "RawFrame",
    "Role",
    "Scene",
    "Scope",
    "StreamFrame",
    "StreamService",
    "TrafficQuery",
    "TrafficStore",
    "Transport",
    "build_scene",
    "classify_scope",
    "connections_of",
    "decode_frame",
    "decode_wire_frame",
    "encode_wire_frame",
    "guess_app_protocol",
    "layout",
    "pace_events",
    "parse_capture",
]
