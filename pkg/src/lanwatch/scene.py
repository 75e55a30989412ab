"""Visual model: clustered node positions, first-contact connections, packet events.

Local devices gather around the home anchor at the origin; remote endpoints
sit on a ring of continent clusters. Connections are undirected and
deduplicated: one line per endpoint pair, created by the pair's earliest
packet. All geometry is deterministic in the node set alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .identity import (
    UNKNOWN_VENDOR,
    DeviceIdentity,
    DeviceKey,
    IdentitySnapshot,
    Role,
    endpoint_key,
)
from .pcap import AppProtocol, PacketRecord, Transport

CLUSTER_HOME = "home"
CLUSTER_UNKNOWN = "unknown"
# Fixed anchor order around the ring; index k places the anchor at 2*pi*k/8.
CLUSTER_RING = ("AF", "AN", "AS", "EU", "NA", "OC", "SA", CLUSTER_UNKNOWN)
CLUSTER_RING_RADIUS = 10.0
NODE_RING_RADIUS = 1.5


class UnknownNode(KeyError):
    pass


@dataclass
class SceneNode:
    key: DeviceKey
    cluster: str
    vendor: str
    display_name: str
    role: Role
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class Connection:
    """Undirected edge, endpoints canonicalized ascending by key string."""

    id: str
    key_a: DeviceKey
    key_b: DeviceKey
    first_ts_ns: int
    packets: int = 0


@dataclass(frozen=True)
class PacketEvent:
    seq: int
    timestamp_ns: int
    src: DeviceKey
    dst: DeviceKey
    connection_id: str
    app: AppProtocol
    transport: Transport | None
    length: int


@dataclass
class Scene:
    nodes: dict[str, SceneNode] = field(default_factory=dict)
    connections: dict[str, Connection] = field(default_factory=dict)
    events: list[PacketEvent] = field(default_factory=list)


def assign_cluster(identity: DeviceIdentity) -> str:
    """home for local devices and the gateway, continent code or unknown otherwise."""
    if identity.role in (Role.LOCAL, Role.GATEWAY):
        return CLUSTER_HOME
    if identity.role is Role.REMOTE and identity.continent is not None:
        return identity.continent.value
    return CLUSTER_UNKNOWN


def cluster_anchor(cluster: str) -> tuple[float, float, float]:
    if cluster == CLUSTER_HOME:
        return (0.0, 0.0, 0.0)
    k = CLUSTER_RING.index(cluster)
    angle = 2.0 * math.pi * k / len(CLUSTER_RING)
    return (
        CLUSTER_RING_RADIUS * math.cos(angle),
        0.0,
        CLUSTER_RING_RADIUS * math.sin(angle),
    )


def layout(nodes: Iterable[SceneNode]) -> dict[str, tuple[float, float, float]]:
    """Deterministic positions: cluster anchor plus a sorted-by-key ring seat.

    Input order never matters; nodes are sorted by key before placement.
    """
    by_cluster: dict[str, list[SceneNode]] = {}
    for node in nodes:
        by_cluster.setdefault(node.cluster, []).append(node)
    positions: dict[str, tuple[float, float, float]] = {}
    for cluster, members in by_cluster.items():
        ax, ay, az = cluster_anchor(cluster)
        members.sort(key=lambda n: str(n.key))
        n = len(members)
        for j, node in enumerate(members):
            angle = 2.0 * math.pi * j / n
            positions[str(node.key)] = (
                ax + NODE_RING_RADIUS * math.cos(angle),
                ay,
                az + NODE_RING_RADIUS * math.sin(angle),
            )
    return positions


def connection_id(key_a: DeviceKey, key_b: DeviceKey) -> str:
    a, b = sorted((str(key_a), str(key_b)))
    return f"{a}|{b}"


def _node_from_identity(key: DeviceKey, identity: DeviceIdentity | None, role_hint: Role) -> SceneNode:
    if identity is not None:
        return SceneNode(
            key=key,
            cluster=assign_cluster(identity),
            vendor=identity.vendor,
            display_name=identity.display_name,
            role=identity.role,
        )
    # No cached identity (stale snapshot): place by the keying role alone.
    cluster = CLUSTER_HOME if role_hint in (Role.LOCAL, Role.GATEWAY) else CLUSTER_UNKNOWN
    return SceneNode(
        key=key,
        cluster=cluster,
        vendor=UNKNOWN_VENDOR,
        display_name=key.value,
        role=role_hint,
    )


def build_scene(records: Iterable[PacketRecord], snapshot: IdentitySnapshot) -> Scene:
    """Fold ordered records into nodes, deduplicated connections, and events.

    Records whose endpoints cannot both be keyed (no MACs at all) carry no
    events; everything else flows through in input order.
    """
    scene = Scene()
    lan = snapshot.lan
    for record in records:
        src = endpoint_key(record.src_mac, record.src_ip, lan)
        dst = endpoint_key(record.dst_mac, record.dst_ip, lan)
        if src is None or dst is None or record.seq is None:
            continue
        for key, role_hint in (src, dst):
            name = str(key)
            if name not in scene.nodes:
                scene.nodes[name] = _node_from_identity(
                    key, snapshot.get(key), role_hint
                )
        conn_id = connection_id(src[0], dst[0])
        conn = scene.connections.get(conn_id)
        if conn is None:
            a, b = sorted((src[0], dst[0]), key=str)
            conn = Connection(
                id=conn_id, key_a=a, key_b=b, first_ts_ns=record.timestamp_ns
            )
            scene.connections[conn_id] = conn
        else:
            conn.first_ts_ns = min(conn.first_ts_ns, record.timestamp_ns)
        conn.packets += 1
        scene.events.append(
            PacketEvent(
                seq=record.seq,
                timestamp_ns=record.timestamp_ns,
                src=src[0],
                dst=dst[0],
                connection_id=conn_id,
                app=record.app,
                transport=record.transport,
                length=record.length,
            )
        )
    positions = layout(scene.nodes.values())
    for name, node in scene.nodes.items():
        node.position = positions[name]
    return scene


def connections_of(scene: Scene, key: DeviceKey) -> set[str]:
    """All connection ids having ``key`` as an endpoint; UnknownNode if absent."""
    name = str(key)
    if name not in scene.nodes:
        raise UnknownNode(name)
    return {
        conn.id
        for conn in scene.connections.values()
        if str(conn.key_a) == name or str(conn.key_b) == name
    }


def iter_event_batches(
    events: Iterable[PacketEvent], batch_size: int
) -> Iterator[list[PacketEvent]]:
    batch: list[PacketEvent] = []
    for event in events:
        batch.append(event)
        if len(batch) >= batch_size:
            yield batch
            batch = []
    if batch:
        yield batch
