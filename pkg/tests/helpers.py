"""Shared builders for tests: synthetic records, wire frames, random traffic."""

from __future__ import annotations

import random
from pathlib import Path

from lanwatch.pcap import AppProtocol, PacketRecord, Scope, Transport, guess_app_protocol
from lanwatch.identity import LanConfig, classify_record
from lanwatch.wire import FrameType, StreamFrame

FIXTURES = Path(__file__).resolve().parent / "fixtures"

LOCAL_MACS = [
    "f0:18:98:aa:01:01",
    "8c:de:52:bb:02:02",
    "94:9f:3e:cc:03:03",
    "24:0a:c4:dd:04:04",
    "b8:27:eb:ee:05:05",
    "50:c7:bf:11:22:01",
]
LOCAL_IPS = [
    "192.168.1.10",
    "192.168.1.11",
    "192.168.1.12",
    "192.168.1.13",
    "192.168.1.14",
    "10.0.0.7",
]
REMOTE_IPS = [
    "8.8.8.8",
    "1.1.1.1",
    "142.250.64.78",
    "114.114.114.114",
    "200.1.2.3",
    "41.1.2.3",
    "185.199.108.153",
    "93.184.212.174",
    "2606:4700:4700::1111",
]
GROUP_IPS = ["224.0.0.251", "239.255.255.250", "255.255.255.255"]
GATEWAY_MAC = "50:c7:bf:11:22:01"

_PORT_CHOICES = [53, 80, 443, 123, 1883, 5353, 22, 1900, 40000, 51515, 8080]


def make_record(
    ts_ns: int = 1_700_000_000_000_000_000,
    src_mac: str | None = "f0:18:98:aa:01:01",
    dst_mac: str | None = GATEWAY_MAC,
    src_ip: str | None = "192.168.1.10",
    dst_ip: str | None = "8.8.8.8",
    transport: Transport | None = Transport.UDP,
    src_port: int | None = 50000,
    dst_port: int | None = 53,
    length: int = 96,
    malformed: bool = False,
    seq: int | None = None,
    ip_version: int | None = None,
) -> PacketRecord:
    if ip_version is None and src_ip is not None:
        ip_version = 6 if ":" in src_ip else 4
    if transport not in (Transport.TCP, Transport.UDP):
        src_port = dst_port = None
    app = guess_app_protocol(transport, src_port, dst_port)
    return PacketRecord(
        timestamp_ns=ts_ns,
        src_mac=src_mac,
        dst_mac=dst_mac,
        ether_type=0x0800 if ip_version == 4 else (0x86DD if ip_version == 6 else 0x0806),
        ip_version=ip_version if src_ip else None,
        src_ip=src_ip,
        dst_ip=dst_ip,
        transport=transport,
        src_port=src_port,
        dst_port=dst_port,
        app=app,
        length=length,
        malformed=malformed,
        seq=seq,
    )


def random_record(rng: random.Random, ts_ns: int) -> PacketRecord:
    """A plausible record: random endpoints, transports, and table/ephemeral ports."""
    shape = rng.random()
    if shape < 0.05:  # ARP-ish, no IP layer
        return make_record(
            ts_ns=ts_ns,
            src_mac=rng.choice(LOCAL_MACS),
            dst_mac=rng.choice(LOCAL_MACS + ["ff:ff:ff:ff:ff:ff"]),
            src_ip=None,
            dst_ip=None,
            transport=None,
            length=rng.randrange(60, 100),
        )
    if shape < 0.65:  # local <-> remote, either direction
        local_mac, local_ip = rng.choice(list(zip(LOCAL_MACS, LOCAL_IPS)))
        remote_ip = rng.choice(REMOTE_IPS)
        outbound = rng.random() < 0.5
        src_mac, dst_mac = (local_mac, GATEWAY_MAC) if outbound else (GATEWAY_MAC, local_mac)
        src_ip, dst_ip = (local_ip, remote_ip) if outbound else (remote_ip, local_ip)
    elif shape < 0.85:  # internal chatter
        (src_mac, src_ip), (dst_mac, dst_ip) = rng.sample(
            list(zip(LOCAL_MACS, LOCAL_IPS)), 2
        )
    elif shape < 0.95:  # multicast/broadcast
        src_mac, src_ip = rng.choice(list(zip(LOCAL_MACS, LOCAL_IPS)))
        dst_ip = rng.choice(GROUP_IPS)
        dst_mac = "01:00:5e:00:00:fb" if dst_ip.startswith("224.") else "ff:ff:ff:ff:ff:ff"
    else:  # external-to-external (mirror port artifact)
        src_ip, dst_ip = rng.sample(REMOTE_IPS[:6], 2)
        src_mac, dst_mac = GATEWAY_MAC, "d4:81:d7:99:88:77"
    if ":" in src_ip or ":" in dst_ip:
        # Keep versions aligned; v6 remotes only pair with v6-capable sides.
        if ":" not in src_ip:
            src_ip = "fe80::1"
        if ":" not in dst_ip:
            dst_ip = "fe80::2"
    transport = rng.choice(
        [Transport.TCP, Transport.UDP, Transport.TCP, Transport.UDP, Transport.ICMP, Transport.OTHER]
    )
    sport = rng.choice(_PORT_CHOICES)
    dport = rng.choice(_PORT_CHOICES)
    return make_record(
        ts_ns=ts_ns,
        src_mac=src_mac,
        dst_mac=dst_mac,
        src_ip=src_ip,
        dst_ip=dst_ip,
        transport=transport,
        src_port=sport,
        dst_port=dport,
        length=rng.randrange(60, 1500),
    )


def random_records(
    rng: random.Random,
    n: int,
    lan: LanConfig,
    start_ts: int = 1_700_000_000_000_000_000,
    max_step_ns: int = 50_000_000,
    duplicate_ts_rate: float = 0.1,
) -> list[PacketRecord]:
    """Scope-classified records with nondecreasing (sometimes equal) timestamps."""
    records = []
    ts = start_ts
    for _ in range(n):
        if rng.random() > duplicate_ts_rate:
            ts += rng.randrange(1, max_step_ns)
        record = random_record(rng, ts)
        record.scope = classify_record(record, lan)
        records.append(record)
    return records


def random_wire_frame(rng: random.Random) -> StreamFrame:
    """A randomized frame of a random type with realistic payload shapes."""
    def key() -> str:
        if rng.random() < 0.5:
            return "mac:" + ":".join(f"{rng.randrange(256):02x}" for _ in range(6))
        return f"ip:{rng.randrange(1, 224)}.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(1, 255)}"

    kind = rng.choice(list(FrameType))
    if kind is FrameType.HELLO:
        payload = {
            "version": 1,
            "time_start": rng.randrange(10**18) if rng.random() < 0.8 else None,
            "time_end": rng.randrange(10**18) if rng.random() < 0.8 else None,
        }
    elif kind is FrameType.DEVICES:
        payload = {
            "nodes": [
                {
                    "key": key(),
                    "cluster": rng.choice(["home", "NA", "EU", "AS", "unknown"]),
                    "name": rng.choice(["device ab:cd", "Sonos, Inc. 03:03", "8.8.8.8", "group é"]),
                    "position": [round(rng.uniform(-12, 12), 6), 0.0, round(rng.uniform(-12, 12), 6)],
                    "role": rng.choice(["LOCAL", "REMOTE", "GATEWAY", "SPECIAL"]),
                    "vendor": rng.choice(["UNKNOWN", "Apple, Inc.", "Espressif Inc."]),
                }
                for _ in range(rng.randrange(0, 4))
            ]
        }
    elif kind is FrameType.CONNECTIONS:
        payload = {
            "connections": [
                {
                    "id": f"{key()}|{key()}",
                    "a": key(),
                    "b": key(),
                    "first_ts": rng.randrange(10**18),
                    "packets": rng.randrange(1, 10**6),
                }
                for _ in range(rng.randrange(0, 4))
            ]
        }
    elif kind is FrameType.PACKETS:
        payload = {
            "events": [
                {
                    "seq": rng.randrange(10**9),
                    "ts": rng.randrange(10**18),
                    "src": key(),
                    "dst": key(),
                    "conn": f"{key()}|{key()}",
                    "app": rng.choice(["DNS", "HTTP", "HTTPS", "MQTT", "OTHER"]),
                    "transport": rng.choice(["TCP", "UDP", "ICMP", "ICMPv6", "OTHER", None]),
                    "length": rng.randrange(60, 9000),
                }
                for _ in range(rng.randrange(0, 5))
            ]
        }
    elif kind is FrameType.PROGRESS:
        payload = {"time": rng.randrange(10**18), "emitted": rng.randrange(10**7)}
    elif kind is FrameType.END:
        payload = {"events": rng.randrange(10**7)}
    else:
        payload = {"code": rng.choice(["invalid_query", "internal"]), "message": "boom"}
    return StreamFrame(kind, payload)
