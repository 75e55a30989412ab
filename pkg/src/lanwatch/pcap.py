"""Classic-pcap decoding: capture files -> link-layer frames -> per-packet feature records.

Only the classic libpcap file layout is handled (both byte orders, micro- and
nanosecond timestamp magics). pcapng is rejected. Link layer must be Ethernet.
Per-frame decoding never raises: anything undecodable sets the ``malformed``
flag and leaves the deeper fields absent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import BinaryIO, Iterator

GLOBAL_HEADER_LEN = 24
FRAME_HEADER_LEN = 16

MAGIC_MICRO_BE = b"\xa1\xb2\xc3\xd4"
MAGIC_MICRO_LE = b"\xd4\xc3\xb2\xa1"
MAGIC_NANO_BE = b"\xa1\xb2\x3c\x4d"
MAGIC_NANO_LE = b"\x4d\x3c\xb2\xa1"
MAGIC_PCAPNG = b"\x0a\x0d\x0d\x0a"

LINKTYPE_ETHERNET = 1

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806
ETHERTYPE_VLAN = 0x8100
ETHERTYPE_QINQ = 0x88A8
ETHERTYPE_IPV6 = 0x86DD

IPPROTO_ICMP = 1
IPPROTO_TCP = 6
IPPROTO_UDP = 17
IPPROTO_ICMPV6 = 58

# IPv6 extension headers we can skip over: hop-by-hop, routing, fragment,
# authentication, destination options.
_V6_EXT_HOPBYHOP = 0
_V6_EXT_ROUTING = 43
_V6_EXT_FRAGMENT = 44
_V6_EXT_AH = 51
_V6_EXT_DSTOPTS = 60
_V6_EXT_WALK_LIMIT = 8


class CaptureError(Exception):
    """Base class for capture-level parsing failures."""


class MalformedHeader(CaptureError):
    """Global header is short, or the magic number is unknown."""


class UnsupportedFormat(CaptureError):
    """Recognized but unsupported container (pcapng)."""


class UnsupportedLinkType(CaptureError):
    """The capture's link type is not Ethernet."""


class TruncatedFrame(CaptureError):
    """A per-frame header or body was cut short mid-file.

    Raised by the frame iterator after all preceding well-formed frames
    have been yielded, so callers keep the parsed prefix.
    """


class Transport(str, Enum):
    TCP = "TCP"
    UDP = "UDP"
    ICMP = "ICMP"
    ICMPV6 = "ICMPv6"
    OTHER = "OTHER"


class AppProtocol(str, Enum):
    DNS = "DNS"
    HTTP = "HTTP"
    HTTPS = "HTTPS"
    NTP = "NTP"
    MQTT = "MQTT"
    MDNS = "MDNS"
    DHCP = "DHCP"
    SSH = "SSH"
    OTHER = "OTHER"


class Scope(str, Enum):
    LOCAL_TO_REMOTE = "LOCAL_TO_REMOTE"
    REMOTE_TO_LOCAL = "REMOTE_TO_LOCAL"
    INTERNAL = "INTERNAL"
    EXTERNAL = "EXTERNAL"
    SPECIAL = "SPECIAL"


# Port-table application guessing; destination port wins ties.
PORT_PROTOCOLS: dict[int, AppProtocol] = {
    53: AppProtocol.DNS,
    80: AppProtocol.HTTP,
    443: AppProtocol.HTTPS,
    123: AppProtocol.NTP,
    1883: AppProtocol.MQTT,
    5353: AppProtocol.MDNS,
    67: AppProtocol.DHCP,
    68: AppProtocol.DHCP,
    22: AppProtocol.SSH,
}


@dataclass(frozen=True)
class CaptureMeta:
    """Global-header facts needed to interpret the frames that follow."""

    byte_order: str  # "big" | "little"
    resolution: str  # "micro" | "nano"
    link_type: int
    snap_length: int


@dataclass(frozen=True)
class RawFrame:
    """One captured link-layer frame with its original timestamp."""

    ts_sec: int
    ts_nsec: int  # fractional part normalized to nanoseconds
    captured_length: int
    original_length: int
    payload: bytes

    @property
    def timestamp_ns(self) -> int:
        return self.ts_sec * 1_000_000_000 + self.ts_nsec


@dataclass(slots=True)
class PacketRecord:
    """The per-packet feature row persisted to the traffic store.

    ``seq`` is assigned by the store at append time; ``scope`` is filled by
    the identity layer. Both stay None straight out of the decoder.
    """

    timestamp_ns: int
    src_mac: str | None
    dst_mac: str | None
    ether_type: int | None
    ip_version: int | None  # 4 | 6 | None
    src_ip: str | None
    dst_ip: str | None
    transport: Transport | None
    src_port: int | None
    dst_port: int | None
    app: AppProtocol
    length: int  # original (untruncated) frame length
    malformed: bool = False
    scope: Scope | None = None
    seq: int | None = None


def _format_mac(raw: bytes) -> str:
    return ":".join(f"{b:02x}" for b in raw)


def _format_ipv4(raw: bytes) -> str:
    return ".".join(str(b) for b in raw)


def _format_ipv6(raw: bytes) -> str:
    import ipaddress

    return ipaddress.IPv6Address(raw).compressed


def parse_capture(stream: BinaryIO) -> tuple[CaptureMeta, Iterator[RawFrame]]:
    """Parse a classic pcap byte stream.

    Returns the capture metadata and a lazy frame iterator. The iterator
    stops at clean EOF; a frame cut short raises TruncatedFrame after the
    good prefix has been yielded.
    """
    header = stream.read(GLOBAL_HEADER_LEN)
    if len(header) < 4:
        raise MalformedHeader("capture shorter than a magic number")
    magic = header[:4]
    if magic == MAGIC_PCAPNG:
        raise UnsupportedFormat("pcapng is not supported; convert to classic pcap")
    try:
        byte_order, resolution = {
            MAGIC_MICRO_BE: ("big", "micro"),
            MAGIC_MICRO_LE: ("little", "micro"),
            MAGIC_NANO_BE: ("big", "nano"),
            MAGIC_NANO_LE: ("little", "nano"),
        }[magic]
    except KeyError:
        raise MalformedHeader(f"unknown magic {magic.hex()}") from None
    if len(header) < GLOBAL_HEADER_LEN:
        raise MalformedHeader("global header cut short")

    prefix = ">" if byte_order == "big" else "<"
    _vmaj, _vmin, _thiszone, _sigfigs, snaplen, network = struct.unpack(
        prefix + "HHiIII", header[4:]
    )
    if network != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"link type {network} (only Ethernet/1 is supported)")
    if snaplen == 0:
        raise MalformedHeader("snap length of zero")

    meta = CaptureMeta(
        byte_order=byte_order,
        resolution=resolution,
        link_type=network,
        snap_length=snaplen,
    )
    return meta, _iter_frames(stream, meta, prefix)


def _iter_frames(stream: BinaryIO, meta: CaptureMeta, prefix: str) -> Iterator[RawFrame]:
    frac_limit = 1_000_000 if meta.resolution == "micro" else 1_000_000_000
    frac_scale = 1_000 if meta.resolution == "micro" else 1
    header_fmt = prefix + "IIII"
    while True:
        header = stream.read(FRAME_HEADER_LEN)
        if not header:
            return
        if len(header) < FRAME_HEADER_LEN:
            raise TruncatedFrame("frame header cut short")
        ts_sec, ts_frac, incl_len, orig_len = struct.unpack(header_fmt, header)
        if ts_frac >= frac_limit:
            raise TruncatedFrame(f"fractional timestamp {ts_frac} out of range")
        if incl_len > meta.snap_length:
            raise TruncatedFrame(f"captured length {incl_len} exceeds snap length")
        if incl_len > orig_len:
            raise TruncatedFrame("captured length exceeds original length")
        payload = stream.read(incl_len)
        if len(payload) < incl_len:
            raise TruncatedFrame("frame body cut short")
        yield RawFrame(
            ts_sec=ts_sec,
            ts_nsec=ts_frac * frac_scale,
            captured_length=incl_len,
            original_length=orig_len,
            payload=payload,
        )


def guess_app_protocol(
    transport: Transport | None, src_port: int | None, dst_port: int | None
) -> AppProtocol:
    """Port-table application protocol guess; the destination port wins ties."""
    if dst_port is not None and dst_port in PORT_PROTOCOLS:
        return PORT_PROTOCOLS[dst_port]
    if src_port is not None and src_port in PORT_PROTOCOLS:
        return PORT_PROTOCOLS[src_port]
    return AppProtocol.OTHER


def decode_frame(frame: RawFrame, meta: CaptureMeta) -> PacketRecord:
    """Decode Ethernet -> (IPv4|IPv6|ARP|other) -> (TCP|UDP|ICMP/v6|other).

    Total by contract: malformation is recorded on the result, never raised.
    """
    record = PacketRecord(
        timestamp_ns=frame.timestamp_ns,
        src_mac=None,
        dst_mac=None,
        ether_type=None,
        ip_version=None,
        src_ip=None,
        dst_ip=None,
        transport=None,
        src_port=None,
        dst_port=None,
        app=AppProtocol.OTHER,
        length=frame.original_length,
    )
    data = frame.payload
    if len(data) < 14:
        record.malformed = True
        return record

    record.dst_mac = _format_mac(data[0:6])
    record.src_mac = _format_mac(data[6:12])
    ether_type = struct.unpack(">H", data[12:14])[0]
    offset = 14

    if ether_type == ETHERTYPE_QINQ:
        record.ether_type = ether_type
        record.malformed = True  # QinQ stacking not unwrapped
        return record
    if ether_type == ETHERTYPE_VLAN:
        if len(data) < offset + 4:
            record.ether_type = ether_type
            record.malformed = True
            return record
        ether_type = struct.unpack(">H", data[offset + 2 : offset + 4])[0]
        offset += 4
        if ether_type in (ETHERTYPE_VLAN, ETHERTYPE_QINQ):
            record.ether_type = ether_type
            record.malformed = True
            return record

    record.ether_type = ether_type
    if ether_type == ETHERTYPE_IPV4:
        _decode_ipv4(record, data, offset)
    elif ether_type == ETHERTYPE_IPV6:
        _decode_ipv6(record, data, offset)
    # ARP and anything else: no IP layer, nothing deeper to decode.
    return record


def _decode_ipv4(record: PacketRecord, data: bytes, offset: int) -> None:
    if len(data) < offset + 20:
        record.malformed = True
        return
    first = data[offset]
    if first >> 4 != 4:
        record.malformed = True
        return
    ihl = (first & 0x0F) * 4
    if ihl < 20 or len(data) < offset + ihl:
        record.malformed = True
        return

    record.ip_version = 4
    record.src_ip = _format_ipv4(data[offset + 12 : offset + 16])
    record.dst_ip = _format_ipv4(data[offset + 16 : offset + 20])
    frag = struct.unpack(">H", data[offset + 6 : offset + 8])[0] & 0x1FFF
    proto = data[offset + 9]
    if frag > 0:
        # Non-first fragment: the transport header lives in another packet.
        record.transport = Transport.OTHER
        return
    record.transport = {
        IPPROTO_TCP: Transport.TCP,
        IPPROTO_UDP: Transport.UDP,
        IPPROTO_ICMP: Transport.ICMP,
    }.get(proto, Transport.OTHER)
    _decode_ports(record, data, offset + ihl)


def _decode_ipv6(record: PacketRecord, data: bytes, offset: int) -> None:
    if len(data) < offset + 40:
        record.malformed = True
        return
    if data[offset] >> 4 != 6:
        record.malformed = True
        return

    record.ip_version = 6
    record.src_ip = _format_ipv6(data[offset + 8 : offset + 24])
    record.dst_ip = _format_ipv6(data[offset + 24 : offset + 40])
    next_header = data[offset + 6]
    cursor = offset + 40
    non_first_fragment = False

    for _ in range(_V6_EXT_WALK_LIMIT):
        if next_header == _V6_EXT_FRAGMENT:
            if len(data) < cursor + 8:
                record.malformed = True
                return
            frag_off = struct.unpack(">H", data[cursor + 2 : cursor + 4])[0] >> 3
            if frag_off > 0:
                non_first_fragment = True
            next_header = data[cursor]
            cursor += 8
        elif next_header in (_V6_EXT_HOPBYHOP, _V6_EXT_ROUTING, _V6_EXT_DSTOPTS):
            if len(data) < cursor + 2:
                record.malformed = True
                return
            ext_len = (data[cursor + 1] + 1) * 8
            if len(data) < cursor + ext_len:
                record.malformed = True
                return
            next_header = data[cursor]
            cursor += ext_len
        elif next_header == _V6_EXT_AH:
            if len(data) < cursor + 2:
                record.malformed = True
                return
            ext_len = (data[cursor + 1] + 2) * 4
            if len(data) < cursor + ext_len:
                record.malformed = True
                return
            next_header = data[cursor]
            cursor += ext_len
        else:
            break

    if non_first_fragment:
        record.transport = Transport.OTHER
        return
    record.transport = {
        IPPROTO_TCP: Transport.TCP,
        IPPROTO_UDP: Transport.UDP,
        IPPROTO_ICMPV6: Transport.ICMPV6,
    }.get(next_header, Transport.OTHER)
    _decode_ports(record, data, cursor)


def _decode_ports(record: PacketRecord, data: bytes, l4_offset: int) -> None:
    if record.transport not in (Transport.TCP, Transport.UDP):
        return
    if len(data) < l4_offset + 4:
        record.malformed = True  # port fields cut off by the snap length
        return
    record.src_port, record.dst_port = struct.unpack(
        ">HH", data[l4_offset : l4_offset + 4]
    )
    record.app = guess_app_protocol(record.transport, record.src_port, record.dst_port)
