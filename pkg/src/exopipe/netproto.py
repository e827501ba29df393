"""Data-plane frames and the OpenFlow-lite control messages.

Every multi-byte integer is big-endian. The layouts here are the wire
contract documented in ``docs/wire.md``; tests pin them byte for byte.

The OpenFlow subset is an analog of 1.0-era OpenFlow (nine match fields,
three actions), not a compliant implementation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Optional, Tuple, Union

__all__ = [
    "ETH_TYPE_ARP",
    "ETH_TYPE_IPV4",
    "ETH_TYPE_LLDP",
    "IP_PROTO_ICMP",
    "IP_PROTO_TCP",
    "IP_PROTO_UDP",
    "BROADCAST_MAC",
    "LLDP_MULTICAST_MAC",
    "MAX_PAYLOAD",
    "NO_BUFFER",
    "CONTROLLER_PORT",
    "CodecError",
    "Truncated",
    "TrailingBytes",
    "OversizePayload",
    "UnknownTag",
    "BadField",
    "EthernetFrame",
    "ArpOp",
    "ArpPacket",
    "LldpFrame",
    "EchoKind",
    "IcmpEcho",
    "TcpSegment",
    "MatchFields",
    "ActionType",
    "Action",
    "FlowEntry",
    "OutKind",
    "OutPortSpec",
    "FlowModOp",
    "RemovedReason",
    "PacketIn",
    "PacketOut",
    "FlowMod",
    "FlowRemoved",
    "Echo",
    "OfMessage",
    "encode_frame",
    "decode_frame",
    "encode_arp",
    "decode_arp",
    "encode_lldp",
    "decode_lldp",
    "encode_icmp_echo",
    "decode_icmp_echo",
    "encode_tcp",
    "decode_tcp",
    "encode_match",
    "decode_match",
    "encode_flow_entry",
    "decode_flow_entry",
    "encode_of",
    "decode_of",
    "extract_match",
    "mac_from_int",
    "mac_to_str",
    "ip_from_str",
    "ip_to_str",
]

ETH_TYPE_IPV4 = 0x0800
ETH_TYPE_ARP = 0x0806
ETH_TYPE_LLDP = 0x88CC

IP_PROTO_ICMP = 1
IP_PROTO_TCP = 6
IP_PROTO_UDP = 17

MAX_PAYLOAD = 1500
NO_BUFFER = 0xFFFFFFFF
CONTROLLER_PORT = 0xFFFFFFFF

BROADCAST_MAC = b"\xff" * 6
LLDP_MULTICAST_MAC = bytes.fromhex("0180c200000e")

_ETH_HEADER = struct.Struct("!6s6sH")
_ARP = struct.Struct("!HHBBH6sI6sI")
_IPV4 = struct.Struct("!BBHHHBBHII")
_ICMP_ECHO = struct.Struct("!BBHHH")
_TCP = struct.Struct("!HHIIBBHHH")
_MATCH = struct.Struct("!HI6s6sHIIBHH")
_ACTION = struct.Struct("!BI")
_ENTRY_HEAD = struct.Struct("!QH")
_ENTRY_TAIL = struct.Struct("!QQQQQQ")


class CodecError(ValueError):
    """Raised when bytes do not decode into a wire type."""


class Truncated(CodecError):
    pass


class TrailingBytes(CodecError):
    pass


class OversizePayload(CodecError):
    pass


class UnknownTag(CodecError):
    pass


class BadField(CodecError):
    pass


def _need(data: bytes, size: int, what: str) -> None:
    if len(data) < size:
        raise Truncated(f"{what}: need {size} bytes, got {len(data)}")


def _check_mac(mac: bytes, what: str) -> None:
    if len(mac) != 6:
        raise BadField(f"{what} must be 6 bytes, got {len(mac)}")


# ----- address helpers --------------------------------------------------------

def mac_from_int(value: int) -> bytes:
    return value.to_bytes(6, "big")


def mac_to_str(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def ip_from_str(text: str) -> int:
    parts = [int(p) for p in text.split(".")]
    if len(parts) != 4 or any(not 0 <= p <= 255 for p in parts):
        raise ValueError(f"not a dotted IPv4 address: {text!r}")
    return int.from_bytes(bytes(parts), "big")


def ip_to_str(ip: int) -> str:
    return ".".join(str(b) for b in ip.to_bytes(4, "big"))


# ----- Ethernet ---------------------------------------------------------------

@dataclass(frozen=True)
class EthernetFrame:
    dst_mac: bytes
    src_mac: bytes
    ethertype: int
    payload: bytes = b""


def encode_frame(frame: EthernetFrame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise OversizePayload(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    _check_mac(frame.dst_mac, "dst_mac")
    _check_mac(frame.src_mac, "src_mac")
    return _ETH_HEADER.pack(frame.dst_mac, frame.src_mac, frame.ethertype) + bytes(frame.payload)


def decode_frame(data: bytes) -> EthernetFrame:
    _need(data, _ETH_HEADER.size, "ethernet header")
    dst, src, ethertype = _ETH_HEADER.unpack_from(data)
    payload = bytes(data[_ETH_HEADER.size:])
    if len(payload) > MAX_PAYLOAD:
        raise OversizePayload(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return EthernetFrame(dst_mac=dst, src_mac=src, ethertype=ethertype, payload=payload)


# ----- ARP --------------------------------------------------------------------

class ArpOp(IntEnum):
    REQUEST = 1
    REPLY = 2


@dataclass(frozen=True)
class ArpPacket:
    op: ArpOp
    sender_mac: bytes
    sender_ip: int
    target_mac: bytes
    target_ip: int


def encode_arp(packet: ArpPacket) -> bytes:
    _check_mac(packet.sender_mac, "sender_mac")
    _check_mac(packet.target_mac, "target_mac")
    return _ARP.pack(
        1, ETH_TYPE_IPV4, 6, 4, int(packet.op),
        packet.sender_mac, packet.sender_ip, packet.target_mac, packet.target_ip,
    )


def decode_arp(data: bytes) -> ArpPacket:
    _need(data, _ARP.size, "arp")
    htype, ptype, hlen, plen, op, sha, spa, tha, tpa = _ARP.unpack_from(data)
    if (htype, ptype, hlen, plen) != (1, ETH_TYPE_IPV4, 6, 4):
        raise BadField("only Ethernet/IPv4 ARP is supported")
    try:
        arp_op = ArpOp(op)
    except ValueError as exc:
        raise BadField(f"unknown ARP op {op}") from exc
    return ArpPacket(op=arp_op, sender_mac=sha, sender_ip=spa, target_mac=tha, target_ip=tpa)


# ----- LLDP -------------------------------------------------------------------

_TLV_END, _TLV_CHASSIS, _TLV_PORT, _TLV_TTL = 0, 1, 2, 3
_LOCALLY_ASSIGNED = 7
_LLDP_TTL = 120


@dataclass(frozen=True)
class LldpFrame:
    chassis_id: int
    port_id: int

    def __post_init__(self) -> None:
        if self.chassis_id <= 0:
            raise BadField("LLDP chassis_id must be positive")


def _tlv(kind: int, value: bytes) -> bytes:
    return struct.pack("!H", (kind << 9) | len(value)) + value


def encode_lldp(frame: LldpFrame) -> bytes:
    return b"".join(
        (
            _tlv(_TLV_CHASSIS, struct.pack("!BQ", _LOCALLY_ASSIGNED, frame.chassis_id)),
            _tlv(_TLV_PORT, struct.pack("!BI", _LOCALLY_ASSIGNED, frame.port_id)),
            _tlv(_TLV_TTL, struct.pack("!H", _LLDP_TTL)),
            _tlv(_TLV_END, b""),
        )
    )


def decode_lldp(data: bytes) -> LldpFrame:
    chassis: Optional[int] = None
    port: Optional[int] = None
    pos = 0
    while True:
        _need(data[pos:], 2, "lldp tlv header")
        (header,) = struct.unpack_from("!H", data, pos)
        kind, length = header >> 9, header & 0x1FF
        pos += 2
        _need(data[pos:], length, "lldp tlv value")
        value = data[pos:pos + length]
        pos += length
        if kind == _TLV_END:
            break
        if kind == _TLV_CHASSIS and length == 9 and value[0] == _LOCALLY_ASSIGNED:
            (chassis,) = struct.unpack("!Q", value[1:])
        elif kind == _TLV_PORT and length == 5 and value[0] == _LOCALLY_ASSIGNED:
            (port,) = struct.unpack("!I", value[1:])
    if chassis is None or port is None:
        raise BadField("LLDP frame lacks chassis or port TLV")
    return LldpFrame(chassis_id=chassis, port_id=port)


# ----- IPv4 / ICMP / TCP --------------------------------------------------------

def _encode_ipv4(src_ip: int, dst_ip: int, proto: int, body: bytes) -> bytes:
    # fixed 20-byte header, no options, checksum left zero
    return _IPV4.pack(0x45, 0, _IPV4.size + len(body), 0, 0, 64, proto, 0, src_ip, dst_ip) + body


def _decode_ipv4(data: bytes) -> Tuple[int, int, int, bytes]:
    _need(data, _IPV4.size, "ipv4 header")
    ver_ihl, _, total, _, _, _, proto, _, src, dst = _IPV4.unpack_from(data)
    if ver_ihl != 0x45:
        raise BadField(f"unsupported IPv4 version/IHL byte 0x{ver_ihl:02x}")
    if total < _IPV4.size or total > len(data):
        raise Truncated(f"ipv4 total length {total} does not fit {len(data)} bytes")
    return src, dst, proto, bytes(data[_IPV4.size:total])


class EchoKind(IntEnum):
    REPLY = 0
    REQUEST = 8


@dataclass(frozen=True)
class IcmpEcho:
    kind: EchoKind
    ident: int
    seq: int
    src_ip: int
    dst_ip: int

    def reply(self) -> "IcmpEcho":
        return IcmpEcho(EchoKind.REPLY, self.ident, self.seq, self.dst_ip, self.src_ip)


def encode_icmp_echo(echo: IcmpEcho) -> bytes:
    body = _ICMP_ECHO.pack(int(echo.kind), 0, 0, echo.ident, echo.seq)
    return _encode_ipv4(echo.src_ip, echo.dst_ip, IP_PROTO_ICMP, body)


def decode_icmp_echo(data: bytes) -> IcmpEcho:
    src, dst, proto, body = _decode_ipv4(data)
    if proto != IP_PROTO_ICMP:
        raise BadField(f"not ICMP (proto {proto})")
    _need(body, _ICMP_ECHO.size, "icmp echo")
    kind, _, _, ident, seq = _ICMP_ECHO.unpack_from(body)
    try:
        echo_kind = EchoKind(kind)
    except ValueError as exc:
        raise BadField(f"ICMP type {kind} is not an echo") from exc
    return IcmpEcho(kind=echo_kind, ident=ident, seq=seq, src_ip=src, dst_ip=dst)


@dataclass(frozen=True)
class TcpSegment:
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    seq: int = 0
    ack: int = 0
    flags: int = 0x10
    payload: bytes = b""


def encode_tcp(segment: TcpSegment) -> bytes:
    header = _TCP.pack(
        segment.src_port, segment.dst_port, segment.seq, segment.ack,
        5 << 4, segment.flags, 0xFFFF, 0, 0,
    )
    return _encode_ipv4(segment.src_ip, segment.dst_ip, IP_PROTO_TCP, header + segment.payload)


def decode_tcp(data: bytes) -> TcpSegment:
    src, dst, proto, body = _decode_ipv4(data)
    if proto != IP_PROTO_TCP:
        raise BadField(f"not TCP (proto {proto})")
    _need(body, _TCP.size, "tcp header")
    sport, dport, seq, ack, _, flags, _, _, _ = _TCP.unpack_from(body)
    return TcpSegment(src, dst, sport, dport, seq, ack, flags, bytes(body[_TCP.size:]))


# ----- match fields -------------------------------------------------------------

_MATCH_FIELDS = (
    "in_port", "eth_src", "eth_dst", "ethertype",
    "ip_src", "ip_dst", "ip_proto", "l4_src", "l4_dst",
)
_MATCH_ZERO = (0, b"\x00" * 6, b"\x00" * 6, 0, 0, 0, 0, 0, 0)


@dataclass(frozen=True)
class MatchFields:
    """OpenFlow-style match; ``None`` is a wildcard."""

    in_port: Optional[int] = None
    eth_src: Optional[bytes] = None
    eth_dst: Optional[bytes] = None
    ethertype: Optional[int] = None
    ip_src: Optional[int] = None
    ip_dst: Optional[int] = None
    ip_proto: Optional[int] = None
    l4_src: Optional[int] = None
    l4_dst: Optional[int] = None

    def present(self) -> Tuple[str, ...]:
        return tuple(name for name in _MATCH_FIELDS if getattr(self, name) is not None)

    def is_empty(self) -> bool:
        return not self.present()

    def covers(self, packet: "MatchFields") -> bool:
        """True when every non-wildcard field equals the packet's field."""
        return all(getattr(self, name) == getattr(packet, name) for name in self.present())


def encode_match(match: MatchFields) -> bytes:
    bitmap = 0
    values = []
    for bit, (name, zero) in enumerate(zip(_MATCH_FIELDS, _MATCH_ZERO)):
        value = getattr(match, name)
        if value is None:
            values.append(zero)
        else:
            bitmap |= 1 << bit
            values.append(value)
    return _MATCH.pack(bitmap, *values)


def decode_match(data: bytes) -> MatchFields:
    _need(data, _MATCH.size, "match")
    bitmap, *values = _MATCH.unpack_from(data)
    if bitmap >> len(_MATCH_FIELDS):
        raise BadField(f"match bitmap 0x{bitmap:04x} has unknown bits")
    fields = {
        name: value
        for bit, (name, value) in enumerate(zip(_MATCH_FIELDS, values))
        if bitmap & (1 << bit)
    }
    return MatchFields(**fields)


# ----- actions and flow entries -------------------------------------------------

class ActionType(IntEnum):
    OUTPUT = 0
    FLOOD = 1
    DROP = 2


@dataclass(frozen=True)
class Action:
    kind: ActionType
    port: int = 0

    @classmethod
    def output(cls, port: int) -> "Action":
        return cls(ActionType.OUTPUT, port)

    @classmethod
    def flood(cls) -> "Action":
        return cls(ActionType.FLOOD)

    @classmethod
    def drop(cls) -> "Action":
        return cls(ActionType.DROP)


@dataclass
class FlowEntry:
    """One flow-table rule. Times are virtual nanoseconds; 0 timeout = none."""

    priority: int
    match: MatchFields
    actions: Tuple[Action, ...] = ()
    hard_timeout: int = 0
    idle_timeout: int = 0
    entry_id: int = 0
    install_time: int = 0
    last_hit_time: int = 0
    packet_count: int = 0
    byte_count: int = 0

    def rule_key(self) -> Tuple[object, ...]:
        """The {match, priority, actions} identity used to compare rule sets."""
        return (self.match, self.priority, tuple(self.actions))

    def copy(self) -> "FlowEntry":
        return replace(self)


def encode_flow_entry(entry: FlowEntry) -> bytes:
    parts = [_ENTRY_HEAD.pack(entry.entry_id, entry.priority), encode_match(entry.match)]
    parts.append(struct.pack("!H", len(entry.actions)))
    parts.extend(_ACTION.pack(int(a.kind), a.port) for a in entry.actions)
    parts.append(
        _ENTRY_TAIL.pack(
            entry.hard_timeout, entry.idle_timeout, entry.install_time,
            entry.last_hit_time, entry.packet_count, entry.byte_count,
        )
    )
    return b"".join(parts)


def decode_flow_entry(data: bytes) -> Tuple[FlowEntry, int]:
    """Decode one entry; returns it with the number of bytes consumed."""
    _need(data, _ENTRY_HEAD.size, "flow entry")
    entry_id, priority = _ENTRY_HEAD.unpack_from(data)
    pos = _ENTRY_HEAD.size
    match = decode_match(data[pos:])
    pos += _MATCH.size
    _need(data[pos:], 2, "action count")
    (n_actions,) = struct.unpack_from("!H", data, pos)
    pos += 2
    actions = []
    for _ in range(n_actions):
        _need(data[pos:], _ACTION.size, "action")
        kind, port = _ACTION.unpack_from(data, pos)
        try:
            actions.append(Action(ActionType(kind), port))
        except ValueError as exc:
            raise BadField(f"unknown action type {kind}") from exc
        pos += _ACTION.size
    _need(data[pos:], _ENTRY_TAIL.size, "flow entry timers")
    hard, idle, install, last_hit, packets, nbytes = _ENTRY_TAIL.unpack_from(data, pos)
    pos += _ENTRY_TAIL.size
    entry = FlowEntry(
        priority=priority, match=match, actions=tuple(actions),
        hard_timeout=hard, idle_timeout=idle, entry_id=entry_id,
        install_time=install, last_hit_time=last_hit,
        packet_count=packets, byte_count=nbytes,
    )
    return entry, pos


# ----- OpenFlow-lite messages -----------------------------------------------------

class OutKind(IntEnum):
    PORT = 0
    FLOOD = 1
    TABLE = 2


@dataclass(frozen=True)
class OutPortSpec:
    kind: OutKind
    port: int = 0

    @classmethod
    def to_port(cls, port: int) -> "OutPortSpec":
        return cls(OutKind.PORT, port)

    @classmethod
    def flood(cls) -> "OutPortSpec":
        return cls(OutKind.FLOOD)

    @classmethod
    def table(cls) -> "OutPortSpec":
        return cls(OutKind.TABLE)


class FlowModOp(IntEnum):
    ADD = 0
    DELETE = 1


class RemovedReason(IntEnum):
    IDLE_TIMEOUT = 0
    HARD_TIMEOUT = 1
    DELETED = 2


@dataclass(frozen=True)
class PacketIn:
    device_id: int
    in_port: int
    frame: EthernetFrame
    buffer_id: int = NO_BUFFER


@dataclass(frozen=True)
class PacketOut:
    device_id: int
    out_port_spec: OutPortSpec
    frame: EthernetFrame
    in_port: int = CONTROLLER_PORT


@dataclass(frozen=True)
class FlowMod:
    device_id: int
    entry: FlowEntry
    op: FlowModOp = FlowModOp.ADD


@dataclass(frozen=True)
class FlowRemoved:
    device_id: int
    entry_id: int
    reason: RemovedReason


@dataclass(frozen=True)
class Echo:
    nonce: int = 0


OfMessage = Union[PacketIn, PacketOut, FlowMod, FlowRemoved, Echo]

_TAG_PACKET_IN, _TAG_PACKET_OUT, _TAG_FLOW_MOD, _TAG_FLOW_REMOVED, _TAG_ECHO = 1, 2, 3, 4, 5
_PACKET_IN = struct.Struct("!BQII")
_PACKET_OUT = struct.Struct("!BQBII")
_FLOW_MOD = struct.Struct("!BQB")
_FLOW_REMOVED = struct.Struct("!BQQB")
_ECHO = struct.Struct("!BQ")


def encode_of(msg: OfMessage) -> bytes:
    if isinstance(msg, PacketIn):
        head = _PACKET_IN.pack(_TAG_PACKET_IN, msg.device_id, msg.in_port, msg.buffer_id)
        return head + encode_frame(msg.frame)
    if isinstance(msg, PacketOut):
        spec = msg.out_port_spec
        head = _PACKET_OUT.pack(_TAG_PACKET_OUT, msg.device_id, int(spec.kind), spec.port, msg.in_port)
        return head + encode_frame(msg.frame)
    if isinstance(msg, FlowMod):
        return _FLOW_MOD.pack(_TAG_FLOW_MOD, msg.device_id, int(msg.op)) + encode_flow_entry(msg.entry)
    if isinstance(msg, FlowRemoved):
        return _FLOW_REMOVED.pack(_TAG_FLOW_REMOVED, msg.device_id, msg.entry_id, int(msg.reason))
    if isinstance(msg, Echo):
        return _ECHO.pack(_TAG_ECHO, msg.nonce)
    raise TypeError(f"not an OpenFlow-lite message: {type(msg).__name__}")


def _exact(data: bytes, size: int, what: str) -> None:
    _need(data, size, what)
    if len(data) > size:
        raise TrailingBytes(f"{what}: {len(data) - size} unexpected trailing bytes")


def decode_of(data: bytes) -> OfMessage:
    _need(data, 1, "message tag")
    tag = data[0]
    if tag == _TAG_PACKET_IN:
        _need(data, _PACKET_IN.size, "packet_in")
        _, device, in_port, buffer_id = _PACKET_IN.unpack_from(data)
        return PacketIn(device, in_port, decode_frame(data[_PACKET_IN.size:]), buffer_id)
    if tag == _TAG_PACKET_OUT:
        _need(data, _PACKET_OUT.size, "packet_out")
        _, device, kind, port, in_port = _PACKET_OUT.unpack_from(data)
        try:
            spec = OutPortSpec(OutKind(kind), port)
        except ValueError as exc:
            raise BadField(f"unknown out-port kind {kind}") from exc
        return PacketOut(device, spec, decode_frame(data[_PACKET_OUT.size:]), in_port)
    if tag == _TAG_FLOW_MOD:
        _need(data, _FLOW_MOD.size, "flow_mod")
        _, device, op = _FLOW_MOD.unpack_from(data)
        entry, used = decode_flow_entry(data[_FLOW_MOD.size:])
        _exact(data, _FLOW_MOD.size + used, "flow_mod")
        try:
            return FlowMod(device, entry, FlowModOp(op))
        except ValueError as exc:
            raise BadField(f"unknown flow_mod op {op}") from exc
    if tag == _TAG_FLOW_REMOVED:
        _exact(data, _FLOW_REMOVED.size, "flow_removed")
        _, device, entry_id, reason = _FLOW_REMOVED.unpack_from(data)
        try:
            return FlowRemoved(device, entry_id, RemovedReason(reason))
        except ValueError as exc:
            raise BadField(f"unknown removal reason {reason}") from exc
    if tag == _TAG_ECHO:
        _exact(data, _ECHO.size, "echo")
        return Echo(_ECHO.unpack_from(data)[1])
    raise UnknownTag(f"unknown message tag {tag}")


# ----- match extraction ----------------------------------------------------------

def extract_match(frame: EthernetFrame, in_port: int) -> MatchFields:
    """Header fields of ``frame`` as seen on ``in_port``. Never raises."""
    fields = dict(
        in_port=in_port,
        eth_src=frame.src_mac,
        eth_dst=frame.dst_mac,
        ethertype=frame.ethertype,
    )
    if frame.ethertype == ETH_TYPE_IPV4:
        try:
            src, dst, proto, body = _decode_ipv4(frame.payload)
        except CodecError:
            return MatchFields(**fields)
        fields.update(ip_src=src, ip_dst=dst, ip_proto=proto)
        if proto in (IP_PROTO_TCP, IP_PROTO_UDP) and len(body) >= 4:
            l4_src, l4_dst = struct.unpack_from("!HH", body)
            fields.update(l4_src=l4_src, l4_dst=l4_dst)
    return MatchFields(**fields)
