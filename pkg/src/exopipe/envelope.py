"""Binary packet-event envelope: one record per PACKET_IN published to the broker.

Layout (big-endian, 32-byte header then the raw frame)::

    magic u16 = 0x5045 | version u8 = 1 | event_type u8 | device_id u64
    in_port u32 | buffer_id u32 | timestamp_ns u64 | frame_len u32 | frame
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple

from .netproto import (
    ETH_TYPE_ARP,
    ETH_TYPE_IPV4,
    ETH_TYPE_LLDP,
    NO_BUFFER,
    BadField,
    CodecError,
    EthernetFrame,
    PacketIn,
    Truncated,
    TrailingBytes,
    decode_frame,
    encode_frame,
)

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_SIZE",
    "EventType",
    "BadMagic",
    "BadVersion",
    "PacketEventEnvelope",
    "event_type_of",
    "encode_envelope",
    "decode_envelope",
    "peek_event",
    "envelope_from_packet_in",
    "envelope_frame",
]

MAGIC = 0x5045
VERSION = 1

_HEADER = struct.Struct("!HBBQIIQI")
HEADER_SIZE = _HEADER.size


class EventType(IntEnum):
    OTHER = 0
    ARP = 1
    LLDP = 2
    IPV4 = 3

    @property
    def topic_suffix(self) -> str:
        return self.name.lower()


class BadMagic(CodecError):
    pass


class BadVersion(CodecError):
    pass


@dataclass(frozen=True)
class PacketEventEnvelope:
    event_type: EventType
    device_id: int
    in_port: int
    timestamp_ns: int
    frame: bytes
    buffer_id: int = NO_BUFFER

    @property
    def frame_len(self) -> int:
        return len(self.frame)


_BY_ETHERTYPE = {
    ETH_TYPE_ARP: EventType.ARP,
    ETH_TYPE_LLDP: EventType.LLDP,
    ETH_TYPE_IPV4: EventType.IPV4,
}


def event_type_of(ethertype: int) -> EventType:
    return _BY_ETHERTYPE.get(ethertype, EventType.OTHER)


def envelope_from_packet_in(msg: PacketIn, now: int) -> PacketEventEnvelope:
    return PacketEventEnvelope(
        event_type=event_type_of(msg.frame.ethertype),
        device_id=msg.device_id,
        in_port=msg.in_port,
        timestamp_ns=now,
        frame=encode_frame(msg.frame),
        buffer_id=msg.buffer_id,
    )


def encode_envelope(env: PacketEventEnvelope) -> bytes:
    head = _HEADER.pack(
        MAGIC, VERSION, int(env.event_type), env.device_id, env.in_port,
        env.buffer_id, env.timestamp_ns, len(env.frame),
    )
    return head + env.frame


def _check_header(data: bytes) -> Tuple[int, ...]:
    if len(data) < HEADER_SIZE:
        raise Truncated(f"envelope: need {HEADER_SIZE} header bytes, got {len(data)}")
    fields = _HEADER.unpack_from(data)
    if fields[0] != MAGIC:
        raise BadMagic(f"envelope magic 0x{fields[0]:04x} != 0x{MAGIC:04x}")
    if fields[1] != VERSION:
        raise BadVersion(f"envelope version {fields[1]} unsupported")
    return fields


def _event_type(value: int) -> EventType:
    try:
        return EventType(value)
    except ValueError:
        raise BadField(f"unknown event type {value}") from None


def decode_envelope(data: bytes) -> PacketEventEnvelope:
    _, _, event_type, device, in_port, buffer_id, ts, frame_len = _check_header(data)
    body = data[HEADER_SIZE:]
    if len(body) < frame_len:
        raise Truncated(f"envelope: frame_len {frame_len} but only {len(body)} bytes follow")
    if len(body) > frame_len:
        raise TrailingBytes(f"envelope: {len(body) - frame_len} bytes after the frame")
    return PacketEventEnvelope(_event_type(event_type), device, in_port, ts, bytes(body), buffer_id)


def peek_event(data: bytes) -> Tuple[EventType, int]:
    """(event_type, device_id) from the header alone; used by broker-side filters."""
    _, _, event_type, device, *_ = _check_header(data)
    return _event_type(event_type), device


def envelope_frame(env: PacketEventEnvelope) -> EthernetFrame:
    """The carried Ethernet frame, decoded."""
    return decode_frame(env.frame)
