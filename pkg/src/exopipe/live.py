"""Live-socket demo mode.

Three loopback stream servers share one wire framing (u32 big-endian length,
then the body):

* southbound: OpenFlow-lite messages to and from switches,
* northbound: key/value text requests (``install``, ``remove``, ``packet_out``),
* events: one key/value ``subscribe`` request, then a stream of packet-event
  envelopes for the subscriber's partitions.

Timestamps are ``time.monotonic_ns()``; the broker runs with zero delay.
``docs/wire.md`` documents every field.
"""

from __future__ import annotations

import asyncio
import logging
import struct
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .broker import Broker, BrokerError, FilterPredicate, device_key
from .controller import (
    BrokerSettings,
    Confirmation,
    ControllerError,
    FilterPlacement,
    SubscriptionRequest,
    UnknownDevice,
    merge_filters,
)
from .envelope import EventType, PacketEventEnvelope, decode_envelope, encode_envelope, envelope_from_packet_in
from .netproto import (
    CONTROLLER_PORT,
    Action,
    ActionType,
    CodecError,
    BadField,
    Echo,
    FlowEntry,
    FlowMod,
    FlowModOp,
    FlowRemoved,
    MatchFields,
    OfMessage,
    OutKind,
    OutPortSpec,
    PacketIn,
    PacketOut,
    Truncated,
    decode_frame,
    decode_of,
    encode_frame,
    encode_of,
    ip_from_str,
    ip_to_str,
    mac_to_str,
)

__all__ = [
    "MAX_FRAME",
    "FrameTooLarge",
    "FrameDecoder",
    "read_frame",
    "write_frame",
    "encode_kv",
    "decode_kv",
    "match_to_kv",
    "match_from_kv",
    "actions_to_text",
    "actions_from_text",
    "out_spec_to_text",
    "out_spec_from_text",
    "subscription_to_kv",
    "subscription_from_kv",
    "LivePorts",
    "LiveController",
    "LiveClient",
    "serve",
    "run",
]

LOG = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
_LEN = struct.Struct("!I")


class FrameTooLarge(CodecError):
    pass


# ----- framing ---------------------------------------------------------------------

class FrameDecoder:
    """Incremental length-prefixed decoder: ``feed`` returns every completed body."""

    def __init__(self, max_frame: int = MAX_FRAME) -> None:
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[bytes]:
        self._buf += data
        out: List[bytes] = []
        while len(self._buf) >= _LEN.size:
            (size,) = _LEN.unpack_from(self._buf)
            if size > self.max_frame:
                raise FrameTooLarge(f"frame of {size} bytes exceeds {self.max_frame}")
            end = _LEN.size + size
            if len(self._buf) < end:
                break
            out.append(bytes(self._buf[_LEN.size:end]))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def frame_bytes(body: bytes) -> bytes:
    if len(body) > MAX_FRAME:
        raise FrameTooLarge(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(body)) + body


async def read_frame(reader: asyncio.StreamReader) -> Optional[bytes]:
    """Next body, or ``None`` on a clean EOF between frames."""
    try:
        head = await reader.readexactly(_LEN.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise Truncated("connection closed inside a length prefix") from exc
    (size,) = _LEN.unpack(head)
    if size > MAX_FRAME:
        raise FrameTooLarge(f"frame of {size} bytes exceeds {MAX_FRAME}")
    try:
        return await reader.readexactly(size)
    except asyncio.IncompleteReadError as exc:
        raise Truncated(f"connection closed after {len(exc.partial)} of {size} bytes") from exc


async def write_frame(writer: asyncio.StreamWriter, body: bytes) -> None:
    writer.write(frame_bytes(body))
    await writer.drain()


# ----- key/value text form ------------------------------------------------------------

def encode_kv(fields: Dict[str, str]) -> bytes:
    lines = []
    for key, value in fields.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise BadField(f"key/value field {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def decode_kv(body: bytes) -> Dict[str, str]:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BadField("key/value body is not UTF-8") from exc
    fields: Dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise BadField(f"line without '=': {line!r}")
        fields[key.strip()] = value.strip()
    return fields


def _mac(text: str) -> bytes:
    raw = bytes.fromhex(text.replace(":", ""))
    if len(raw) != 6:
        raise BadField(f"not a MAC address: {text!r}")
    return raw


_MATCH_TEXT = {
    "eth_src": (mac_to_str, _mac),
    "eth_dst": (mac_to_str, _mac),
    "ip_src": (ip_to_str, ip_from_str),
    "ip_dst": (ip_to_str, ip_from_str),
}


def match_to_kv(match: MatchFields) -> Dict[str, str]:
    out = {}
    for name in match.present():
        render = _MATCH_TEXT.get(name, (str, None))[0]
        out[f"match.{name}"] = render(getattr(match, name))
    return out


def match_from_kv(fields: Dict[str, str]) -> MatchFields:
    values: Dict[str, object] = {}
    for key, text in fields.items():
        if not key.startswith("match."):
            continue
        name = key[len("match."):]
        if name not in MatchFields.__dataclass_fields__:
            raise BadField(f"unknown match field {name!r}")
        try:
            parse = _MATCH_TEXT[name][1] if name in _MATCH_TEXT else (lambda s: int(s, 0))
            values[name] = parse(text)
        except ValueError as exc:
            raise BadField(f"{key}: {exc}") from exc
    return MatchFields(**values)


def actions_to_text(actions: Tuple[Action, ...]) -> str:
    parts = []
    for action in actions:
        if action.kind is ActionType.OUTPUT:
            parts.append(f"output:{action.port}")
        else:
            parts.append(action.kind.name.lower())
    return ",".join(parts)


def actions_from_text(text: str) -> Tuple[Action, ...]:
    actions = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        if part.startswith("output:"):
            actions.append(Action.output(_u32(part[len("output:"):], "output port")))
        elif part == "flood":
            actions.append(Action.flood())
        elif part == "drop":
            actions.append(Action.drop())
        else:
            raise BadField(f"unknown action {part!r}")
    return tuple(actions)


def out_spec_to_text(spec: OutPortSpec) -> str:
    if spec.kind is OutKind.PORT:
        return f"port:{spec.port}"
    return spec.kind.name.lower()


def out_spec_from_text(text: str) -> OutPortSpec:
    text = text.strip()
    if text.startswith("port:"):
        return OutPortSpec.to_port(_u32(text[len("port:"):], "out port"))
    if text == "flood":
        return OutPortSpec.flood()
    if text == "table":
        return OutPortSpec.table()
    raise BadField(f"unknown out-port spec {text!r}")


def _u32(text: str, what: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise BadField(f"{what}: not an integer: {text!r}") from None
    if not 0 <= value <= 0xFFFFFFFF:
        raise BadField(f"{what} out of range: {value}")
    return value


def _int_field(fields: Dict[str, str], key: str, default: Optional[int] = None) -> int:
    if key not in fields:
        if default is None:
            raise BadField(f"missing field {key!r}")
        return default
    try:
        return int(fields[key], 0)
    except ValueError:
        raise BadField(f"{key}: not an integer: {fields[key]!r}") from None


def subscription_to_kv(req: SubscriptionRequest) -> Dict[str, str]:
    out = {"op": "subscribe", "app_id": req.app_id, "group_id": req.group_id, "topic": req.topic}
    if req.filter is not None:
        out["filter.types"] = ",".join(EventType(t).topic_suffix for t in sorted(req.filter.allowed_event_types))
        if req.filter.allowed_devices is not None:
            out["filter.devices"] = ",".join(str(d) for d in sorted(req.filter.allowed_devices))
    return out


def subscription_from_kv(fields: Dict[str, str]) -> SubscriptionRequest:
    if fields.get("op") != "subscribe":
        raise BadField(f"expected op=subscribe, got {fields.get('op')!r}")
    for key in ("app_id", "group_id", "topic"):
        if not fields.get(key):
            raise BadField(f"missing field {key!r}")
    predicate = None
    if "filter.types" in fields or "filter.devices" in fields:
        try:
            types = [EventType[name.strip().upper()]
                     for name in fields.get("filter.types", "").split(",") if name.strip()]
        except KeyError as exc:
            raise BadField(f"unknown event type {exc.args[0]!r}") from None
        devices = None
        if "filter.devices" in fields:
            devices = [int(d, 0) for d in fields["filter.devices"].split(",") if d.strip()]
        predicate = FilterPredicate.of(*types, devices=devices)
    return SubscriptionRequest(fields["app_id"], fields["topic"], fields["group_id"], predicate)


def _confirmation_to_kv(conf: Confirmation) -> Dict[str, str]:
    if conf.granted:
        return {"ok": "true", "partitions": ",".join(str(p) for p in conf.assigned_partitions)}
    return {"ok": "false", "error": conf.error or "refused"}


def _confirmation_from_kv(fields: Dict[str, str]) -> Confirmation:
    if fields.get("ok") == "true":
        parts = tuple(int(p) for p in fields.get("partitions", "").split(",") if p)
        return Confirmation(True, parts)
    return Confirmation(False, error=fields.get("error", "refused"))


# ----- controller ---------------------------------------------------------------------

@dataclass(frozen=True)
class LivePorts:
    host: str = "127.0.0.1"
    southbound: int = 6653
    northbound: int = 8181
    events: int = 9092


@dataclass
class LiveCounters:
    sessions: int = 0
    packet_ins: int = 0
    published: int = 0
    filtered: int = 0
    flow_mods: int = 0
    packet_outs: int = 0
    flow_removed: int = 0
    bad_frames: int = 0


@dataclass
class _Subscriber:
    request: SubscriptionRequest
    wakeup: asyncio.Event = field(default_factory=asyncio.Event)


class LiveController:
    """The distribution app over real sockets.

    A switch opens its session with ``Echo(nonce=device_id)``; later echoes
    are answered in kind. Flow-table commands for one device are written
    under that device's lock so they reach it in request order.
    """

    def __init__(self, *, placement: FilterPlacement = FilterPlacement.CLIENT_SIDE,
                 settings: BrokerSettings = BrokerSettings(broker_delay=0)) -> None:
        self.placement = FilterPlacement(placement)
        self.settings = settings
        self.broker = Broker(broker_delay=0, persist_dir=settings.persist_dir)
        self.broker.create_topic(settings.topic, settings.partitions)
        self.broker.add_append_listener(self._on_append)
        self.sessions: Dict[int, asyncio.StreamWriter] = {}
        self.counters = LiveCounters()
        self.controller_filter: Optional[FilterPredicate] = None
        self._locks: Dict[int, asyncio.Lock] = defaultdict(asyncio.Lock)
        self._subscribers: List[_Subscriber] = []
        self._servers: List[asyncio.AbstractServer] = []

    # ----- lifecycle ---------------------------------------------------------
    async def start(self, ports: LivePorts = LivePorts()) -> LivePorts:
        """Bind all three servers; returns the ports actually bound (0 = ephemeral)."""
        handlers = (self._switch_session, self._nb_session, self._event_session)
        wanted = (ports.southbound, ports.northbound, ports.events)
        bound = []
        for handler, port in zip(handlers, wanted):
            server = await asyncio.start_server(handler, ports.host, port)
            self._servers.append(server)
            bound.append(server.sockets[0].getsockname()[1])
        LOG.info("live controller on %s: southbound %d, northbound %d, events %d", ports.host, *bound)
        return LivePorts(ports.host, *bound)

    async def serve_forever(self) -> None:
        await asyncio.gather(*(server.serve_forever() for server in self._servers))

    async def close(self) -> None:
        for server in self._servers:
            server.close()
        for server in self._servers:
            await server.wait_closed()
        self._servers.clear()
        for writer in list(self.sessions.values()):
            writer.close()

    # ----- southbound ----------------------------------------------------------
    async def _switch_session(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.counters.sessions += 1
        device: Optional[int] = None
        try:
            while True:
                body = await read_frame(reader)
                if body is None:
                    break
                try:
                    msg = decode_of(body)
                except CodecError as exc:
                    self.counters.bad_frames += 1
                    LOG.warning("undecodable southbound frame from device %s: %s", device, exc)
                    continue
                if isinstance(msg, Echo):
                    if device is None:
                        device = msg.nonce
                        self.sessions[device] = writer
                        LOG.info("switch %d connected", device)
                    async with self._locks[msg.nonce]:
                        await write_frame(writer, encode_of(Echo(msg.nonce)))
                elif isinstance(msg, PacketIn):
                    device = msg.device_id
                    self.sessions[device] = writer
                    self.on_packet_in(msg)
                elif isinstance(msg, FlowRemoved):
                    self.counters.flow_removed += 1
                    LOG.info("device %d removed entry %d (%s)", msg.device_id, msg.entry_id, msg.reason.name)
                else:
                    LOG.warning("ignoring %s from a switch", type(msg).__name__)
        except (CodecError, ConnectionError) as exc:
            LOG.warning("switch session %s dropped: %s", device, exc)
        finally:
            if device is not None and self.sessions.get(device) is writer:
                del self.sessions[device]
            writer.close()

    def on_packet_in(self, msg: PacketIn) -> None:
        self.counters.packet_ins += 1
        env = envelope_from_packet_in(msg, time.monotonic_ns())
        if self.placement is FilterPlacement.CONTROLLER_SIDE and self.controller_filter is not None \
                and not self.controller_filter.allows(env.event_type, env.device_id):
            self.counters.filtered += 1
            return
        result = self.broker.publish(self.settings.topic, device_key(msg.device_id),
                                     encode_envelope(env), env.timestamp_ns)
        if result.filtered:
            self.counters.filtered += 1
        else:
            self.counters.published += 1

    async def send_to_device(self, msg: OfMessage, device_id: int) -> None:
        async with self._locks[device_id]:
            writer = self.sessions.get(device_id)
            if writer is None:
                raise UnknownDevice(f"no session for device {device_id}")
            await write_frame(writer, encode_of(msg))

    # ----- northbound ----------------------------------------------------------
    async def _nb_session(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                body = await read_frame(reader)
                if body is None:
                    break
                try:
                    reply = await self.handle_request(decode_kv(body))
                except (CodecError, ControllerError) as exc:
                    reply = {"ok": "false", "error": str(exc)}
                await write_frame(writer, encode_kv(reply))
        except (CodecError, ConnectionError) as exc:
            LOG.warning("northbound session dropped: %s", exc)
        finally:
            writer.close()

    async def handle_request(self, fields: Dict[str, str]) -> Dict[str, str]:
        op = fields.get("op")
        device = _int_field(fields, "device") if op in ("install", "remove", "packet_out") else 0
        if op == "install":
            match = match_from_kv(fields)
            if match.is_empty():
                raise BadField("a rule needs at least one match field")
            entry = FlowEntry(
                priority=_int_field(fields, "priority"),
                match=match,
                actions=actions_from_text(fields.get("actions", "")),
                hard_timeout=_int_field(fields, "hard_timeout", 0),
                idle_timeout=_int_field(fields, "idle_timeout", 0),
            )
            await self.send_to_device(FlowMod(device, entry, FlowModOp.ADD), device)
            self.counters.flow_mods += 1
        elif op == "remove":
            entry = FlowEntry(_int_field(fields, "priority"), match_from_kv(fields))
            await self.send_to_device(FlowMod(device, entry, FlowModOp.DELETE), device)
            self.counters.flow_mods += 1
        elif op == "packet_out":
            try:
                frame = decode_frame(bytes.fromhex(fields.get("frame", "")))
            except ValueError as exc:
                raise BadField(f"frame: {exc}") from exc
            msg = PacketOut(device, out_spec_from_text(fields.get("out", "table")), frame,
                            _int_field(fields, "in_port", CONTROLLER_PORT))
            await self.send_to_device(msg, device)
            self.counters.packet_outs += 1
        else:
            raise BadField(f"unknown op {op!r}")
        return {"ok": "true"}

    # ----- event channel -------------------------------------------------------------
    def handle_subscribe(self, req: SubscriptionRequest) -> Confirmation:
        if req.topic not in self.broker.topics:
            return Confirmation(False, error="unknown topic")
        try:
            partitions = self.broker.subscribe(req.group_id, req.app_id, req.topic)
        except BrokerError as exc:
            return Confirmation(False, error=str(exc))
        self._subscribers.append(_Subscriber(req))
        self._refilter()
        return Confirmation(True, tuple(partitions))

    def _refilter(self) -> None:
        merged = merge_filters([s.request.filter for s in self._subscribers])
        if self.placement is FilterPlacement.SERVER_SIDE:
            self.broker.set_server_filter(self.settings.topic, merged)
        elif self.placement is FilterPlacement.CONTROLLER_SIDE:
            self.controller_filter = merged

    def _on_append(self, record) -> None:
        for sub in self._subscribers:
            sub.wakeup.set()

    async def _event_session(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        sub: Optional[_Subscriber] = None
        try:
            body = await read_frame(reader)
            if body is None:
                return
            try:
                req = subscription_from_kv(decode_kv(body))
            except CodecError as exc:
                await write_frame(writer, encode_kv({"ok": "false", "error": str(exc)}))
                return
            conf = self.handle_subscribe(req)
            await write_frame(writer, encode_kv(_confirmation_to_kv(conf)))
            if not conf.granted:
                return
            sub = self._subscribers[-1]
            await self._pump(sub, reader, writer)
        except (CodecError, ConnectionError) as exc:
            LOG.warning("event session dropped: %s", exc)
        finally:
            if sub is not None:
                self._subscribers.remove(sub)
                self.broker.unsubscribe(sub.request.group_id, sub.request.app_id, sub.request.topic)
                self._refilter()
            writer.close()

    async def _pump(self, sub: _Subscriber, reader: asyncio.StreamReader,
                    writer: asyncio.StreamWriter) -> None:
        req = sub.request
        closed = asyncio.ensure_future(reader.read())
        try:
            while not closed.done():
                sub.wakeup.clear()
                records = self.broker.poll(req.group_id, req.app_id, 500, time.monotonic_ns(), req.topic)
                for record in records:
                    await write_frame(writer, record.value)
                    self.broker.commit(req.group_id, record.partition, record.offset + 1, req.topic)
                if records:
                    continue
                waiter = asyncio.ensure_future(sub.wakeup.wait())
                await asyncio.wait({waiter, closed}, return_when=asyncio.FIRST_COMPLETED)
                waiter.cancel()
        finally:
            closed.cancel()


# ----- client ---------------------------------------------------------------------------

class LiveClient:
    """One connection to any of the three channels."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.reader = reader
        self.writer = writer
        self.predicate: Optional[FilterPredicate] = None

    @classmethod
    async def connect(cls, host: str, port: int) -> "LiveClient":
        reader, writer = await asyncio.open_connection(host, port)
        return cls(reader, writer)

    async def close(self) -> None:
        self.writer.close()
        await self.writer.wait_closed()

    # southbound
    async def send(self, msg: OfMessage) -> None:
        await write_frame(self.writer, encode_of(msg))

    async def receive(self) -> Optional[OfMessage]:
        body = await read_frame(self.reader)
        return None if body is None else decode_of(body)

    async def hello(self, device_id: int) -> Echo:
        await self.send(Echo(device_id))
        reply = await self.receive()
        if not isinstance(reply, Echo) or reply.nonce != device_id:
            raise ControllerError(f"unexpected hello reply {reply!r}")
        return reply

    # northbound
    async def request(self, fields: Dict[str, str]) -> Dict[str, str]:
        await write_frame(self.writer, encode_kv(fields))
        body = await read_frame(self.reader)
        if body is None:
            raise ConnectionResetError("controller closed the northbound channel")
        return decode_kv(body)

    async def install(self, device_id: int, entry: FlowEntry) -> Dict[str, str]:
        fields = {"op": "install", "device": str(device_id), "priority": str(entry.priority)}
        fields.update(match_to_kv(entry.match))
        fields["actions"] = actions_to_text(entry.actions)
        fields["hard_timeout"] = str(entry.hard_timeout)
        fields["idle_timeout"] = str(entry.idle_timeout)
        return await self.request(fields)

    async def remove(self, device_id: int, match: MatchFields, priority: int) -> Dict[str, str]:
        fields = {"op": "remove", "device": str(device_id), "priority": str(priority)}
        fields.update(match_to_kv(match))
        return await self.request(fields)

    async def packet_out(self, device_id: int, spec: OutPortSpec, frame,
                         in_port: int = CONTROLLER_PORT) -> Dict[str, str]:
        return await self.request({
            "op": "packet_out",
            "device": str(device_id),
            "out": out_spec_to_text(spec),
            "in_port": str(in_port),
            "frame": encode_frame(frame).hex(),
        })

    # events
    async def subscribe(self, req: SubscriptionRequest) -> Confirmation:
        conf = _confirmation_from_kv(await self.request(subscription_to_kv(req)))
        if conf.granted:
            self.predicate = req.filter
        return conf

    async def next_envelope(self) -> Optional[PacketEventEnvelope]:
        """Next envelope passing the subscription filter (client-side check)."""
        while True:
            body = await read_frame(self.reader)
            if body is None:
                return None
            try:
                env = decode_envelope(body)
            except CodecError as exc:
                LOG.warning("skipping undecodable envelope: %s", exc)
                continue
            if self.predicate is None or self.predicate.allows(env.event_type, env.device_id):
                return env


async def serve(ports: LivePorts = LivePorts(), placement: FilterPlacement = FilterPlacement.CLIENT_SIDE,
                settings: BrokerSettings = BrokerSettings(broker_delay=0)) -> None:
    controller = LiveController(placement=placement, settings=settings)
    await controller.start(ports)
    try:
        await controller.serve_forever()
    finally:
        await controller.close()


def run(ports: LivePorts = LivePorts(), placement: FilterPlacement = FilterPlacement.CLIENT_SIDE,
        settings: BrokerSettings = BrokerSettings(broker_delay=0)) -> None:
    try:
        asyncio.run(serve(ports, placement, settings))
    except KeyboardInterrupt:
        LOG.info("live controller stopped")
