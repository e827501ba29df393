"""Control-plane core: switch sessions, the internal pipeline and the
message-distribution app that hands PACKET_INs to external applications.

In Internal mode registered processors see every PACKET_IN after
``internal_processing_delay``. In External mode each PACKET_IN becomes a
:class:`~exopipe.envelope.PacketEventEnvelope` published to the broker;
applications subscribe through :meth:`Controller.handle_subscribe` and talk
back through the modeled northbound channels (REST or RPC flow install,
RPC packet return).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Protocol, Tuple

from .broker import Broker, FilterPredicate, device_key
from .clock import MS, Simulator
from .envelope import EventType, encode_envelope, envelope_from_packet_in
from .fabric import Network
from .netproto import (
    CONTROLLER_PORT,
    EthernetFrame,
    FlowEntry,
    FlowMod,
    FlowModOp,
    FlowRemoved,
    MatchFields,
    OfMessage,
    OutPortSpec,
    PacketIn,
    PacketOut,
)

__all__ = [
    "PipelineMode",
    "FilterPlacement",
    "NbLatencyModel",
    "BrokerSettings",
    "SubscriptionRequest",
    "Confirmation",
    "InstallAck",
    "PendingInstall",
    "PacketProcessor",
    "ControllerError",
    "UnknownDevice",
    "InvalidRule",
    "WrongMode",
    "ControllerCounters",
    "Controller",
    "INSTALL_CHANNELS",
    "merge_filters",
]

LOG = logging.getLogger(__name__)

INSTALL_CHANNELS = ("rest", "rpc")


class PipelineMode(str, Enum):
    INTERNAL = "internal"
    EXTERNAL = "external"


class FilterPlacement(str, Enum):
    CLIENT_SIDE = "client"
    SERVER_SIDE = "server"
    CONTROLLER_SIDE = "controller"


@dataclass(frozen=True)
class NbLatencyModel:
    """Northbound channel delays in virtual nanoseconds (``[latency]``)."""

    rest_install_delay: int = 10 * MS
    rpc_packet_out_delay: int = 1 * MS
    internal_processing_delay: int = 1 * MS
    rpc_install_delay: int = 1 * MS

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    def install_delay(self, channel: str) -> int:
        if channel == "rest":
            return self.rest_install_delay
        if channel == "rpc":
            return self.rpc_install_delay
        raise ValueError(f"unknown install channel {channel!r}")


@dataclass(frozen=True)
class BrokerSettings:
    """Topic layout of the distribution app (``[broker]``)."""

    broker_delay: int = 2 * MS
    topic: str = "packets"
    partitions: int = 1
    persist_dir: Optional[str] = None

    def type_topic(self, event_type: EventType) -> str:
        return f"{self.topic}.{event_type.topic_suffix}"


@dataclass(frozen=True)
class SubscriptionRequest:
    app_id: str
    topic: str
    group_id: str
    filter: Optional[FilterPredicate] = None


@dataclass(frozen=True)
class Confirmation:
    granted: bool
    assigned_partitions: Tuple[int, ...] = ()
    error: Optional[str] = None


@dataclass(frozen=True)
class InstallAck:
    device_id: int
    entry_id: int
    op: FlowModOp
    time: int


@dataclass(frozen=True)
class PendingInstall:
    device_id: int
    active_at: int


class PacketProcessor(Protocol):
    def process(self, msg: PacketIn, controller: "Controller", now: int) -> None: ...


class ControllerError(RuntimeError):
    pass


class UnknownDevice(ControllerError):
    pass


class InvalidRule(ControllerError):
    pass


class WrongMode(ControllerError):
    pass


@dataclass
class ControllerCounters:
    packet_ins: int = 0
    published: int = 0
    filtered: int = 0
    installs: int = 0
    removals: int = 0
    packet_outs: int = 0
    flow_removed: int = 0


AckCallback = Callable[[InstallAck], None]


class Controller:
    """One controller instance bound to a simulated network and a broker."""

    def __init__(
        self,
        sim: Simulator,
        network: Network,
        broker: Broker,
        *,
        mode: PipelineMode = PipelineMode.INTERNAL,
        placement: Optional[FilterPlacement] = None,
        latency: NbLatencyModel = NbLatencyModel(),
        settings: BrokerSettings = BrokerSettings(),
    ) -> None:
        self.sim = sim
        self.network = network
        self.broker = broker
        self.mode = PipelineMode(mode)
        if self.mode is PipelineMode.EXTERNAL and placement is None:
            placement = FilterPlacement.CLIENT_SIDE
        self.placement = FilterPlacement(placement) if placement is not None else None
        self.latency = latency
        self.settings = settings
        self.counters = ControllerCounters()
        self.processors: List[PacketProcessor] = []
        self.subscriptions: Dict[str, List[SubscriptionRequest]] = {}
        self.controller_filter: Optional[FilterPredicate] = None
        self.install_log: List[Tuple[int, FlowEntry]] = []
        self._removed_listeners: List[Callable[[FlowRemoved], None]] = []

        for name in self.topic_names():
            if name not in broker.topics:
                broker.create_topic(name, settings.partitions)
        network.attach_controller(self.on_southbound)

    # ----- topology facts the controller learns from switch sessions ----------
    @property
    def devices(self) -> Dict[int, List[int]]:
        return {device_id: list(sw.ports) for device_id, sw in sorted(self.network.switches.items())}

    def _check_device(self, device_id: int) -> None:
        if device_id not in self.network.switches:
            raise UnknownDevice(f"unknown device {device_id}")

    def topic_names(self) -> List[str]:
        if self.placement is FilterPlacement.CONTROLLER_SIDE:
            return [self.settings.type_topic(t) for t in EventType]
        return [self.settings.topic]

    def topics_for(self, predicate: Optional[FilterPredicate]) -> List[str]:
        """Topics an application with ``predicate`` should subscribe to."""
        if self.placement is not FilterPlacement.CONTROLLER_SIDE:
            return [self.settings.topic]
        types = [t for t in EventType
                 if predicate is None or not predicate.allowed_event_types
                 or int(t) in predicate.allowed_event_types]
        return [self.settings.type_topic(t) for t in types]

    # ----- southbound ----------------------------------------------------------
    def on_southbound(self, msg: OfMessage) -> None:
        if isinstance(msg, PacketIn):
            self.on_packet_in(msg, self.sim.now)
        elif isinstance(msg, FlowRemoved):
            self.counters.flow_removed += 1
            for listener in list(self._removed_listeners):
                listener(msg)

    def on_flow_removed(self, listener: Callable[[FlowRemoved], None]) -> None:
        self._removed_listeners.append(listener)

    def on_packet_in(self, msg: PacketIn, now: int) -> None:
        self._check_device(msg.device_id)
        self.counters.packet_ins += 1
        self.sim.record("ctrl.packet_in", device=msg.device_id, in_port=msg.in_port)
        if self.mode is PipelineMode.INTERNAL:
            self.sim.schedule(self.latency.internal_processing_delay,
                              lambda: self._run_processors(msg), "internal")
            return
        env = envelope_from_packet_in(msg, now)
        if self.placement is FilterPlacement.CONTROLLER_SIDE:
            if self.controller_filter is not None and \
                    not self.controller_filter.allows(env.event_type, env.device_id):
                self.counters.filtered += 1
                return
            topic = self.settings.type_topic(env.event_type)
        else:
            topic = self.settings.topic
        result = self.broker.publish(topic, device_key(msg.device_id), encode_envelope(env), now)
        if result.filtered:
            self.counters.filtered += 1
            return
        self.counters.published += 1
        self.sim.record("ctrl.publish", topic=topic, partition=result.partition,
                        offset=result.offset, event=env.event_type.name)
        LOG.debug("published %s from %d/%d at %s/%d@%d", env.event_type.name, msg.device_id,
                  msg.in_port, topic, result.partition, result.offset)

    def _run_processors(self, msg: PacketIn) -> None:
        for proc in list(self.processors):
            proc.process(msg, self, self.sim.now)

    def register_internal_processor(self, proc: PacketProcessor) -> None:
        if self.mode is not PipelineMode.INTERNAL:
            raise WrongMode("internal processors need Internal mode")
        self.processors.append(proc)

    # ----- subscription endpoint -----------------------------------------------
    def handle_subscribe(self, req: SubscriptionRequest) -> Confirmation:
        if req.topic not in self.broker.topics:
            return Confirmation(False, error="unknown topic")
        try:
            partitions = self.broker.subscribe(req.group_id, req.app_id, req.topic)
        except Exception as exc:  # noqa: BLE001 - errors travel in the confirmation
            return Confirmation(False, error=str(exc))
        requests = self.subscriptions.setdefault(req.topic, [])
        requests.append(req)
        if self.placement is FilterPlacement.SERVER_SIDE:
            self.broker.set_server_filter(req.topic, merge_filters([r.filter for r in requests]))
        elif self.placement is FilterPlacement.CONTROLLER_SIDE:
            every = [r.filter for reqs in self.subscriptions.values() for r in reqs]
            self.controller_filter = merge_filters(every)
        LOG.info("%s subscribed to %s in group %s: partitions %s", req.app_id, req.topic,
                 req.group_id, partitions)
        return Confirmation(True, tuple(partitions))

    # ----- northbound channels ---------------------------------------------------
    def _start(self, now: Optional[int]) -> int:
        return self.sim.now if now is None else max(now, self.sim.now)

    def _validate_rule(self, rule: FlowEntry, device_id: int) -> None:
        self._check_device(device_id)
        if rule.match.is_empty():
            raise InvalidRule("a rule needs at least one match field")

    def nb_install_flow(self, rule: FlowEntry, device_id: int, now: Optional[int] = None, *,
                        channel: str = "rest", on_ack: Optional[AckCallback] = None) -> PendingInstall:
        """Install ``rule`` on ``device_id``; active (and acked) after the channel delay."""
        self._validate_rule(rule, device_id)
        active_at = self._start(now) + self.latency.install_delay(channel)
        mod = FlowMod(device_id, rule.copy(), FlowModOp.ADD)
        self.sim.record("nb.install", device=device_id, channel=channel, active_at=active_at)
        self.sim.schedule_at(active_at, lambda: self._apply(mod, on_ack), "nb-install")
        return PendingInstall(device_id, active_at)

    def nb_remove_flow(self, device_id: int, match: MatchFields, priority: int,
                       now: Optional[int] = None, *, channel: str = "rest",
                       on_ack: Optional[AckCallback] = None) -> PendingInstall:
        self._check_device(device_id)
        active_at = self._start(now) + self.latency.install_delay(channel)
        mod = FlowMod(device_id, FlowEntry(priority, match), FlowModOp.DELETE)
        self.sim.record("nb.remove", device=device_id, channel=channel, active_at=active_at)
        self.sim.schedule_at(active_at, lambda: self._apply(mod, on_ack), "nb-remove")
        return PendingInstall(device_id, active_at)

    def nb_packet_out(self, device_id: int, out_port_spec: OutPortSpec, frame: EthernetFrame,
                      now: Optional[int] = None, *, in_port: int = CONTROLLER_PORT) -> int:
        """Return ``frame`` to the pipeline over RPC; returns the delivery time."""
        self._check_device(device_id)
        at = self._start(now) + self.latency.rpc_packet_out_delay
        msg = PacketOut(device_id, out_port_spec, frame, in_port)
        self.sim.schedule_at(at, lambda: self._packet_out(msg), "nb-packet-out")
        return at

    def install_now(self, rule: FlowEntry, device_id: int) -> FlowEntry:
        """Direct install for internal processors (no northbound hop)."""
        self._validate_rule(rule, device_id)
        entries = self._apply(FlowMod(device_id, rule.copy(), FlowModOp.ADD), None)
        return entries[0]

    def packet_out_now(self, device_id: int, out_port_spec: OutPortSpec, frame: EthernetFrame,
                       in_port: int = CONTROLLER_PORT) -> None:
        self._check_device(device_id)
        self._packet_out(PacketOut(device_id, out_port_spec, frame, in_port))

    def _apply(self, mod: FlowMod, on_ack: Optional[AckCallback]) -> List[FlowEntry]:
        entries = self.network.flow_mod(mod)
        if mod.op is FlowModOp.ADD:
            self.counters.installs += 1
            self.install_log.append((mod.device_id, entries[0]))
        else:
            self.counters.removals += 1
        if on_ack is not None:
            entry_id = entries[0].entry_id if entries else 0
            on_ack(InstallAck(mod.device_id, entry_id, mod.op, self.sim.now))
        return entries

    def _packet_out(self, msg: PacketOut) -> None:
        self.counters.packet_outs += 1
        self.network.packet_out(msg)

    def installed_rule_keys(self) -> List[Tuple[int, Tuple[object, ...]]]:
        """Every install so far as (device, {match, priority, actions})."""
        return [(device, entry.rule_key()) for device, entry in self.install_log]


def merge_filters(filters: List[Optional[FilterPredicate]]) -> Optional[FilterPredicate]:
    """Union of subscriber predicates; any unfiltered subscriber disables filtering."""
    if not filters or any(f is None for f in filters):
        return None
    merged = filters[0]
    for f in filters[1:]:
        merged = merged.union(f)
    return merged
