"""External applications and their internal twins.

The external apps see the network only through broker polls and the
controller's northbound calls. Each shares its decision function with an
internal processor so both pipelines make the same choices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Set, Tuple, Union

import networkx as nx

from .broker import Broker, FilterPredicate, Record
from .clock import MS, S, Event, Simulator
from .controller import Controller, ControllerError, InstallAck, SubscriptionRequest
from .envelope import EventType, PacketEventEnvelope, decode_envelope, envelope_from_packet_in
from .netproto import (
    BROADCAST_MAC,
    ETH_TYPE_IPV4,
    ETH_TYPE_LLDP,
    LLDP_MULTICAST_MAC,
    Action,
    CodecError,
    EthernetFrame,
    FlowEntry,
    LldpFrame,
    MatchFields,
    OutPortSpec,
    PacketIn,
    decode_arp,
    decode_frame,
    decode_lldp,
    encode_lldp,
    extract_match,
)
from .topology import NoPath, TopologyGraph, shortest_switch_path, switch_mac

__all__ = [
    "MATCH_GRANULARITIES",
    "AppConfig",
    "DecodeError",
    "DiscoveredTopology",
    "ForwardingDecision",
    "FloodDecision",
    "FloodGuard",
    "build_rules",
    "reactive_forwarding_step",
    "topology_discovery_step",
    "path_return_step",
    "lldp_frame",
    "LldpSweeper",
    "ExternalApp",
    "ReactiveForwardingApp",
    "TopologyDiscoveryApp",
    "PathReturnApp",
    "InternalReactiveForwarding",
    "InternalTopologyDiscovery",
    "PathReturnProcessor",
]

LOG = logging.getLogger(__name__)

MATCH_GRANULARITIES = ("l2_pair", "l2_dst", "l3")

PortKey = Tuple[int, int]


@dataclass(frozen=True)
class AppConfig:
    """Application knobs shared by external apps and internal twins (``[apps]``)."""

    hard_timeout: int = 10 * S
    idle_timeout: int = 0
    priority: int = 100
    match_granularity: str = "l2_pair"
    bidirectional: bool = True
    sweep_period: int = 5 * S
    processing_delay: int = 1 * MS
    install_channel: str = "rest"
    max_poll_records: int = 500
    flood_suppression_window: int = 1 * S

    def __post_init__(self) -> None:
        if self.match_granularity not in MATCH_GRANULARITIES:
            raise ValueError(f"match_granularity must be one of {MATCH_GRANULARITIES}")
        if self.install_channel not in ("rest", "rpc"):
            raise ValueError("install_channel must be 'rest' or 'rpc'")
        if not 0 <= self.priority <= 0xFFFF:
            raise ValueError("priority must fit in u16")
        if min(self.hard_timeout, self.idle_timeout, self.sweep_period,
               self.processing_delay, self.flood_suppression_window) < 0:
            raise ValueError("durations must be >= 0")
        if self.max_poll_records < 1:
            raise ValueError("max_poll_records must be >= 1")


class DecodeError(CodecError):
    pass


# ----- discovered state ---------------------------------------------------------

class DiscoveredTopology:
    """Links and host locations as learned from LLDP and ARP (or copied from ground truth)."""

    def __init__(self) -> None:
        self.links: Dict[PortKey, PortKey] = {}
        self.host_locations: Dict[bytes, Tuple[int, int, int]] = {}
        self._graph: Optional[nx.Graph] = None

    @classmethod
    def from_graph(cls, topology: TopologyGraph) -> "DiscoveredTopology":
        found = cls()
        for link in topology.links:
            found.add_link((link.a.node, link.a.port), (link.b.node, link.b.port))
        for host in topology.hosts.values():
            found.host_locations[host.mac] = (host.device_id, host.port, host.ip)
        return found

    def add_link(self, a: PortKey, b: PortKey) -> bool:
        if self.links.get(a) == b and self.links.get(b) == a:
            return False
        for end in (a, b):
            stale = self.links.pop(end, None)
            if stale is not None:
                self.links.pop(stale, None)
        self.links[a] = b
        self.links[b] = a
        self._graph = None
        for mac, (device, port, _) in list(self.host_locations.items()):
            if (device, port) in (a, b):
                del self.host_locations[mac]
        return True

    def is_switch_port(self, device_id: int, port: int) -> bool:
        return (device_id, port) in self.links

    def link_set(self) -> Set[Tuple[PortKey, PortKey]]:
        """Undirected links, each as a sorted endpoint pair."""
        return {(a, b) if a < b else (b, a) for a, b in self.links.items()}

    def graph(self) -> nx.Graph:
        if self._graph is None:
            graph = nx.Graph()
            for (a, pa), (b, pb) in self.link_set():
                graph.add_edge(a, b, ports={a: pa, b: pb})
            self._graph = graph
        return self._graph

    def locate(self, mac: bytes) -> Optional[Tuple[int, int, int]]:
        return self.host_locations.get(mac)


@dataclass(frozen=True)
class ForwardingDecision:
    device_id: int
    in_port: int
    path: Tuple[PortKey, ...]
    rules: Tuple[Tuple[int, FlowEntry], ...]
    return_action: OutPortSpec


@dataclass(frozen=True)
class FloodDecision:
    device_id: int
    in_port: int


Decision = Union[ForwardingDecision, FloodDecision]


def _frame_of(env: PacketEventEnvelope) -> EthernetFrame:
    try:
        return decode_frame(env.frame)
    except CodecError as exc:
        raise DecodeError(f"envelope from device {env.device_id} carries a bad frame: {exc}") from exc


def _hops(topo: DiscoveredTopology, device_id: int, in_port: int,
          dst: Tuple[int, int, int]) -> Tuple[Tuple[int, int, int], ...]:
    """(device, in_port, out_port) along the shortest switch path to ``dst``."""
    dst_device, dst_port, _ = dst
    if device_id == dst_device:
        return ((device_id, in_port, dst_port),)
    graph = topo.graph()
    path = shortest_switch_path(graph, device_id, dst_device)
    hops = []
    current_in = in_port
    for here, there in zip(path, path[1:]):
        ports = graph.edges[here, there]["ports"]
        hops.append((here, current_in, ports[here]))
        current_in = ports[there]
    hops.append((dst_device, current_in, dst_port))
    return tuple(hops)


def _match(frame: EthernetFrame, granularity: str, reverse: bool) -> MatchFields:
    src, dst = (frame.dst_mac, frame.src_mac) if reverse else (frame.src_mac, frame.dst_mac)
    if granularity == "l2_dst":
        return MatchFields(eth_dst=dst)
    if granularity == "l3" and frame.ethertype == ETH_TYPE_IPV4:
        fields = extract_match(frame, 0)
        if fields.ip_src is not None:
            ip_src, ip_dst = (fields.ip_dst, fields.ip_src) if reverse else (fields.ip_src, fields.ip_dst)
            return MatchFields(ethertype=ETH_TYPE_IPV4, ip_src=ip_src, ip_dst=ip_dst)
    return MatchFields(eth_src=src, eth_dst=dst)


def build_rules(frame: EthernetFrame, hops: Tuple[Tuple[int, int, int], ...],
                cfg: AppConfig) -> Tuple[Tuple[int, FlowEntry], ...]:
    rules: List[Tuple[int, FlowEntry]] = []
    for device, in_port, out_port in hops:
        rules.append((device, FlowEntry(
            cfg.priority, _match(frame, cfg.match_granularity, False), (Action.output(out_port),),
            hard_timeout=cfg.hard_timeout, idle_timeout=cfg.idle_timeout,
        )))
        if cfg.bidirectional:
            rules.append((device, FlowEntry(
                cfg.priority, _match(frame, cfg.match_granularity, True), (Action.output(in_port),),
                hard_timeout=cfg.hard_timeout, idle_timeout=cfg.idle_timeout,
            )))
    return tuple(rules)


def reactive_forwarding_step(env: PacketEventEnvelope, topo: DiscoveredTopology,
                             cfg: AppConfig) -> Optional[Decision]:
    """Rules plus return action for a known destination, Flood otherwise; None for LLDP."""
    if env.event_type is EventType.LLDP:
        return None
    frame = _frame_of(env)
    if frame.ethertype == ETH_TYPE_LLDP:
        return None
    dst = topo.locate(frame.dst_mac) if frame.dst_mac != BROADCAST_MAC else None
    if dst is None:
        return FloodDecision(env.device_id, env.in_port)
    try:
        hops = _hops(topo, env.device_id, env.in_port, dst)
    except NoPath:
        LOG.debug("no discovered path from %d to %d; flooding", env.device_id, dst[0])
        return FloodDecision(env.device_id, env.in_port)
    return ForwardingDecision(
        device_id=env.device_id,
        in_port=env.in_port,
        path=tuple((device, out_port) for device, _, out_port in hops),
        rules=build_rules(frame, hops, cfg),
        return_action=OutPortSpec.to_port(hops[0][2]),
    )


def path_return_step(env: PacketEventEnvelope, topo: DiscoveredTopology) -> Optional[OutPortSpec]:
    """Port towards the destination from the punting switch, installing nothing."""
    if env.event_type is EventType.LLDP:
        return None
    frame = _frame_of(env)
    dst = topo.locate(frame.dst_mac)
    if dst is None:
        return None
    try:
        hops = _hops(topo, env.device_id, env.in_port, dst)
    except NoPath:
        return None
    return OutPortSpec.to_port(hops[0][2])


def topology_discovery_step(env: PacketEventEnvelope, state: DiscoveredTopology) -> DiscoveredTopology:
    """Fold one LLDP or ARP observation into ``state`` (idempotent)."""
    if env.event_type not in (EventType.LLDP, EventType.ARP):
        return state
    frame = _frame_of(env)
    try:
        if env.event_type is EventType.LLDP:
            lldp = decode_lldp(frame.payload)
            state.add_link((lldp.chassis_id, lldp.port_id), (env.device_id, env.in_port))
        else:
            arp = decode_arp(frame.payload)
            if not state.is_switch_port(env.device_id, env.in_port):
                state.host_locations[arp.sender_mac] = (env.device_id, env.in_port, arp.sender_ip)
    except CodecError as exc:
        raise DecodeError(f"bad {env.event_type.name} payload from device {env.device_id}: {exc}") from exc
    return state


class FloodGuard:
    """Refuse to flood the same frame twice within ``window`` (loop protection)."""

    def __init__(self, window: int) -> None:
        self.window = window
        self._last: Dict[bytes, int] = {}

    def __len__(self) -> int:
        return len(self._last)

    def allow(self, frame_bytes: bytes, now: int) -> bool:
        # insertion order is time order while ``now`` never decreases
        while self._last:
            oldest, at = next(iter(self._last.items()))
            if now - at < self.window:
                break
            del self._last[oldest]
        if frame_bytes in self._last:
            return False
        self._last[frame_bytes] = now
        return True


# ----- LLDP emission --------------------------------------------------------------

def lldp_frame(device_id: int, port: int) -> EthernetFrame:
    return EthernetFrame(LLDP_MULTICAST_MAC, switch_mac(device_id), ETH_TYPE_LLDP,
                         encode_lldp(LldpFrame(device_id, port)))


class LldpSweeper:
    """Every ``period`` send one LLDP PacketOut per switch port; period 0 sweeps once."""

    def __init__(self, controller: Controller, period: int = 5 * S) -> None:
        if period < 0:
            raise ValueError("period must be >= 0")
        self.controller = controller
        self.period = period
        self.sweeps = 0
        self.sent = 0
        self._next: Optional[Event] = None

    def start(self, at: Optional[int] = None) -> None:
        sim = self.controller.sim
        self._next = sim.schedule_at(sim.now if at is None else at, self.sweep, "lldp-sweep")

    def stop(self) -> None:
        Simulator.cancel(self._next)
        self._next = None

    def sweep(self) -> int:
        sent = 0
        for device_id, ports in self.controller.devices.items():
            for port in ports:
                self.controller.nb_packet_out(device_id, OutPortSpec.to_port(port), lldp_frame(device_id, port))
                sent += 1
        self.sweeps += 1
        self.sent += sent
        if self.period > 0 and self._next is not None:
            self._next = self.controller.sim.schedule(self.period, self.sweep, "lldp-sweep")
        LOG.debug("lldp sweep %d: %d packet-outs", self.sweeps, sent)
        return sent


# ----- external applications --------------------------------------------------------

class ExternalApp:
    """Consumer loop: wake when a record becomes visible, poll, process serially, commit.

    Subclasses implement :meth:`handle`. Records failing the app's own
    predicate are skipped at no processing cost (client-side filtering);
    undecodable records are logged and skipped.
    """

    group_id = "app"

    def __init__(self, controller: Controller, broker: Broker, *, app_id: Optional[str] = None,
                 group_id: Optional[str] = None, predicate: Optional[FilterPredicate] = None,
                 cfg: AppConfig = AppConfig()) -> None:
        self.controller = controller
        self.broker = broker
        self.sim: Simulator = controller.sim
        self.app_id = app_id or type(self).__name__
        self.group_id = group_id or self.group_id
        self.predicate = predicate
        self.cfg = cfg
        self.topics: List[str] = []
        self.busy_until = 0
        self.delivered = 0
        self.skipped = 0
        self.processed: List[PacketEventEnvelope] = []
        self._wakes: Set[int] = set()

    def start(self) -> List[str]:
        for topic in self.controller.topics_for(self.predicate):
            conf = self.controller.handle_subscribe(
                SubscriptionRequest(self.app_id, topic, self.group_id, self.predicate))
            if not conf.granted:
                raise ControllerError(f"{self.app_id}: subscription to {topic} refused: {conf.error}")
            self.topics.append(topic)
        self.broker.add_append_listener(self._on_append)
        return self.topics

    def stop(self) -> None:
        self.broker.remove_append_listener(self._on_append)
        for topic in self.topics:
            self.broker.unsubscribe(self.group_id, self.app_id, topic)
        self.topics = []

    def _on_append(self, record: Record) -> None:
        if record.topic in self.topics:
            self._wake_at(record.append_time + self.broker.broker_delay)

    def _wake_at(self, when: int) -> None:
        if when not in self._wakes:
            self._wakes.add(when)
            self.sim.schedule_at(max(when, self.sim.now), lambda: self._wake(when), "app-wake")

    def _wake(self, when: int) -> None:
        self._wakes.discard(when)
        now = self.sim.now
        records = self.broker.poll(self.group_id, self.app_id, self.cfg.max_poll_records, now)
        for record in records:
            self.delivered += 1
            start = max(now, self.busy_until)
            try:
                env = decode_envelope(record.value)
            except CodecError as exc:
                LOG.warning("%s skipped undecodable record %s/%d@%d: %s", self.app_id,
                            record.topic, record.partition, record.offset, exc)
                env = None
            if env is None or (self.predicate is not None
                               and not self.predicate.allows(env.event_type, env.device_id)):
                self.busy_until = start
                self.sim.schedule_at(start, lambda r=record: self._done(r, None), "app-skip")
                continue
            self.busy_until = start + self.cfg.processing_delay
            self.sim.schedule_at(self.busy_until, lambda r=record, e=env: self._done(r, e), "app-process")
        if len(records) == self.cfg.max_poll_records:
            self._wake_at(now)

    def _done(self, record: Record, env: Optional[PacketEventEnvelope]) -> None:
        if env is None:
            self.skipped += 1
        else:
            self.processed.append(env)
            try:
                self.handle(env, self.sim.now)
            except CodecError as exc:
                LOG.warning("%s could not decode event from device %d: %s", self.app_id, env.device_id, exc)
        self.broker.commit(self.group_id, record.partition, record.offset + 1, topic=record.topic)

    def handle(self, env: PacketEventEnvelope, now: int) -> None:
        raise NotImplementedError


class ReactiveForwardingApp(ExternalApp):
    """Installs per-hop rules for known destinations, then returns the packet."""

    group_id = "fwd"

    def __init__(self, controller: Controller, broker: Broker, topology: DiscoveredTopology,
                 **kwargs) -> None:
        super().__init__(controller, broker, **kwargs)
        self.topology = topology
        self.guard = FloodGuard(self.cfg.flood_suppression_window)
        self.decisions = 0
        self.floods = 0

    def handle(self, env: PacketEventEnvelope, now: int) -> None:
        decision = reactive_forwarding_step(env, self.topology, self.cfg)
        if decision is None:
            return
        frame = decode_frame(env.frame)
        if isinstance(decision, FloodDecision):
            if self.guard.allow(env.frame, now):
                self.floods += 1
                self.controller.nb_packet_out(env.device_id, OutPortSpec.flood(), frame, in_port=env.in_port)
            return
        self.decisions += 1
        waiting = {"acks": len(decision.rules)}

        def on_ack(ack: InstallAck) -> None:
            waiting["acks"] -= 1
            if waiting["acks"] == 0:
                self.controller.nb_packet_out(env.device_id, decision.return_action, frame,
                                              in_port=env.in_port)

        for device, rule in decision.rules:
            self.controller.nb_install_flow(rule, device, channel=self.cfg.install_channel, on_ack=on_ack)


class TopologyDiscoveryApp(ExternalApp):
    """Builds a :class:`DiscoveredTopology` from LLDP and ARP events."""

    group_id = "topo"

    def __init__(self, controller: Controller, broker: Broker, **kwargs) -> None:
        kwargs.setdefault("predicate", FilterPredicate.of(EventType.LLDP, EventType.ARP))
        super().__init__(controller, broker, **kwargs)
        self.topology = DiscoveredTopology()

    def handle(self, env: PacketEventEnvelope, now: int) -> None:
        topology_discovery_step(env, self.topology)


class PathReturnApp(ExternalApp):
    """Returns every punted packet one hop closer to its destination; installs nothing."""

    group_id = "ret"

    def __init__(self, controller: Controller, broker: Broker, topology: DiscoveredTopology,
                 **kwargs) -> None:
        super().__init__(controller, broker, **kwargs)
        self.topology = topology

    def handle(self, env: PacketEventEnvelope, now: int) -> None:
        spec = path_return_step(env, self.topology)
        if spec is not None:
            self.controller.nb_packet_out(env.device_id, spec, decode_frame(env.frame), in_port=env.in_port)


# ----- internal twins ------------------------------------------------------------------

class InternalReactiveForwarding:
    def __init__(self, topology: DiscoveredTopology, cfg: AppConfig = AppConfig()) -> None:
        self.topology = topology
        self.cfg = cfg
        self.guard = FloodGuard(cfg.flood_suppression_window)
        self.decisions = 0

    def process(self, msg: PacketIn, controller: Controller, now: int) -> None:
        env = envelope_from_packet_in(msg, now)
        try:
            decision = reactive_forwarding_step(env, self.topology, self.cfg)
        except DecodeError as exc:
            LOG.warning("internal forwarding skipped a packet: %s", exc)
            return
        if decision is None:
            return
        if isinstance(decision, FloodDecision):
            if self.guard.allow(env.frame, now):
                controller.packet_out_now(msg.device_id, OutPortSpec.flood(), msg.frame, msg.in_port)
            return
        self.decisions += 1
        for device, rule in decision.rules:
            controller.install_now(rule, device)
        controller.packet_out_now(msg.device_id, decision.return_action, msg.frame, msg.in_port)


class InternalTopologyDiscovery:
    def __init__(self) -> None:
        self.topology = DiscoveredTopology()

    def process(self, msg: PacketIn, controller: Controller, now: int) -> None:
        try:
            topology_discovery_step(envelope_from_packet_in(msg, now), self.topology)
        except DecodeError as exc:
            LOG.warning("internal discovery skipped a packet: %s", exc)


class PathReturnProcessor:
    def __init__(self, topology: DiscoveredTopology) -> None:
        self.topology = topology

    def process(self, msg: PacketIn, controller: Controller, now: int) -> None:
        spec = path_return_step(envelope_from_packet_in(msg, now), self.topology)
        if spec is not None:
            controller.packet_out_now(msg.device_id, spec, msg.frame, msg.in_port)
