"""Simulated data plane: flow-table switches, links and hosts in virtual time.

One :class:`Network` owns every switch and host of a topology and drives
them from a :class:`~exopipe.clock.Simulator`. Table misses are punted to
whatever southbound handler the controller attached; frames move across
links by scheduling a delivery ``latency`` nanoseconds later.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .clock import S, Event, Simulator
from .netproto import (
    BROADCAST_MAC,
    ETH_TYPE_ARP,
    ETH_TYPE_IPV4,
    IP_PROTO_ICMP,
    Action,
    ActionType,
    ArpOp,
    ArpPacket,
    CodecError,
    EchoKind,
    EthernetFrame,
    FlowEntry,
    FlowMod,
    FlowModOp,
    FlowRemoved,
    IcmpEcho,
    OfMessage,
    OutKind,
    PacketIn,
    PacketOut,
    RemovedReason,
    TcpSegment,
    decode_arp,
    decode_icmp_echo,
    encode_arp,
    encode_icmp_echo,
    encode_tcp,
    extract_match,
)
from .topology import Endpoint, HostInfo, NoPath, TopologyGraph, shortest_switch_path

__all__ = [
    "FlowEntry",
    "WrongDevice",
    "UnknownDestination",
    "NoPath",
    "Switch",
    "Host",
    "FabricCounters",
    "BulkFlowResult",
    "Network",
    "DEFAULT_PING_INTERVAL",
    "DEFAULT_PING_TIMEOUT",
]

LOG = logging.getLogger(__name__)

DEFAULT_PING_INTERVAL = 1 * S
DEFAULT_PING_TIMEOUT = 1 * S
BULK_PORT = 5201

RemovedListener = Callable[[FlowEntry, FlowRemoved], None]
FlowListener = Callable[[str, int, FlowEntry], None]


class WrongDevice(ValueError):
    pass


class UnknownDestination(LookupError):
    pass


# ----- switch -----------------------------------------------------------------

class Switch:
    """Flow table of one device; lookups are ordered by (-priority, entry_id)."""

    def __init__(self, device_id: int, ports: Optional[List[int]] = None) -> None:
        self.device_id = device_id
        self.ports: List[int] = sorted(ports or [])
        self.flow_table: List[FlowEntry] = []
        self.removed_listener: Optional[RemovedListener] = None
        self._next_entry_id = 1

    def __len__(self) -> int:
        return len(self.flow_table)

    @staticmethod
    def _order(entry: FlowEntry) -> Tuple[int, int]:
        return (-entry.priority, entry.entry_id)

    @staticmethod
    def _expired_reason(entry: FlowEntry, now: int) -> Optional[RemovedReason]:
        if entry.hard_timeout > 0 and now >= entry.install_time + entry.hard_timeout:
            return RemovedReason.HARD_TIMEOUT
        if entry.idle_timeout > 0 and now >= entry.last_hit_time + entry.idle_timeout:
            return RemovedReason.IDLE_TIMEOUT
        return None

    @staticmethod
    def next_deadline(entry: FlowEntry) -> Optional[int]:
        deadlines = []
        if entry.hard_timeout > 0:
            deadlines.append(entry.install_time + entry.hard_timeout)
        if entry.idle_timeout > 0:
            deadlines.append(entry.last_hit_time + entry.idle_timeout)
        return min(deadlines) if deadlines else None

    def _match_entry(self, frame: EthernetFrame, in_port: int, now: int) -> Optional[FlowEntry]:
        packet = extract_match(frame, in_port)
        for entry in self.flow_table:
            if self._expired_reason(entry, now) is None and entry.match.covers(packet):
                return entry
        return None

    def lookup(self, frame: EthernetFrame, in_port: int, now: int) -> Optional[FlowEntry]:
        """Highest-priority live entry covering the frame (hit), or None (miss)."""
        self.expire_entries(now)
        entry = self._match_entry(frame, in_port, now)
        if entry is not None:
            entry.packet_count += 1
            entry.byte_count += 14 + len(frame.payload)
            entry.last_hit_time = now
        return entry

    def peek(self, frame: EthernetFrame, in_port: int, now: int) -> Optional[FlowEntry]:
        """Like :meth:`lookup` but leaves counters and the table untouched."""
        return self._match_entry(frame, in_port, now)

    def apply_flow_mod(self, mod: FlowMod, now: int) -> List[FlowEntry]:
        """Apply Add/Delete; returns the installed entry or the deleted ones."""
        if mod.device_id != self.device_id:
            raise WrongDevice(f"flow_mod for device {mod.device_id} sent to {self.device_id}")
        key = (mod.entry.priority, mod.entry.match)
        same = [e for e in self.flow_table if (e.priority, e.match) == key]
        if mod.op is FlowModOp.DELETE:
            for entry in same:
                self.flow_table.remove(entry)
                self._notify(entry, RemovedReason.DELETED)
            return same
        entry = mod.entry.copy()
        if same:
            entry.entry_id = same[0].entry_id
            self.flow_table.remove(same[0])
        else:
            entry.entry_id = self._next_entry_id
            self._next_entry_id += 1
        entry.install_time = now
        entry.last_hit_time = now
        entry.packet_count = 0
        entry.byte_count = 0
        bisect.insort(self.flow_table, entry, key=self._order)
        return [entry]

    def expire_entries(self, now: int) -> List[FlowRemoved]:
        removed: List[FlowRemoved] = []
        keep: List[FlowEntry] = []
        for entry in self.flow_table:
            reason = self._expired_reason(entry, now)
            if reason is None:
                keep.append(entry)
            else:
                removed.append(self._notify(entry, reason))
        self.flow_table = keep
        return removed

    def clear(self) -> None:
        self.flow_table = []

    def _notify(self, entry: FlowEntry, reason: RemovedReason) -> FlowRemoved:
        msg = FlowRemoved(self.device_id, entry.entry_id, reason)
        if self.removed_listener is not None:
            self.removed_listener(entry, msg)
        return msg


# ----- host -------------------------------------------------------------------

class Host:
    """End host: answers pings and ARP for its own address, sinks TCP bytes."""

    def __init__(self, info: HostInfo, neighbors: Dict[int, bytes]) -> None:
        self.info = info
        self.neighbors = neighbors
        self.ident = int.from_bytes(info.mac[-2:], "big")
        self.pending: Dict[int, int] = {}
        self.rtts: Dict[int, int] = {}
        self.rx_frames = 0
        self.rx_bytes = 0
        self.ignored = 0
        self.on_reply: Optional[Callable[[int, int], None]] = None

    def echo_request(self, dst_ip: int, seq: int) -> EthernetFrame:
        echo = IcmpEcho(EchoKind.REQUEST, self.ident, seq, self.info.ip, dst_ip)
        return EthernetFrame(self.neighbors[dst_ip], self.info.mac, ETH_TYPE_IPV4, encode_icmp_echo(echo))

    def gratuitous_arp(self) -> EthernetFrame:
        arp = ArpPacket(ArpOp.REQUEST, self.info.mac, self.info.ip, b"\x00" * 6, self.info.ip)
        return EthernetFrame(BROADCAST_MAC, self.info.mac, ETH_TYPE_ARP, encode_arp(arp))

    def receive(self, frame: EthernetFrame, now: int) -> Optional[EthernetFrame]:
        """Consume a delivered frame; returns a response frame when one is due."""
        if frame.dst_mac not in (self.info.mac, BROADCAST_MAC):
            self.ignored += 1
            return None
        self.rx_frames += 1
        self.rx_bytes += 14 + len(frame.payload)
        try:
            if frame.ethertype == ETH_TYPE_ARP:
                return self._on_arp(decode_arp(frame.payload))
            if frame.ethertype == ETH_TYPE_IPV4 and len(frame.payload) > 9 \
                    and frame.payload[9] == IP_PROTO_ICMP:
                return self._on_echo(decode_icmp_echo(frame.payload), now)
        except CodecError:
            LOG.warning("%s dropped an undecodable frame", self.info.name)
        return None

    def _on_arp(self, arp: ArpPacket) -> Optional[EthernetFrame]:
        if arp.op is not ArpOp.REQUEST or arp.target_ip != self.info.ip or arp.sender_ip == self.info.ip:
            return None
        reply = ArpPacket(ArpOp.REPLY, self.info.mac, self.info.ip, arp.sender_mac, arp.sender_ip)
        return EthernetFrame(arp.sender_mac, self.info.mac, ETH_TYPE_ARP, encode_arp(reply))

    def _on_echo(self, echo: IcmpEcho, now: int) -> Optional[EthernetFrame]:
        if echo.dst_ip != self.info.ip:
            return None
        if echo.kind is EchoKind.REQUEST:
            reply = echo.reply()
            dst_mac = self.neighbors.get(reply.dst_ip, BROADCAST_MAC)
            return EthernetFrame(dst_mac, self.info.mac, ETH_TYPE_IPV4, encode_icmp_echo(reply))
        sent = self.pending.pop(echo.seq, None) if echo.ident == self.ident else None
        if sent is not None:
            self.rtts[echo.seq] = now - sent
            if self.on_reply is not None:
                self.on_reply(echo.seq, now - sent)
        return None


# ----- network ------------------------------------------------------------------

@dataclass
class FabricCounters:
    host_sent: int = 0
    packet_outs: int = 0
    delivered: int = 0
    dropped: int = 0
    punted: int = 0
    blackholed: int = 0


@dataclass
class BulkFlowResult:
    """Fluid-model outcome of ``n_conns`` connections sharing one path."""

    n_conns: int
    duration: int
    capacity: int
    stall_time: int
    expiries: int
    stalls: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def throughput(self) -> float:
        """Aggregate bits/sec over the whole run."""
        return self.capacity * (self.duration - self.stall_time) / self.duration

    @property
    def per_connection(self) -> float:
        return self.throughput / self.n_conns


class Network:
    """Every switch, host and link of a topology, driven by one simulator."""

    def __init__(self, sim: Simulator, topology: TopologyGraph, *, sb_latency: int = 0) -> None:
        self.sim = sim
        self.topology = topology
        self.sb_latency = sb_latency
        self.counters = FabricCounters()
        self.southbound: Optional[Callable[[OfMessage], None]] = None
        self._flow_listeners: List[FlowListener] = []
        self._expiry_events: Dict[Tuple[int, int], Event] = {}
        self.switches: Dict[int, Switch] = {}
        for device_id in topology.switches:
            switch = Switch(device_id, topology.ports_of(device_id))
            switch.removed_listener = self._removed_callback(device_id)
            self.switches[device_id] = switch
        neighbors = {h.ip: h.mac for h in topology.hosts.values()}
        self.hosts: Dict[str, Host] = {
            name: Host(info, neighbors) for name, info in topology.hosts.items()
        }

    # ----- wiring to the control plane -----------------------------------------
    def attach_controller(self, handler: Callable[[OfMessage], None]) -> None:
        self.southbound = handler

    def add_flow_listener(self, listener: FlowListener) -> None:
        """``listener(event, device_id, entry)`` with event "installed" or "removed"."""
        self._flow_listeners.append(listener)

    def remove_flow_listener(self, listener: FlowListener) -> None:
        self._flow_listeners.remove(listener)

    def _to_controller(self, msg: OfMessage) -> None:
        if self.southbound is None:
            return
        handler = self.southbound
        self.sim.schedule(self.sb_latency, lambda: handler(msg), "sb")

    def _removed_callback(self, device_id: int) -> RemovedListener:
        def on_removed(entry: FlowEntry, msg: FlowRemoved) -> None:
            Simulator.cancel(self._expiry_events.pop((device_id, entry.entry_id), None))
            self.sim.record("flow.removed", device=device_id, entry_id=entry.entry_id,
                            reason=msg.reason.name)
            for listener in list(self._flow_listeners):
                listener("removed", device_id, entry)
            self._to_controller(msg)
        return on_removed

    # ----- data plane ----------------------------------------------------------
    def forward(self, frame: EthernetFrame, src: Endpoint) -> Optional[Event]:
        """Send ``frame`` out of ``src``; it reaches the peer after the link latency."""
        wired = self.topology.peer(src)
        if wired is None:
            self.counters.blackholed += 1
            LOG.warning("frame emitted on unwired port %s/%s", src.node, src.port)
            return None
        peer, latency, _ = wired
        return self.sim.schedule(latency, lambda: self._deliver(frame, peer), "link")

    def _deliver(self, frame: EthernetFrame, end: Endpoint) -> None:
        if isinstance(end.node, int):
            self._switch_receive(self.switches[end.node], frame, end.port)
            return
        host = self.hosts[end.node]
        self.counters.delivered += 1
        self.sim.record("host.rx", host=host.info.name, ethertype=frame.ethertype)
        response = host.receive(frame, self.sim.now)
        if response is not None:
            self.host_send(host.info.name, response)

    def _switch_receive(self, switch: Switch, frame: EthernetFrame, in_port: int) -> None:
        entry = switch.lookup(frame, in_port, self.sim.now)
        if entry is None:
            self.counters.punted += 1
            self.sim.record("switch.punt", device=switch.device_id, in_port=in_port,
                            ethertype=frame.ethertype)
            self._to_controller(PacketIn(switch.device_id, in_port, frame))
            return
        self._apply_actions(switch, entry.actions, frame, in_port)

    def _apply_actions(self, switch: Switch, actions: Tuple[Action, ...],
                       frame: EthernetFrame, in_port: int) -> None:
        if not actions:
            self.counters.dropped += 1
        for action in actions:
            if action.kind is ActionType.OUTPUT:
                self.forward(frame, Endpoint(switch.device_id, action.port))
            elif action.kind is ActionType.FLOOD:
                self._flood(switch, frame, in_port)
            else:
                self.counters.dropped += 1

    def _flood(self, switch: Switch, frame: EthernetFrame, in_port: int) -> int:
        copies = 0
        for port in switch.ports:
            if port != in_port:
                self.forward(frame, Endpoint(switch.device_id, port))
                copies += 1
        return copies

    def inject(self, device_id: int, in_port: int, frame: EthernetFrame) -> None:
        """Present ``frame`` to a switch as if it just arrived on ``in_port``."""
        self._switch_receive(self._switch(device_id), frame, in_port)

    def _switch(self, device_id: int) -> Switch:
        try:
            return self.switches[device_id]
        except KeyError:
            raise WrongDevice(f"no switch with device_id {device_id}") from None

    # ----- southbound commands -------------------------------------------------
    def packet_out(self, msg: PacketOut) -> None:
        switch = self._switch(msg.device_id)
        self.counters.packet_outs += 1
        spec = msg.out_port_spec
        self.sim.record("switch.packet_out", device=msg.device_id, out_kind=spec.kind.name, port=spec.port)
        if spec.kind is OutKind.PORT:
            self.forward(msg.frame, Endpoint(msg.device_id, spec.port))
        elif spec.kind is OutKind.FLOOD:
            self._flood(switch, msg.frame, msg.in_port)
        else:
            self._switch_receive(switch, msg.frame, msg.in_port)

    def flow_mod(self, msg: FlowMod) -> List[FlowEntry]:
        switch = self._switch(msg.device_id)
        now = self.sim.now
        if msg.op is FlowModOp.ADD:
            replaced = [e for e in switch.flow_table
                        if (e.priority, e.match) == (msg.entry.priority, msg.entry.match)]
            for old in replaced:
                Simulator.cancel(self._expiry_events.pop((switch.device_id, old.entry_id), None))
        entries = switch.apply_flow_mod(msg, now)
        if msg.op is FlowModOp.ADD:
            entry = entries[0]
            self._schedule_expiry(switch, entry)
            self.sim.record("flow.active", device=switch.device_id, entry_id=entry.entry_id,
                            priority=entry.priority, match=_match_repr(entry))
            for listener in list(self._flow_listeners):
                listener("installed", switch.device_id, entry)
        return entries

    def _schedule_expiry(self, switch: Switch, entry: FlowEntry) -> None:
        deadline = Switch.next_deadline(entry)
        if deadline is None:
            return
        key = (switch.device_id, entry.entry_id)

        def check() -> None:
            self._expiry_events.pop(key, None)
            switch.expire_entries(self.sim.now)
            if entry in switch.flow_table:
                # idle entry was hit since; look again at the new deadline
                self._schedule_expiry(switch, entry)

        self._expiry_events[key] = self.sim.schedule_at(max(deadline, self.sim.now), check, "expire")

    def clear_flow_tables(self) -> None:
        for event in self._expiry_events.values():
            Simulator.cancel(event)
        self._expiry_events.clear()
        for switch in self.switches.values():
            switch.clear()

    def installed_rules(self) -> List[Tuple[int, FlowEntry]]:
        return [(device, entry) for device, sw in sorted(self.switches.items()) for entry in sw.flow_table]

    # ----- hosts -----------------------------------------------------------------
    def _host(self, name: str) -> Host:
        try:
            return self.hosts[name]
        except KeyError:
            raise UnknownDestination(f"unknown host {name!r}") from None

    def host_send(self, name: str, frame: EthernetFrame) -> None:
        host = self._host(name)
        self.counters.host_sent += 1
        self.forward(frame, host.info.endpoint)

    def host_announce(self, name: str) -> None:
        """Gratuitous ARP from ``name``: how hosts make themselves discoverable."""
        self.host_send(name, self._host(name).gratuitous_arp())

    def host_ping(self, src: str, dst_ip: int, count: int, *,
                  interval: int = DEFAULT_PING_INTERVAL,
                  timeout: int = DEFAULT_PING_TIMEOUT, first_seq: int = 1) -> List[Optional[int]]:
        """Send ``count`` echo requests and run the clock until each has its answer
        window closed. Returns one RTT (ns) per request; None marks a lost one.
        Sequence numbers start at ``first_seq`` so late replies from an earlier
        call are not mistaken for new ones.
        """
        host = self._host(src)
        if dst_ip not in host.neighbors:
            raise UnknownDestination(f"no host owns address {dst_ip:#010x}")
        if count <= 0:
            return []
        start = self.sim.now
        host.pending.clear()
        host.rtts.clear()
        host.on_reply = lambda seq, rtt: self.sim.record("ping.reply", host=src, seq=seq, rtt=rtt)

        for i in range(count):
            seq = (first_seq - 1 + i) % 0xFFFF + 1

            def send(seq: int = seq) -> None:
                host.pending[seq] = self.sim.now
                self.sim.record("ping.request", host=src, seq=seq)
                self.host_send(src, host.echo_request(dst_ip, seq))

            self.sim.schedule_at(start + i * interval, send, "ping")
        try:
            self.sim.run(until=start + (count - 1) * interval + timeout)
        finally:
            host.on_reply = None

        results: List[Optional[int]] = []
        for i in range(count):
            seq = (first_seq - 1 + i) % 0xFFFF + 1
            rtt = host.rtts.pop(seq, None)
            if rtt is None or rtt > timeout:
                LOG.warning("ping %s seq %d lost", src, seq)
                self.sim.record("ping.lost", host=src, seq=seq)
                results.append(None)
            else:
                results.append(rtt)
        host.pending.clear()
        return results

    def path_capacity(self, src: HostInfo, dst: HostInfo) -> int:
        graph = self.topology.switch_graph()
        path = shortest_switch_path(graph, src.device_id, dst.device_id)
        capacity = min(src.capacity, dst.capacity)
        for a, b in zip(path, path[1:]):
            ports = graph.edges[a, b]["ports"]
            wired = self.topology.peer(Endpoint(a, ports[a]))
            capacity = min(capacity, wired[2])
        return capacity

    def path_ready(self, src: HostInfo, dst: HostInfo, frame: EthernetFrame) -> bool:
        """True when installed rules alone carry ``frame`` from ``src`` to ``dst``."""
        at = src.attachment
        for _ in range(len(self.switches) + 1):
            entry = self.switches[at.node].peek(frame, at.port, self.sim.now)
            out = next((a for a in entry.actions if a.kind is ActionType.OUTPUT), None) if entry else None
            if out is None:
                return False
            wired = self.topology.peer(Endpoint(at.node, out.port))
            if wired is None:
                return False
            at = wired[0]
            if not isinstance(at.node, int):
                return at.node == dst.name
        return False

    def host_bulk_flows(self, src: str, dst: str, n_conns: int, duration: int) -> BulkFlowResult:
        """Fluid model of ``n_conns`` long-lived TCP connections from ``src`` to ``dst``.

        The connections split the path bottleneck equally while rules carry
        the traffic and all stall whenever they do not. When a rule on the
        path expires, the next segment reaches the ingress switch at once and
        is punted; the stall lasts until covering rules are back.
        """
        if n_conns < 1:
            raise ValueError("n_conns must be >= 1")
        if duration <= 0:
            raise ValueError("duration must be positive")
        src_host, dst_host = self._host(src), self._host(dst)
        capacity = self.path_capacity(src_host.info, dst_host.info)
        segment = TcpSegment(src_host.info.ip, dst_host.info.ip, 40000, BULK_PORT, payload=b"\x00" * 64)
        frame = EthernetFrame(dst_host.info.mac, src_host.info.mac, ETH_TYPE_IPV4, encode_tcp(segment))
        start = self.sim.now
        end = start + duration
        stalls: List[Tuple[int, int]] = []
        state = {"ready": False, "since": start, "expiries": 0}

        def on_flow_event(event: str, device_id: int, entry: FlowEntry) -> None:
            ready = self.path_ready(src_host.info, dst_host.info, frame)
            now = self.sim.now
            if ready and not state["ready"]:
                stalls.append((state["since"], now))
                self.sim.record("bulk.ready", stalled=now - state["since"])
            elif not ready and state["ready"]:
                state["since"] = now
                state["expiries"] += 1
                self.sim.record("bulk.stall")
                self.sim.schedule(0, lambda: self.inject(src_host.info.device_id, src_host.info.port, frame),
                                  "bulk-head")
            state["ready"] = ready

        self.add_flow_listener(on_flow_event)
        try:
            if self.path_ready(src_host.info, dst_host.info, frame):
                state["ready"] = True
            else:
                self.host_send(src, frame)
            self.sim.run(until=end)
        finally:
            self.remove_flow_listener(on_flow_event)
        if not state["ready"]:
            stalls.append((state["since"], end))
        stall_time = sum(min(b, end) - a for a, b in stalls if a < end)
        LOG.debug("bulk %s->%s: %d stalls, %d ns stalled", src, dst, len(stalls), stall_time)
        return BulkFlowResult(n_conns, duration, capacity, stall_time, state["expiries"], stalls)


def _match_repr(entry: FlowEntry) -> str:
    return ",".join(
        f"{name}={getattr(entry.match, name).hex() if isinstance(getattr(entry.match, name), bytes) else getattr(entry.match, name)}"
        for name in entry.match.present()
    )
