"""Switch flow tables, links, pings and the bulk-flow model."""

from __future__ import annotations

import pytest

from exopipe.clock import MS, S, US, Simulator
from exopipe.fabric import Network, Switch, UnknownDestination, WrongDevice
from exopipe.netproto import (
    BROADCAST_MAC,
    ETH_TYPE_ARP,
    ETH_TYPE_LLDP,
    Action,
    ArpOp,
    ArpPacket,
    EthernetFrame,
    FlowEntry,
    FlowMod,
    FlowModOp,
    MatchFields,
    OutPortSpec,
    PacketIn,
    PacketOut,
    RemovedReason,
    decode_arp,
    encode_arp,
    ip_from_str,
    mac_from_int,
)
from exopipe.topology import Endpoint, TopologyGraph, build_fat_tree

H1_IP = ip_from_str("10.0.0.1")
H2_IP = ip_from_str("10.0.0.2")


def _pair_network(latency: int = 50 * US) -> Network:
    topo = TopologyGraph()
    topo.add_switch(1)
    topo.add_host("h1", mac_from_int(1), H1_IP, 1, 1, latency=latency)
    topo.add_host("h2", mac_from_int(2), H2_IP, 1, 2, latency=latency)
    return Network(Simulator(), topo)


def _to(mac_no: int, port: int, priority: int = 100, hard: int = 0) -> FlowMod:
    entry = FlowEntry(priority, MatchFields(eth_dst=mac_from_int(mac_no)), (Action.output(port),), hard_timeout=hard)
    return FlowMod(1, entry, FlowModOp.ADD)


def _frame(dst: int = 2, src: int = 1, ethertype: int = 0x0800) -> EthernetFrame:
    return EthernetFrame(mac_from_int(dst), mac_from_int(src), ethertype)


def test_empty_table_misses() -> None:
    assert Switch(1).lookup(_frame(), 1, 0) is None


def test_highest_priority_wins() -> None:
    sw = Switch(1, [1, 2])
    sw.apply_flow_mod(_to(2, 1, priority=10), 0)
    sw.apply_flow_mod(FlowMod(1, FlowEntry(20, MatchFields(in_port=1), (Action.output(2),))), 0)
    assert sw.lookup(_frame(), 1, 0).priority == 20


def test_equal_priority_prefers_older_entry() -> None:
    sw = Switch(1)
    first = sw.apply_flow_mod(_to(2, 1), 0)[0]
    sw.apply_flow_mod(FlowMod(1, FlowEntry(100, MatchFields(in_port=1), (Action.output(2),))), 0)
    assert sw.lookup(_frame(), 1, 0).entry_id == first.entry_id


def test_hits_update_counters() -> None:
    sw = Switch(1)
    sw.apply_flow_mod(_to(2, 2), 0)
    for t in (5, 9):
        entry = sw.lookup(_frame(), 1, t)
    assert (entry.packet_count, entry.byte_count, entry.last_hit_time) == (2, 28, 9)
    assert sw.peek(_frame(), 1, 10).packet_count == 2


def test_identical_add_replaces() -> None:
    sw = Switch(1)
    a = sw.apply_flow_mod(_to(2, 2), 0)[0]
    sw.lookup(_frame(), 1, 1)
    b = sw.apply_flow_mod(_to(2, 2), 7)[0]
    assert len(sw) == 1
    assert b.entry_id == a.entry_id
    assert (b.install_time, b.packet_count) == (7, 0)


def test_delete_and_wrong_device() -> None:
    sw = Switch(1)
    assert sw.apply_flow_mod(FlowMod(1, FlowEntry(100, MatchFields(eth_dst=mac_from_int(2))), FlowModOp.DELETE), 0) == []
    removed = []
    sw.removed_listener = lambda entry, msg: removed.append(msg.reason)
    sw.apply_flow_mod(_to(2, 2), 0)
    sw.apply_flow_mod(FlowMod(1, FlowEntry(100, MatchFields(eth_dst=mac_from_int(2))), FlowModOp.DELETE), 0)
    assert len(sw) == 0
    assert removed == [RemovedReason.DELETED]
    with pytest.raises(WrongDevice):
        sw.apply_flow_mod(FlowMod(2, FlowEntry(1, MatchFields(in_port=1))), 0)


def test_hard_timeout_boundary() -> None:
    sw = Switch(1)
    sw.apply_flow_mod(_to(2, 2, hard=10 * S), 0)
    assert sw.expire_entries(10 * S - 1) == []
    assert sw.lookup(_frame(), 1, 10 * S - 1) is not None
    (msg,) = sw.expire_entries(10 * S)
    assert msg.reason is RemovedReason.HARD_TIMEOUT
    assert len(sw) == 0


def test_idle_timeout_follows_last_hit() -> None:
    sw = Switch(1)
    sw.apply_flow_mod(FlowMod(1, FlowEntry(1, MatchFields(eth_dst=mac_from_int(2)), idle_timeout=1 * S)), 0)
    sw.lookup(_frame(), 1, 800 * MS)
    assert sw.expire_entries(1 * S) == []
    (msg,) = sw.expire_entries(1800 * MS)
    assert msg.reason is RemovedReason.IDLE_TIMEOUT


def test_no_timeouts_never_expire() -> None:
    sw = Switch(1)
    sw.apply_flow_mod(_to(2, 2), 0)
    assert sw.expire_entries(10**15) == []


def test_link_delivery_after_latency() -> None:
    net = _pair_network()
    net.host_send("h1", _frame())
    assert net.sim.pending == 1
    net.sim.run()
    (punt,) = net.sim.trace_of("switch.punt")
    assert punt.time == 50 * US


def test_flood_skips_in_port() -> None:
    topo = build_fat_tree(4)
    net = Network(Simulator(), topo)
    edge = topo.host(1).device_id
    net.packet_out(PacketOut(edge, OutPortSpec.flood(), _frame(ethertype=ETH_TYPE_LLDP), in_port=1))
    assert net.sim.pending == 3


def test_same_instant_frames_keep_send_order() -> None:
    net = _pair_network()
    net.host_send("h1", _frame(ethertype=ETH_TYPE_ARP))
    net.host_send("h1", _frame(ethertype=ETH_TYPE_LLDP))
    net.sim.run()
    punts = [ev.data["ethertype"] for ev in net.sim.trace_of("switch.punt")]
    assert punts == [ETH_TYPE_ARP, ETH_TYPE_LLDP]


def test_ping_over_preinstalled_rules() -> None:
    net = _pair_network()
    net.flow_mod(_to(2, 2))
    net.flow_mod(_to(1, 1))
    assert net.host_ping("h1", H2_IP, 3) == [200 * US] * 3
    assert len(net.sim.trace_of("ping.reply")) == 3
    assert net.counters.punted == 0


def test_ping_edge_cases() -> None:
    net = _pair_network()
    assert net.host_ping("h1", H2_IP, 0) == []
    with pytest.raises(UnknownDestination):
        net.host_ping("h1", ip_from_str("10.9.9.9"), 1)
    with pytest.raises(UnknownDestination):
        net.host_send("h7", _frame())


def test_unroutable_pings_are_lost() -> None:
    topo = TopologyGraph()
    topo.add_switch(1)
    topo.add_switch(2)
    topo.add_host("h1", mac_from_int(1), H1_IP, 1, 1)
    topo.add_host("h2", mac_from_int(2), H2_IP, 2, 1)
    net = Network(Simulator(), topo)
    assert net.host_ping("h1", H2_IP, 2, interval=10 * MS, timeout=100 * MS) == [None, None]
    assert len(net.sim.trace_of("ping.lost")) == 2


def test_punts_reach_the_controller() -> None:
    net = _pair_network()
    seen = []
    net.attach_controller(seen.append)
    net.host_send("h1", _frame())
    net.sim.run()
    (msg,) = seen
    assert isinstance(msg, PacketIn)
    assert (msg.device_id, msg.in_port) == (1, 1)


def test_packet_out_table_reruns_lookup() -> None:
    net = _pair_network()
    net.flow_mod(_to(2, 2))
    net.packet_out(PacketOut(1, OutPortSpec.table(), _frame(), in_port=1))
    net.sim.run()
    assert net.hosts["h2"].rx_frames == 1


def test_hosts_answer_arp_for_their_address() -> None:
    net = _pair_network()
    h2 = net.hosts["h2"]
    request = ArpPacket(ArpOp.REQUEST, mac_from_int(1), H1_IP, bytes(6), H2_IP)
    reply = h2.receive(EthernetFrame(BROADCAST_MAC, mac_from_int(1), ETH_TYPE_ARP, encode_arp(request)), 0)
    assert decode_arp(reply.payload).op is ArpOp.REPLY
    assert h2.receive(h2.gratuitous_arp(), 0) is None


def test_expiry_is_exact_and_notifies() -> None:
    net = _pair_network()
    events = []
    net.add_flow_listener(lambda event, device, entry: events.append((event, net.sim.now)))
    net.flow_mod(_to(2, 2, hard=10 * S))
    net.sim.run()
    assert events == [("installed", 0), ("removed", 10 * S)]
    assert net.installed_rules() == []


def test_bulk_flow_without_expiry_gets_full_capacity() -> None:
    net = _pair_network()
    net.flow_mod(_to(2, 2))
    result = net.host_bulk_flows("h1", "h2", 4, 150 * S)
    assert result.throughput == 100_000_000
    assert result.expiries == 0


def _reinstalling(net: Network, delay: int) -> None:
    def southbound(msg) -> None:
        if isinstance(msg, PacketIn):
            net.sim.schedule(delay, lambda: net.flow_mod(_to(2, 2, hard=10 * S)))
    net.attach_controller(southbound)


@pytest.mark.parametrize("n_conns", [1, 10])
def test_bulk_flow_stalls_on_every_expiry(n_conns: int) -> None:
    net = _pair_network()
    _reinstalling(net, 30 * MS)
    net.flow_mod(_to(2, 2, hard=10 * S))
    result = net.host_bulk_flows("h1", "h2", n_conns, 150 * S)
    assert result.expiries == 14
    assert result.stall_time == 14 * 30 * MS
    assert result.throughput == pytest.approx(100_000_000 * (150 - 0.03 * 14) / 150)


def test_bulk_flow_counts_first_install_stall() -> None:
    net = _pair_network()
    _reinstalling(net, 30 * MS)
    result = net.host_bulk_flows("h1", "h2", 1, 150 * S)
    # the first segment needs one link hop before it is punted
    assert result.stalls[0] == (0, 50 * US + 30 * MS)
    assert result.expiries == 14


def test_path_capacity_is_the_bottleneck() -> None:
    topo = TopologyGraph()
    topo.add_switch(1)
    topo.add_switch(2)
    topo.add_link(1, 2, 2, 2, capacity=10_000_000)
    topo.add_host("h1", mac_from_int(1), H1_IP, 1, 1)
    topo.add_host("h2", mac_from_int(2), H2_IP, 2, 1)
    net = Network(Simulator(), topo)
    assert net.path_capacity(topo.host("h1"), topo.host("h2")) == 10_000_000
    assert net.topology.peer(Endpoint(1, 2))[2] == 10_000_000


def test_late_reply_is_not_taken_for_a_new_one() -> None:
    net = _pair_network(latency=3 * MS)
    net.flow_mod(_to(2, 2))
    net.flow_mod(_to(1, 1))
    assert net.host_ping("h1", H2_IP, 1, timeout=10 * MS) == [None]
    # the first reply lands 2 ms into the second call
    assert net.host_ping("h1", H2_IP, 1, timeout=20 * MS, first_seq=2) == [12 * MS]


def test_packet_out_is_traced() -> None:
    net = _pair_network()
    net.packet_out(PacketOut(1, OutPortSpec.to_port(2), _frame(), in_port=1))
    (out,) = net.sim.trace_of("switch.packet_out")
    assert out.data == {"device": 1, "out_kind": "PORT", "port": 2}
    net.sim.run()
    assert net.counters.packet_outs == 1
