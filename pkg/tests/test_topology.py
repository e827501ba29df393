"""Fat-tree builder and topology graph queries."""

from __future__ import annotations

import networkx as nx
import pytest

from exopipe.clock import MS, US
from exopipe.netproto import ip_from_str, mac_from_int
from exopipe.topology import (
    Endpoint,
    InvalidParam,
    NoPath,
    TopologyGraph,
    TopologySpec,
    build_fat_tree,
    build_topology,
    shortest_switch_path,
)


def _roles(topo: TopologyGraph) -> dict:
    counts: dict = {}
    for sw in topo.switches.values():
        counts[sw.role] = counts.get(sw.role, 0) + 1
    return counts


@pytest.mark.parametrize("k,sites,switches,hosts", [(2, 1, 5, 2), (4, 1, 20, 16), (2, 5, 25, 10), (6, 1, 45, 54)])
def test_fat_tree_counts(k: int, sites: int, switches: int, hosts: int) -> None:
    topo = build_fat_tree(k, sites)
    assert len(topo.switches) == switches
    assert len(topo.hosts) == hosts
    roles = _roles(topo)
    assert roles["core"] == (k // 2) ** 2 * sites
    assert roles["agg"] == roles["edge"] == k * k // 2 * sites
    assert topo.is_connected()


def test_sites_form_a_ring() -> None:
    topo = build_fat_tree(2, 5)
    cores = [sw.device_id for sw in topo.switches.values() if sw.role == "core"]
    ring = [link for link in topo.links if link.a.node in cores and link.b.node in cores]
    assert len(ring) == 5
    graph = nx.Graph((link.a.node, link.b.node) for link in ring)
    assert all(degree == 2 for _, degree in graph.degree())
    assert nx.is_connected(graph)


def test_two_sites_share_one_link() -> None:
    topo = build_fat_tree(2, 2)
    cores = {sw.device_id for sw in topo.switches.values() if sw.role == "core"}
    assert sum(1 for link in topo.links if {link.a.node, link.b.node} <= cores) == 1


@pytest.mark.parametrize("k,sites", [(3, 1), (0, 1), (-2, 1), (4, 0)])
def test_invalid_shapes_rejected(k: int, sites: int) -> None:
    with pytest.raises(InvalidParam):
        build_fat_tree(k, sites)


def test_edge_ports_and_host_addresses() -> None:
    topo = build_fat_tree(4)
    h1, h4 = topo.host(1), topo.host(4)
    assert h1.name == "h1" and h1.mac == mac_from_int(1)
    assert h4.ip == ip_from_str("10.0.0.4")
    edge = topo.switches[h1.device_id]
    assert edge.role == "edge" and edge.pod == 0
    assert topo.ports_of(h1.device_id) == [1, 2, 3, 4]
    for port in (3, 4):
        peer, latency, _ = topo.peer(Endpoint(h1.device_id, port))
        assert topo.switches[peer.node].role == "agg"
        assert latency == 50 * US


def test_h1_to_h4_crosses_three_switches() -> None:
    topo = build_fat_tree(4)
    h1, h4 = topo.host(1), topo.host(4)
    path = shortest_switch_path(topo.switch_graph(), h1.device_id, h4.device_id)
    assert len(path) == 3
    assert topo.switches[path[1]].role == "agg"
    # ties go to the lowest device id
    assert path[1] == min(sw.device_id for sw in topo.switches.values() if sw.role == "agg" and sw.pod == 0)


def test_every_port_wired_once() -> None:
    topo = TopologyGraph()
    topo.add_switch(1)
    topo.add_switch(2)
    topo.add_link(1, 1, 2, 1)
    with pytest.raises(InvalidParam):
        topo.add_link(1, 1, 2, 2)
    with pytest.raises(InvalidParam):
        topo.add_host("h1", mac_from_int(1), 1, 2, 1)
    with pytest.raises(InvalidParam):
        topo.add_switch(1)
    with pytest.raises(InvalidParam):
        topo.add_link(1, 2, 3, 1)


def test_host_lookup() -> None:
    topo = build_fat_tree(2)
    assert topo.host("h2").name == "h2"
    assert topo.host_by_ip(topo.host(2).ip).name == "h2"
    assert topo.host_by_mac(mac_from_int(1)).name == "h1"
    assert topo.host_by_ip(0) is None
    with pytest.raises(InvalidParam):
        topo.host(3)
    with pytest.raises(InvalidParam):
        topo.host("h9")


def test_no_path_between_islands() -> None:
    topo = TopologyGraph()
    topo.add_switch(1)
    topo.add_switch(2)
    with pytest.raises(NoPath):
        shortest_switch_path(topo.switch_graph(), 1, 2)
    assert not topo.is_connected()


def test_spec_overrides_link_parameters() -> None:
    spec = TopologySpec(k=2, sites=2, link_latency=10 * US, host_latency=1 * US, intersite_latency=5 * MS)
    topo = build_topology(spec)
    latencies = {link.latency for link in topo.links}
    assert latencies == {10 * US, 5 * MS}
    assert {h.latency for h in topo.hosts.values()} == {1 * US}


def test_hosts_per_edge_bounds() -> None:
    assert len(build_topology(TopologySpec(k=4, hosts_per_edge=1)).hosts) == 8
    with pytest.raises(InvalidParam):
        build_topology(TopologySpec(k=4, hosts_per_edge=3))


def test_edge_list_is_deterministic() -> None:
    first = list(build_fat_tree(4, 2).edge_list())
    second = list(build_fat_tree(4, 2).edge_list())
    assert first == second
    assert first[0] == "s1:1 s5:3 50000ns 100000000bps"
    assert first[-1].startswith("h32:1 ")


def test_to_networkx_includes_hosts() -> None:
    topo = build_fat_tree(2)
    graph = topo.to_networkx()
    assert graph.number_of_nodes() == 7
    assert graph.edges["h1", topo.host(1).device_id]["ports"]["h1"] == 1
