"""Ground-truth network topology and the multi-site fat-tree builder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Set, Tuple, Union

import networkx as nx

from .clock import US
from .netproto import ip_to_str, mac_from_int, mac_to_str

__all__ = [
    "DEFAULT_LINK_LATENCY",
    "DEFAULT_LINK_CAPACITY",
    "InvalidParam",
    "NoPath",
    "Endpoint",
    "Link",
    "HostInfo",
    "SwitchInfo",
    "TopologySpec",
    "TopologyGraph",
    "build_fat_tree",
    "build_topology",
    "shortest_switch_path",
    "switch_mac",
]

DEFAULT_LINK_LATENCY = 50 * US
DEFAULT_LINK_CAPACITY = 100_000_000

Node = Union[int, str]
PortKey = Tuple[int, int]


class InvalidParam(ValueError):
    pass


class NoPath(LookupError):
    pass


@dataclass(frozen=True, order=True)
class Endpoint:
    """A port on a switch (int node) or a host interface (str node)."""

    node: Node
    port: int


@dataclass(frozen=True)
class Link:
    a: Endpoint
    b: Endpoint
    latency: int = DEFAULT_LINK_LATENCY
    capacity: int = DEFAULT_LINK_CAPACITY

    def key(self) -> Tuple[PortKey, PortKey]:
        ends = sorted([(self.a.node, self.a.port), (self.b.node, self.b.port)])
        return ends[0], ends[1]


@dataclass(frozen=True)
class HostInfo:
    name: str
    mac: bytes
    ip: int
    device_id: int
    port: int
    latency: int = DEFAULT_LINK_LATENCY
    capacity: int = DEFAULT_LINK_CAPACITY

    @property
    def attachment(self) -> Endpoint:
        return Endpoint(self.device_id, self.port)

    @property
    def endpoint(self) -> Endpoint:
        return Endpoint(self.name, 1)


@dataclass(frozen=True)
class SwitchInfo:
    device_id: int
    role: str = "switch"
    site: int = 0
    pod: Optional[int] = None

    @property
    def mac(self) -> bytes:
        return switch_mac(self.device_id)


@dataclass(frozen=True)
class TopologySpec:
    """Shape and link parameters of the fat-tree testbed (``[topology]``)."""

    k: int = 4
    sites: int = 1
    hosts_per_edge: Optional[int] = None
    link_latency: int = DEFAULT_LINK_LATENCY
    link_capacity: int = DEFAULT_LINK_CAPACITY
    host_latency: Optional[int] = None
    host_capacity: Optional[int] = None
    intersite_latency: Optional[int] = None
    intersite_capacity: Optional[int] = None


def switch_mac(device_id: int) -> bytes:
    # locally administered range, used as the LLDP source address
    return mac_from_int((0x02 << 40) | device_id)


class TopologyGraph:
    """Switches, hosts and undirected links; each (node, port) is wired at most once."""

    def __init__(self) -> None:
        self.switches: Dict[int, SwitchInfo] = {}
        self.hosts: Dict[str, HostInfo] = {}
        self.links: List[Link] = []
        self._wired: Dict[Endpoint, Tuple[Endpoint, int, int]] = {}

    # ----- construction -------------------------------------------------------
    def add_switch(self, device_id: int, *, role: str = "switch", site: int = 0,
                   pod: Optional[int] = None) -> SwitchInfo:
        if device_id <= 0:
            raise InvalidParam(f"device_id must be positive, got {device_id}")
        if device_id in self.switches:
            raise InvalidParam(f"duplicate device_id {device_id}")
        info = SwitchInfo(device_id, role, site, pod)
        self.switches[device_id] = info
        return info

    def add_link(self, a_device: int, a_port: int, b_device: int, b_port: int, *,
                 latency: int = DEFAULT_LINK_LATENCY,
                 capacity: int = DEFAULT_LINK_CAPACITY) -> Link:
        for device in (a_device, b_device):
            if device not in self.switches:
                raise InvalidParam(f"unknown switch {device}")
        link = Link(Endpoint(a_device, a_port), Endpoint(b_device, b_port), latency, capacity)
        self._wire(link.a, link.b, latency, capacity)
        self.links.append(link)
        return link

    def add_host(self, name: str, mac: bytes, ip: int, device_id: int, port: int, *,
                 latency: int = DEFAULT_LINK_LATENCY,
                 capacity: int = DEFAULT_LINK_CAPACITY) -> HostInfo:
        if name in self.hosts:
            raise InvalidParam(f"duplicate host {name}")
        if device_id not in self.switches:
            raise InvalidParam(f"unknown switch {device_id}")
        host = HostInfo(name, mac, ip, device_id, port, latency, capacity)
        self._wire(host.attachment, host.endpoint, latency, capacity)
        self.hosts[name] = host
        return host

    def _wire(self, a: Endpoint, b: Endpoint, latency: int, capacity: int) -> None:
        if latency < 0 or capacity <= 0:
            raise InvalidParam("link latency must be >= 0 and capacity > 0")
        for end in (a, b):
            if end in self._wired:
                raise InvalidParam(f"port {end.node}/{end.port} is already wired")
        self._wired[a] = (b, latency, capacity)
        self._wired[b] = (a, latency, capacity)

    # ----- queries ------------------------------------------------------------
    def peer(self, end: Endpoint) -> Optional[Tuple[Endpoint, int, int]]:
        """(peer endpoint, latency, capacity) or None for an unwired port."""
        return self._wired.get(end)

    def ports_of(self, device_id: int) -> List[int]:
        return sorted(end.port for end in self._wired if end.node == device_id)

    def host_by_ip(self, ip: int) -> Optional[HostInfo]:
        return next((h for h in self.hosts.values() if h.ip == ip), None)

    def host_by_mac(self, mac: bytes) -> Optional[HostInfo]:
        return next((h for h in self.hosts.values() if h.mac == mac), None)

    def host(self, ref: Union[str, int]) -> HostInfo:
        """Look a host up by name (``"h4"``) or 1-based index (``4``)."""
        if isinstance(ref, int):
            ordered = self.ordered_hosts()
            if not 1 <= ref <= len(ordered):
                raise InvalidParam(f"host index {ref} outside 1..{len(ordered)}")
            return ordered[ref - 1]
        if ref not in self.hosts:
            raise InvalidParam(f"unknown host {ref!r}")
        return self.hosts[ref]

    def ordered_hosts(self) -> List[HostInfo]:
        return list(self.hosts.values())

    def link_keys(self) -> Set[Tuple[PortKey, PortKey]]:
        return {link.key() for link in self.links}

    def host_ports(self) -> Set[PortKey]:
        return {(h.device_id, h.port) for h in self.hosts.values()}

    def switch_graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(sorted(self.switches))
        for link in self.links:
            graph.add_edge(link.a.node, link.b.node,
                           ports={link.a.node: link.a.port, link.b.node: link.b.port})
        return graph

    def to_networkx(self) -> nx.Graph:
        """Switches and hosts as one graph; hosts are string nodes."""
        graph = self.switch_graph()
        for host in self.hosts.values():
            graph.add_edge(host.name, host.device_id,
                           ports={host.name: 1, host.device_id: host.port})
        return graph

    def is_connected(self) -> bool:
        graph = self.to_networkx()
        return graph.number_of_nodes() > 0 and nx.is_connected(graph)

    def edge_list(self) -> Iterator[str]:
        """One line per link, switch links first, then host attachments."""
        for link in sorted(self.links, key=Link.key):
            (a, pa), (b, pb) = link.key()
            yield f"s{a}:{pa} s{b}:{pb} {link.latency}ns {link.capacity}bps"
        for host in self.hosts.values():
            yield (
                f"{host.name}:1 s{host.device_id}:{host.port} {host.latency}ns {host.capacity}bps"
                f" mac={mac_to_str(host.mac)} ip={ip_to_str(host.ip)}"
            )


def shortest_switch_path(graph: nx.Graph, src: int, dst: int) -> List[int]:
    """Fewest-hop switch path; ties go to the smallest next device_id."""
    try:
        return min(nx.all_shortest_paths(graph, src, dst), key=tuple)
    except (nx.NetworkXNoPath, nx.NodeNotFound) as exc:
        raise NoPath(f"no path from switch {src} to switch {dst}") from exc


def build_fat_tree(k: int, sites: int = 1, spec: Optional[TopologySpec] = None) -> TopologyGraph:
    """k-ary fat-tree per site, sites joined in a ring through their first core.

    Per site: (k/2)^2 cores, k^2/2 aggregation and k^2/2 edge switches and
    k^3/4 hosts (with the default k/2 hosts per edge switch). Edge ports
    1..k/2 face hosts and k/2+1..k face aggregation; aggregation ports
    1..k/2 face edges and k/2+1..k face cores; core port p+1 faces pod p;
    the ring uses core ports k+1 (next site) and k+2 (previous site).
    """
    if not isinstance(k, int) or k < 2 or k % 2:
        raise InvalidParam(f"k must be an even integer >= 2, got {k!r}")
    if not isinstance(sites, int) or sites < 1:
        raise InvalidParam(f"sites must be a positive integer, got {sites!r}")
    spec = spec or TopologySpec(k=k, sites=sites)
    half = k // 2
    per_edge = half if spec.hosts_per_edge is None else spec.hosts_per_edge
    if per_edge < 1 or per_edge > half:
        raise InvalidParam(f"hosts_per_edge must be in 1..{half}, got {per_edge}")

    sw_link = dict(latency=spec.link_latency, capacity=spec.link_capacity)
    host_link = dict(
        latency=spec.link_latency if spec.host_latency is None else spec.host_latency,
        capacity=spec.link_capacity if spec.host_capacity is None else spec.host_capacity,
    )
    ring_link = dict(
        latency=spec.link_latency if spec.intersite_latency is None else spec.intersite_latency,
        capacity=spec.link_capacity if spec.intersite_capacity is None else spec.intersite_capacity,
    )

    topo = TopologyGraph()
    next_id = iter(range(1, 1 << 62))
    host_no = 0
    first_cores: List[int] = []
    for site in range(sites):
        cores = [topo.add_switch(next(next_id), role="core", site=site).device_id
                 for _ in range(half * half)]
        first_cores.append(cores[0])
        for pod in range(k):
            aggs = [topo.add_switch(next(next_id), role="agg", site=site, pod=pod).device_id
                    for _ in range(half)]
            edges = [topo.add_switch(next(next_id), role="edge", site=site, pod=pod).device_id
                     for _ in range(half)]
            for a_idx, agg in enumerate(aggs):
                for c_off in range(half):
                    core = cores[a_idx * half + c_off]
                    topo.add_link(agg, half + 1 + c_off, core, pod + 1, **sw_link)
            for e_idx, edge in enumerate(edges):
                for a_idx, agg in enumerate(aggs):
                    topo.add_link(edge, half + 1 + a_idx, agg, e_idx + 1, **sw_link)
            for e_idx, edge in enumerate(edges):
                for h in range(per_edge):
                    host_no += 1
                    in_pod = e_idx * per_edge + h + 1
                    ip = (10 << 24) | (site << 16) | (pod << 8) | in_pod
                    topo.add_host(f"h{host_no}", mac_from_int(host_no), ip, edge, h + 1, **host_link)
    if sites == 2:
        topo.add_link(first_cores[0], k + 1, first_cores[1], k + 2, **ring_link)
    elif sites > 2:
        for site in range(sites):
            topo.add_link(first_cores[site], k + 1, first_cores[(site + 1) % sites], k + 2, **ring_link)
    return topo


def build_topology(spec: TopologySpec) -> TopologyGraph:
    return build_fat_tree(spec.k, spec.sites, spec)
