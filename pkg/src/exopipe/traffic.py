"""Deterministic traffic traces replayed against a simulated network."""

from __future__ import annotations

import random
from typing import Dict, Iterator, List, Sequence

from .clock import MS, S
from .fabric import Network

__all__ = ["mixed_stream", "ping_stream", "replay", "trace_end"]


def mixed_stream(
    hosts: Sequence[str],
    n_pings: int = 50,
    seed: int = 137,
    *,
    sweep_at: int = 0,
    announce_start: int = 100 * MS,
    announce_gap: int = 10 * MS,
    ping_start: int = 1 * S,
    ping_gap: int = 50 * MS,
) -> Iterator[Dict[str, object]]:
    """One LLDP sweep, one gratuitous ARP per host, then seeded random pings."""
    rng = random.Random(seed)
    yield {"t": sweep_at, "kind": "sweep"}
    for i, name in enumerate(hosts):
        yield {"t": announce_start + i * announce_gap, "kind": "announce", "host": name}
    if len(hosts) < 2:
        return
    for j in range(n_pings):
        src, dst = rng.sample(list(hosts), 2)
        yield {"t": ping_start + j * ping_gap, "kind": "ping", "src": src, "dst": dst, "seq": j % 0xFFFF + 1}


def ping_stream(src: str, dst: str, count: int, interval: int = 1 * S, start: int = 0) -> Iterator[Dict[str, object]]:
    for i in range(count):
        yield {"t": start + i * interval, "kind": "ping", "src": src, "dst": dst, "seq": i % 0xFFFF + 1}


def trace_end(events: List[Dict[str, object]]) -> int:
    return max((int(e["t"]) for e in events), default=0)


def replay(network: Network, events: List[Dict[str, object]], on_sweep=None) -> int:
    """Schedule every event relative to the current clock; returns the count.

    ``on_sweep`` is called for ``sweep`` events (usually an LLDP sweeper's
    ``sweep``); without it sweeps are ignored.
    """
    sim = network.sim
    base = sim.now
    scheduled = 0
    for event in events:
        kind = event["kind"]
        at = base + int(event["t"])
        if kind == "sweep":
            if on_sweep is None:
                continue
            sim.schedule_at(at, on_sweep, "trace-sweep")
        elif kind == "announce":
            sim.schedule_at(at, lambda e=event: network.host_announce(str(e["host"])), "trace-arp")
        elif kind == "ping":
            def send(e: Dict[str, object] = event) -> None:
                src = network.hosts[str(e["src"])]
                dst = network.hosts[str(e["dst"])]
                network.host_send(src.info.name, src.echo_request(dst.info.ip, int(e["seq"])))
            sim.schedule_at(at, send, "trace-ping")
        else:
            raise ValueError(f"unknown trace event kind {kind!r}")
        scheduled += 1
    return scheduled
