from __future__ import annotations

import pytest

from exopipe.clock import MS, S, Simulator
from exopipe.fabric import Network
from exopipe.topology import build_fat_tree
from exopipe.traffic import mixed_stream, ping_stream, replay, trace_end


HOSTS = ["h1", "h2", "h3", "h4"]


def test_mixed_stream_is_seeded() -> None:
    a = list(mixed_stream(HOSTS, 20, seed=7))
    b = list(mixed_stream(HOSTS, 20, seed=7))
    c = list(mixed_stream(HOSTS, 20, seed=8))
    assert a == b
    assert a != c


def test_mixed_stream_shape() -> None:
    events = list(mixed_stream(HOSTS, 3, seed=1))
    assert events[0] == {"t": 0, "kind": "sweep"}
    assert [e["host"] for e in events if e["kind"] == "announce"] == HOSTS
    pings = [e for e in events if e["kind"] == "ping"]
    assert [e["t"] for e in pings] == [1 * S, 1 * S + 50 * MS, 1 * S + 100 * MS]
    assert all(e["src"] != e["dst"] for e in pings)
    assert trace_end(events) == 1 * S + 100 * MS


def test_single_host_never_pings() -> None:
    assert [e["kind"] for e in mixed_stream(["h1"], 5)] == ["sweep", "announce"]


def test_ping_stream_times() -> None:
    events = list(ping_stream("h1", "h2", 3, interval=2 * S, start=5))
    assert [e["t"] for e in events] == [5, 2 * S + 5, 4 * S + 5]
    assert trace_end([]) == 0


def test_replay_schedules_relative_to_now() -> None:
    net = Network(Simulator(), build_fat_tree(4))
    net.sim.run(until=1 * S)
    sweeps = []
    events = list(mixed_stream(HOSTS, 2, seed=3))
    assert replay(net, events, on_sweep=lambda: sweeps.append(net.sim.now)) == len(events)
    net.sim.run()
    assert sweeps == [1 * S]
    assert net.counters.host_sent == len(HOSTS) + 2


def test_replay_rejects_unknown_events() -> None:
    net = Network(Simulator(), build_fat_tree(2))
    with pytest.raises(ValueError):
        replay(net, [{"t": 0, "kind": "teleport"}])
