"""Partitioned log, consumer groups, offsets and server-side filters."""

from __future__ import annotations

import csv

import pytest
import hypothesis.strategies as st
from hypothesis import given, settings

from exopipe.broker import (
    Broker,
    BrokerError,
    DuplicateTopic,
    FilterPredicate,
    InvalidPartitionCount,
    NotSubscribed,
    OffsetOutOfRange,
    UnknownTopic,
    device_key,
    fnv1a_64,
    partition_for,
    read_partition_log,
)
from exopipe.clock import MS
from exopipe.envelope import EventType, PacketEventEnvelope, encode_envelope


def _event(kind: EventType, device: int = 1) -> bytes:
    return encode_envelope(PacketEventEnvelope(kind, device, 1, 0, bytes(14)))


def _broker(partitions: int = 1, delay: int = 0) -> Broker:
    broker = Broker(broker_delay=delay)
    broker.create_topic("packets", partitions)
    return broker


def test_create_topic() -> None:
    broker = Broker()
    topic = broker.create_topic("packets", 4)
    assert topic.n_partitions == 4 and len(topic) == 0
    with pytest.raises(DuplicateTopic):
        broker.create_topic("packets", 1)
    with pytest.raises(InvalidPartitionCount):
        broker.create_topic("other", 0)
    with pytest.raises(UnknownTopic):
        broker.publish("missing", b"k", b"v", 0)


def test_fnv1a_reference_values() -> None:
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert partition_for(b"a", 4) == 0xAF63DC4C8601EC8C % 4
    assert device_key(5) == b"\x00" * 7 + b"\x05"


def test_first_publish_and_same_key_order() -> None:
    broker = _broker(4)
    assert broker.publish("packets", device_key(1), b"x", 0).partition == partition_for(device_key(1), 4)
    first = broker.publish("packets", device_key(9), b"a", 0)
    second = broker.publish("packets", device_key(9), b"b", 0)
    assert first.partition == second.partition
    assert second.offset == first.offset + 1

    single = _broker(1)
    result = single.publish("packets", b"k", b"v", 0)
    assert (result.partition, result.offset) == (0, 0)


def test_server_filter_drops_before_append() -> None:
    broker = _broker()
    broker.set_server_filter("packets", FilterPredicate.of(EventType.LLDP))
    assert broker.publish("packets", device_key(1), _event(EventType.ARP), 0).filtered
    assert len(broker.topic("packets")) == 0
    assert broker.topic("packets").filtered == 1
    assert not broker.publish("packets", device_key(1), _event(EventType.LLDP), 0).filtered
    # undecodable values never pass a filter
    assert broker.publish("packets", device_key(1), b"junk", 0).filtered
    assert len(broker.topic("packets")) == 1


def test_predicate_union_and_devices() -> None:
    lldp = FilterPredicate.of(EventType.LLDP, devices=[1])
    arp = FilterPredicate.of(EventType.ARP, devices=[2])
    both = lldp.union(arp)
    assert both.allows(EventType.ARP, 1) and both.allows(EventType.LLDP, 2)
    assert not both.allows(EventType.IPV4, 1)
    assert FilterPredicate().allows(EventType.OTHER, 99)
    assert lldp.union(FilterPredicate()).allowed_event_types == frozenset()


@pytest.mark.parametrize("consumers,expected", [
    (["a"], {"a": [0, 1, 2, 3]}),
    (["a", "b"], {"a": [0, 2], "b": [1, 3]}),
])
def test_round_robin_assignment(consumers, expected) -> None:
    broker = _broker(4)
    for c in consumers:
        broker.subscribe("g", c, "packets")
    assert {c: broker.assignment("g", c, "packets") for c in consumers} == expected


def test_more_consumers_than_partitions() -> None:
    broker = _broker(2)
    owned = [broker.subscribe("g", c, "packets") for c in ("a", "b", "c")]
    assert [broker.assignment("g", c, "packets") for c in ("a", "b", "c")] == [[0], [1], []]
    assert owned[-1] == []


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.lists(st.tuples(st.booleans(), st.sampled_from("abcde")), max_size=20))
def test_rebalance_keeps_assignment_disjoint_and_complete(n_partitions, ops) -> None:
    broker = _broker(n_partitions)
    members = set()
    for join, consumer in ops:
        if join:
            broker.subscribe("g", consumer, "packets")
            members.add(consumer)
        elif consumer in members:
            broker.unsubscribe("g", consumer, "packets")
            members.discard(consumer)
    if not members:
        return
    owned = [p for c in sorted(members) for p in broker.assignment("g", c, "packets")]
    assert sorted(owned) == list(range(n_partitions))


def test_poll_respects_max_and_delay() -> None:
    broker = _broker(delay=2 * MS)
    broker.subscribe("g", "c", "packets")
    for value in (b"r0", b"r1", b"r2"):
        broker.publish("packets", b"k", value, 0)
    assert broker.poll("g", "c", 2, 1 * MS) == []
    assert [r.value for r in broker.poll("g", "c", 2, 2 * MS)] == [b"r0", b"r1"]
    assert [r.value for r in broker.poll("g", "c", 10, 2 * MS)] == [b"r2"]
    assert broker.poll("g", "c", 10, 2 * MS) == []


def test_poll_requires_membership() -> None:
    broker = _broker()
    with pytest.raises(NotSubscribed):
        broker.poll("g", "nobody", 1, 0)


def test_commit_and_restart_give_at_least_once() -> None:
    broker = _broker()
    broker.subscribe("g", "c", "packets")
    for value in (b"r0", b"r1", b"r2"):
        broker.publish("packets", b"k", value, 0)
    assert len(broker.poll("g", "c", 2, 0)) == 2
    broker.commit("g", 0, 2)
    broker.restart("g", "c")
    assert [r.offset for r in broker.poll("g", "c", 10, 0)] == [2]
    broker.restart("g", "c")
    assert [r.offset for r in broker.poll("g", "c", 10, 0)] == [2]
    assert broker.committed("g", 0, "packets") == 2


def test_commit_bounds() -> None:
    broker = _broker()
    broker.subscribe("g", "c", "packets")
    broker.publish("packets", b"k", b"v", 0)
    with pytest.raises(OffsetOutOfRange):
        broker.commit("g", 0, 2)
    with pytest.raises(OffsetOutOfRange):
        broker.commit("g", 1, 0)
    with pytest.raises(NotSubscribed):
        broker.commit("other", 0, 0)


def test_commit_needs_topic_for_multi_topic_groups() -> None:
    broker = _broker()
    broker.create_topic("packets.lldp", 1)
    broker.subscribe("g", "c", "packets")
    broker.subscribe("g", "c", "packets.lldp")
    with pytest.raises(BrokerError):
        broker.commit("g", 0, 0)
    broker.commit("g", 0, 0, topic="packets.lldp")


def test_per_partition_order() -> None:
    broker = _broker(3)
    broker.subscribe("g", "c", "packets")
    for i in range(30):
        broker.publish("packets", device_key(i % 5), bytes([i]), i)
    seen = {}
    for record in broker.poll("g", "c", 100, 100):
        assert record.offset == seen.get(record.partition, -1) + 1
        seen[record.partition] = record.offset
    assert sum(offset + 1 for offset in seen.values()) == 30


def test_append_listener_sees_records() -> None:
    broker = _broker()
    seen = []
    broker.add_append_listener(seen.append)
    broker.publish("packets", b"k", b"v", 5)
    broker.remove_append_listener(seen.append)
    broker.publish("packets", b"k", b"w", 6)
    assert [(r.value, r.append_time) for r in seen] == [(b"v", 5)]


def test_persisted_log_reads_back(tmp_path) -> None:
    broker = Broker(broker_delay=0, persist_dir=tmp_path)
    broker.create_topic("packets", 1)
    for i in range(3):
        broker.publish("packets", device_key(i), _event(EventType.ARP, i), i * 10)
    records = read_partition_log(tmp_path / "packets-0.log")
    assert records == broker.topic("packets").partitions[0]


def test_stats_csv(tmp_path) -> None:
    broker = _broker()
    broker.subscribe("g", "c", "packets")
    broker.publish("packets", b"k", b"v", 0)
    path = tmp_path / "stats.csv"
    broker.write_stats_csv(path)
    rows = list(csv.DictReader(path.open()))
    assert rows[0] == {"kind": "topic", "name": "packets", "records": "1", "filtered": "0", "lag": ""}
    assert rows[1]["name"] == "g@packets" and rows[1]["lag"] == "1"
