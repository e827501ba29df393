"""Embedded topic-partitioned append-only log with consumer groups.

A single in-process broker: topics split into partitions, records keyed by
device id so one switch's events stay ordered, consumer groups that divide
partitions round-robin and track committed offsets (at-least-once).
Visibility is delayed by ``broker_delay`` virtual nanoseconds after append.
"""

from __future__ import annotations

import csv
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

from .clock import MS
from .envelope import EventType, peek_event
from .netproto import CodecError

__all__ = [
    "DEFAULT_BROKER_DELAY",
    "BrokerError",
    "DuplicateTopic",
    "InvalidPartitionCount",
    "UnknownTopic",
    "NotSubscribed",
    "OffsetOutOfRange",
    "FilterPredicate",
    "Record",
    "PublishResult",
    "FILTERED",
    "Topic",
    "ConsumerGroup",
    "Broker",
    "fnv1a_64",
    "partition_for",
    "device_key",
    "read_partition_log",
]

LOG = logging.getLogger(__name__)

DEFAULT_BROKER_DELAY = 2 * MS

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_FRAME = struct.Struct("!I")
_RECORD_HEAD = struct.Struct("!QQH")


class BrokerError(RuntimeError):
    pass


class DuplicateTopic(BrokerError):
    pass


class InvalidPartitionCount(BrokerError):
    pass


class UnknownTopic(BrokerError):
    pass


class NotSubscribed(BrokerError):
    pass


class OffsetOutOfRange(BrokerError):
    pass


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def partition_for(key: bytes, n_partitions: int) -> int:
    return fnv1a_64(key) % n_partitions


def device_key(device_id: int) -> bytes:
    return device_id.to_bytes(8, "big")


@dataclass(frozen=True)
class FilterPredicate:
    """Which envelopes pass; an empty type set allows every type."""

    allowed_event_types: FrozenSet[int] = frozenset()
    allowed_devices: Optional[FrozenSet[int]] = None

    @classmethod
    def of(cls, *types: EventType, devices: Optional[Iterable[int]] = None) -> "FilterPredicate":
        return cls(frozenset(int(t) for t in types), None if devices is None else frozenset(devices))

    def allows(self, event_type: int, device_id: int) -> bool:
        if self.allowed_event_types and int(event_type) not in self.allowed_event_types:
            return False
        return self.allowed_devices is None or device_id in self.allowed_devices

    def allows_value(self, value: bytes) -> bool:
        try:
            event_type, device_id = peek_event(value)
        except CodecError:
            return False
        return self.allows(event_type, device_id)

    def union(self, other: "FilterPredicate") -> "FilterPredicate":
        """Smallest predicate of this shape admitting everything either admits."""
        if not self.allowed_event_types or not other.allowed_event_types:
            types: FrozenSet[int] = frozenset()
        else:
            types = self.allowed_event_types | other.allowed_event_types
        if self.allowed_devices is None or other.allowed_devices is None:
            devices = None
        else:
            devices = self.allowed_devices | other.allowed_devices
        return FilterPredicate(types, devices)


@dataclass(frozen=True)
class Record:
    topic: str
    partition: int
    offset: int
    key: bytes
    value: bytes
    append_time: int


@dataclass(frozen=True)
class PublishResult:
    partition: int
    offset: int

    @property
    def filtered(self) -> bool:
        return self.partition < 0


FILTERED = PublishResult(-1, -1)


class Topic:
    def __init__(self, name: str, n_partitions: int) -> None:
        self.name = name
        self.partitions: List[List[Record]] = [[] for _ in range(n_partitions)]
        self.server_filter: Optional[FilterPredicate] = None
        self.filtered = 0
        self.lock = threading.Lock()

    @property
    def n_partitions(self) -> int:
        return len(self.partitions)

    def end_offset(self, partition: int) -> int:
        return len(self.partitions[partition])

    def __len__(self) -> int:
        return sum(len(p) for p in self.partitions)


@dataclass
class ConsumerGroup:
    group_id: str
    topic: str
    members: Set[str] = field(default_factory=set)
    assignment: Dict[int, str] = field(default_factory=dict)
    committed: Dict[int, int] = field(default_factory=dict)
    positions: Dict[int, int] = field(default_factory=dict)

    def rebalance(self, n_partitions: int) -> None:
        """Round-robin partitions over members sorted by id; positions rewind to commits."""
        ordered = sorted(self.members)
        self.assignment = {p: ordered[p % len(ordered)] for p in range(n_partitions)} if ordered else {}
        self.positions = {p: self.committed.get(p, 0) for p in range(n_partitions)}

    def owned(self, consumer_id: str) -> List[int]:
        return sorted(p for p, owner in self.assignment.items() if owner == consumer_id)


AppendListener = Callable[[Record], None]


class Broker:
    """Single-node log. All calls take the virtual ``now`` from the caller."""

    def __init__(self, *, broker_delay: int = DEFAULT_BROKER_DELAY,
                 persist_dir: Optional[Path] = None) -> None:
        if broker_delay < 0:
            raise ValueError("broker_delay must be >= 0")
        self.broker_delay = broker_delay
        self.persist_dir = Path(persist_dir) if persist_dir is not None else None
        self.topics: Dict[str, Topic] = {}
        self.groups: Dict[Tuple[str, str], ConsumerGroup] = {}
        self._listeners: List[AppendListener] = []
        self._groups_lock = threading.Lock()

    # ----- topics ---------------------------------------------------------------
    def create_topic(self, name: str, n_partitions: int) -> Topic:
        if name in self.topics:
            raise DuplicateTopic(f"topic {name!r} already exists")
        if n_partitions < 1:
            raise InvalidPartitionCount(f"topic {name!r} needs >= 1 partition, got {n_partitions}")
        topic = Topic(name, n_partitions)
        self.topics[name] = topic
        LOG.debug("created topic %s with %d partitions", name, n_partitions)
        return topic

    def topic(self, name: str) -> Topic:
        try:
            return self.topics[name]
        except KeyError:
            raise UnknownTopic(f"unknown topic {name!r}") from None

    def set_server_filter(self, name: str, predicate: Optional[FilterPredicate]) -> None:
        self.topic(name).server_filter = predicate

    def add_append_listener(self, listener: AppendListener) -> None:
        self._listeners.append(listener)

    def remove_append_listener(self, listener: AppendListener) -> None:
        self._listeners.remove(listener)

    # ----- produce --------------------------------------------------------------
    def publish(self, name: str, key: bytes, value: bytes, now: int) -> PublishResult:
        topic = self.topic(name)
        with topic.lock:
            if topic.server_filter is not None and not topic.server_filter.allows_value(value):
                topic.filtered += 1
                return FILTERED
            partition = partition_for(key, topic.n_partitions)
            log = topic.partitions[partition]
            record = Record(name, partition, len(log), bytes(key), bytes(value), now)
            log.append(record)
            if self.persist_dir is not None:
                self._persist(record)
        for listener in list(self._listeners):
            listener(record)
        return PublishResult(partition, record.offset)

    def _persist(self, record: Record) -> None:
        self.persist_dir.mkdir(parents=True, exist_ok=True)
        body = _RECORD_HEAD.pack(record.offset, record.append_time, len(record.key)) + record.key + record.value
        with (self.persist_dir / f"{record.topic}-{record.partition}.log").open("ab") as fh:
            fh.write(_FRAME.pack(len(body)) + body)

    # ----- consume --------------------------------------------------------------
    def _group(self, group_id: str, topic: str) -> ConsumerGroup:
        key = (group_id, topic)
        if key not in self.groups:
            self.groups[key] = ConsumerGroup(group_id, topic)
        return self.groups[key]

    def subscribe(self, group_id: str, consumer_id: str, topic: str) -> List[int]:
        n = self.topic(topic).n_partitions
        with self._groups_lock:
            group = self._group(group_id, topic)
            group.members.add(consumer_id)
            group.rebalance(n)
            return group.owned(consumer_id)

    def unsubscribe(self, group_id: str, consumer_id: str, topic: Optional[str] = None) -> None:
        with self._groups_lock:
            for group in self._member_groups(group_id, consumer_id, topic):
                group.members.discard(consumer_id)
                group.rebalance(self.topics[group.topic].n_partitions)

    def _member_groups(self, group_id: str, consumer_id: str, topic: Optional[str]) -> List[ConsumerGroup]:
        found = [
            g for (gid, name), g in sorted(self.groups.items())
            if gid == group_id and consumer_id in g.members and (topic is None or name == topic)
        ]
        if not found:
            raise NotSubscribed(f"{consumer_id!r} is not a member of group {group_id!r}")
        return found

    def assignment(self, group_id: str, consumer_id: str, topic: str) -> List[int]:
        return self._member_groups(group_id, consumer_id, topic)[0].owned(consumer_id)

    def poll(self, group_id: str, consumer_id: str, max_records: int, now: int,
             topic: Optional[str] = None) -> List[Record]:
        """Up to ``max_records`` visible records from the consumer's partitions.

        A record is visible once ``now >= append_time + broker_delay``; each
        partition is read in offset order from the consumer's position and
        stops at the first record not yet visible.
        """
        out: List[Record] = []
        for group in self._member_groups(group_id, consumer_id, topic):
            t = self.topics[group.topic]
            with t.lock:
                for partition in group.owned(consumer_id):
                    log = t.partitions[partition]
                    pos = group.positions.get(partition, 0)
                    while pos < len(log) and len(out) < max_records:
                        record = log[pos]
                        if record.append_time + self.broker_delay > now:
                            break
                        out.append(record)
                        pos += 1
                    group.positions[partition] = pos
        return out

    def commit(self, group_id: str, partition: int, offset: int, topic: Optional[str] = None) -> None:
        candidates = [g for (gid, name), g in self.groups.items()
                      if gid == group_id and (topic is None or name == topic)]
        if not candidates:
            raise NotSubscribed(f"no group {group_id!r} on topic {topic!r}")
        if len(candidates) > 1:
            raise BrokerError(f"group {group_id!r} reads several topics; pass topic=")
        group = candidates[0]
        t = self.topics[group.topic]
        if not 0 <= partition < t.n_partitions:
            raise OffsetOutOfRange(f"{group.topic} has no partition {partition}")
        if not 0 <= offset <= t.end_offset(partition):
            raise OffsetOutOfRange(
                f"offset {offset} outside 0..{t.end_offset(partition)} of {group.topic}/{partition}"
            )
        group.committed[partition] = offset

    def committed(self, group_id: str, partition: int, topic: str) -> int:
        group = self.groups.get((group_id, topic))
        return 0 if group is None else group.committed.get(partition, 0)

    def restart(self, group_id: str, consumer_id: str) -> None:
        """Forget uncommitted progress: the consumer resumes from committed offsets."""
        for group in self._member_groups(group_id, consumer_id, None):
            for partition in group.owned(consumer_id):
                group.positions[partition] = group.committed.get(partition, 0)

    # ----- statistics -------------------------------------------------------------
    def stats_rows(self) -> List[Dict[str, object]]:
        rows: List[Dict[str, object]] = []
        for name, t in sorted(self.topics.items()):
            rows.append({"kind": "topic", "name": name, "records": len(t), "filtered": t.filtered, "lag": ""})
        for (gid, name), group in sorted(self.groups.items()):
            t = self.topics[name]
            lag = sum(t.end_offset(p) - group.committed.get(p, 0) for p in range(t.n_partitions))
            rows.append({"kind": "group", "name": f"{gid}@{name}", "records": "", "filtered": "", "lag": lag})
        return rows

    def write_stats_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["kind", "name", "records", "filtered", "lag"])
            writer.writeheader()
            writer.writerows(self.stats_rows())


def read_partition_log(path: Path) -> List[Record]:
    """Read back a ``<topic>-<partition>.log`` file written with persistence on."""
    path = Path(path)
    topic, _, partition = path.stem.rpartition("-")
    data = path.read_bytes()
    records: List[Record] = []
    pos = 0
    while pos < len(data):
        if pos + _FRAME.size > len(data):
            raise BrokerError(f"{path}: truncated length prefix at byte {pos}")
        (size,) = _FRAME.unpack_from(data, pos)
        pos += _FRAME.size
        body = data[pos:pos + size]
        if len(body) < size or size < _RECORD_HEAD.size:
            raise BrokerError(f"{path}: truncated record at byte {pos}")
        offset, append_time, key_len = _RECORD_HEAD.unpack_from(body)
        key = body[_RECORD_HEAD.size:_RECORD_HEAD.size + key_len]
        value = body[_RECORD_HEAD.size + key_len:]
        records.append(Record(topic, int(partition), offset, key, value, append_time))
        pos += size
    return records
