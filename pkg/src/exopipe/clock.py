"""Virtual-time event loop shared by every simulated component.

Time is an integer count of nanoseconds since the start of the run. The
loop does not sleep; it only orders callbacks. Events fire in
``(fire_time, sequence_no)`` order so two runs with the same inputs produce
the same trace.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional

__all__ = ["NS", "US", "MS", "S", "Event", "TraceEvent", "Simulator", "save_trace"]

NS = 1
US = 1_000
MS = 1_000_000
S = 1_000_000_000


@dataclass(order=True)
class Event:
    fire_time: int
    sequence_no: int
    action: Callable[[], None] = field(compare=False)
    label: str = field(default="", compare=False)
    cancelled: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class TraceEvent:
    time: int
    kind: str
    data: Dict[str, Any]


class Simulator:
    """Single-threaded discrete-event loop owning a virtual clock."""

    def __init__(self, *, tracing: bool = True) -> None:
        self._now = 0
        self._seq = 0
        self._queue: List[Event] = []
        self.tracing = tracing
        self.trace: List[TraceEvent] = []
        self.events_fired = 0

    @property
    def now(self) -> int:
        return self._now

    @property
    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)

    def schedule(self, delay: int, action: Callable[[], None], label: str = "") -> Event:
        if delay < 0:
            raise ValueError(f"cannot schedule {delay} ns in the past")
        return self.schedule_at(self._now + delay, action, label)

    def schedule_at(self, fire_time: int, action: Callable[[], None], label: str = "") -> Event:
        if fire_time < self._now:
            raise ValueError(f"cannot schedule at {fire_time}, clock is already at {self._now}")
        event = Event(int(fire_time), self._seq, action, label)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    @staticmethod
    def cancel(event: Optional[Event]) -> None:
        if event is not None:
            event.cancelled = True

    def step(self) -> bool:
        """Fire the next live event; False when the queue is empty."""
        while self._queue:
            event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self._now = event.fire_time
            self.events_fired += 1
            event.action()
            return True
        return False

    def run(self, until: Optional[int] = None) -> int:
        """Run events with ``fire_time <= until`` (all when None); returns the count.

        When ``until`` is given the clock ends exactly at ``until``.
        """
        fired = 0
        while self._queue:
            head = self._queue[0]
            if head.cancelled:
                heapq.heappop(self._queue)
                continue
            if until is not None and head.fire_time > until:
                break
            self.step()
            fired += 1
        if until is not None and until > self._now:
            self._now = until
        return fired

    def record(self, kind: str, /, **data: Any) -> None:
        if self.tracing:
            self.trace.append(TraceEvent(self._now, kind, data))

    def trace_of(self, kind: str) -> List[TraceEvent]:
        return [ev for ev in self.trace if ev.kind == kind]


def save_trace(path: Path, events: Iterable[TraceEvent]) -> None:
    """Write trace events as JSON lines."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(asdict(event), sort_keys=True, default=_jsonable) + "\n")


def _jsonable(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray)):
        return value.hex()
    if isinstance(value, (set, frozenset, tuple)):
        return sorted(value) if isinstance(value, (set, frozenset)) else list(value)
    return str(value)
