"""Commit log and change feeds.

Every store mutation is committed through a single :class:`CommitLog`, which
assigns gapless sequence numbers and hands ordered events to any number of
feeds.  Feed delivery order equals commit order; each open feed sees every
event after its cursor exactly once.

Publishing can be gated for synchronous replication: committed events become
visible to ordinary feeds only once the replication link has acknowledged
them, while ``raw`` feeds (the link itself) read straight from the log head.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

from .errors import CursorTooOld


@dataclass(frozen=True)
class ChangeEvent:
    """One committed store mutation.

    ``store`` is ``graph`` or ``objects``; ``kind`` is one of ``edge_upsert``,
    ``edge_remove``, ``object_upsert``, ``object_delete``.  The payload holds
    a post-state summary (pre-state for deletes).
    """

    store: str
    seq: int
    kind: str
    payload: dict

    def to_json(self) -> dict:
        return {"store": self.store, "seq": self.seq, "kind": self.kind, "payload": self.payload}

    @classmethod
    def from_json(cls, obj: dict) -> "ChangeEvent":
        return cls(store=obj["store"], seq=obj["seq"], kind=obj["kind"], payload=obj["payload"])


class CommitLog:
    """Ordered, compactable event log with optional gated publishing."""

    def __init__(self, store_name: str, lock: Optional[threading.RLock] = None):
        self.store_name = store_name
        self._lock = lock or threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._events: list[ChangeEvent] = []
        self._floor = 0          # events with seq <= _floor have been compacted away
        self._head = 0           # seq of the newest committed event
        self._published = 0      # seq visible to non-raw feeds
        self._gated = False
        self._commit_hooks: list[Callable[[ChangeEvent], None]] = []

    @property
    def lock(self) -> threading.RLock:
        return self._lock

    @property
    def head(self) -> int:
        with self._lock:
            return self._head

    @property
    def published_head(self) -> int:
        with self._lock:
            return self._published

    def set_gated(self, gated: bool) -> None:
        """Enable/disable the publish gate (sync replication)."""
        with self._cond:
            self._gated = gated
            if not gated:
                self._published = self._head
                self._cond.notify_all()

    def append(self, kind: str, payload: dict) -> ChangeEvent:
        """Commit one event. Caller must already hold the store lock."""
        with self._cond:
            self._head += 1
            event = ChangeEvent(store=self.store_name, seq=self._head, kind=kind, payload=payload)
            self._events.append(event)
            if not self._gated:
                self._published = self._head
            self._cond.notify_all()
            hooks = list(self._commit_hooks)
        for hook in hooks:
            hook(event)
        return event

    def append_external(self, event: ChangeEvent) -> ChangeEvent:
        """Append a mirrored event, preserving its seq (replica side).

        The replica's log must be an exact prefix of the master's, so the
        incoming seq has to be the next one.
        """
        with self._cond:
            if event.seq != self._head + 1:
                raise ValueError(
                    f"replicated event seq {event.seq} does not extend head {self._head}"
                )
            self._head = event.seq
            self._events.append(event)
            if not self._gated:
                self._published = self._head
            self._cond.notify_all()
            hooks = list(self._commit_hooks)
        for hook in hooks:
            hook(event)
        return event

    def advance_published(self, seq: int) -> None:
        """Mark events up to ``seq`` as replicated, releasing them to feeds."""
        with self._cond:
            if seq > self._published:
                self._published = min(seq, self._head)
                self._cond.notify_all()

    def on_commit(self, hook: Callable[[ChangeEvent], None]) -> None:
        """Register a hook invoked after every commit (replication pump)."""
        with self._lock:
            self._commit_hooks.append(hook)

    def events_after(self, cursor: int, limit: Optional[int] = None, raw: bool = False) -> list[ChangeEvent]:
        """Events with seq > cursor, in order. Raises CursorTooOld past compaction."""
        if cursor < 0:
            raise ValueError("cursor must be >= 0")
        with self._lock:
            if cursor < self._floor:
                raise CursorTooOld(f"cursor {cursor} precedes compaction floor {self._floor}")
            upper = self._head if raw else self._published
            if cursor >= upper:
                return []
            start = cursor - self._floor
            stop = upper - self._floor
            out = self._events[start:stop]
            if limit is not None:
                out = out[:limit]
            return list(out)

    def wait_for(self, cursor: int, timeout: Optional[float] = None, raw: bool = False) -> bool:
        """Block until an event with seq > cursor is visible. False on timeout."""
        with self._cond:
            def ready():
                return (self._head if raw else self._published) > cursor
            return self._cond.wait_for(ready, timeout=timeout)

    def compact_through(self, seq: int) -> int:
        """Drop history up to ``seq`` (only already-published events). Returns new floor."""
        with self._lock:
            seq = min(seq, self._published)
            if seq > self._floor:
                self._events = self._events[seq - self._floor:]
                self._floor = seq
            return self._floor


class Feed:
    """Cursor-tracking consumer of a commit log.

    Yields each event exactly once in commit order.  ``predicate`` (if given)
    filters events; the cursor still advances over filtered-out events.
    """

    def __init__(
        self,
        log: CommitLog,
        cursor: int = 0,
        predicate: Optional[Callable[[ChangeEvent], bool]] = None,
        raw: bool = False,
    ):
        if cursor < 0:
            raise ValueError("cursor must be >= 0")
        self._log = log
        self.cursor = cursor
        self._predicate = predicate
        self._raw = raw
        self.closed = False

    def poll(self, limit: Optional[int] = None) -> list[ChangeEvent]:
        """Drain currently-visible events without blocking."""
        if self.closed:
            return []
        events = self._log.events_after(self.cursor, limit=limit, raw=self._raw)
        if events:
            self.cursor = events[-1].seq
        if self._predicate is not None:
            events = [e for e in events if self._predicate(e)]
        return events

    def next(self, timeout: Optional[float] = None) -> Optional[ChangeEvent]:
        """Blocking fetch of the next matching event; None on timeout/close."""
        while not self.closed:
            batch = self._log.events_after(self.cursor, raw=self._raw)
            for event in batch:
                self.cursor = event.seq
                if self._predicate is None or self._predicate(event):
                    return event
            if batch:
                continue
            if not self._log.wait_for(self.cursor, timeout=timeout, raw=self._raw):
                return None
        return None

    def __iter__(self) -> Iterator[ChangeEvent]:
        while True:
            event = self.next()
            if event is None:
                return
            yield event

    def close(self) -> None:
        self.closed = True
