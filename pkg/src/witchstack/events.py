"""Append-only event log with live subscriptions.

Security events are the observables the attack scenarios assert on:

    UnauthenticatedNotify   plaintext notify dropped by a strict engine
    ReplayDetected          tunnel record refused by the replay window
    TamperDetected          protection envelope failed to open
    ForgedSampleAccepted    tampered sample landed in a store
    PeerUnresponsive        keepalives exhausted

Everything else (address updates, blocked connections, sync progress) is
activity: shown in feeds, never asserted as a security outcome.  Events
are only ever appended; subscribers get each new event on their own
queue, so a slow reader never blocks an emitter.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass

__all__ = ["EventBus", "SECURITY_KINDS", "SecurityEvent"]

SECURITY_KINDS = frozenset((
    "UnauthenticatedNotify",
    "ReplayDetected",
    "TamperDetected",
    "ForgedSampleAccepted",
    "PeerUnresponsive",
))


@dataclass(frozen=True)
class SecurityEvent:
    kind: str
    detail: str
    timestamp: float

    @property
    def category(self) -> str:
        return "security" if self.kind in SECURITY_KINDS else "activity"

    def to_json(self) -> dict:
        return {"kind": self.kind, "detail": self.detail,
                "timestamp": self.timestamp, "category": self.category}


class EventBus:
    def __init__(self, clock=None):
        self.clock = clock or time.time
        self._lock = threading.Lock()
        self._events: list[SecurityEvent] = []
        self._subscribers: list[queue.Queue] = []

    def emit(self, kind: str, detail: str = "") -> SecurityEvent:
        event = SecurityEvent(kind, detail, self.clock())
        with self._lock:
            self._events.append(event)
            subscribers = list(self._subscribers)
        for q in subscribers:
            q.put(event)
        return event

    def events(self, category: str | None = None) -> list[SecurityEvent]:
        with self._lock:
            snapshot = list(self._events)
        if category is None:
            return snapshot
        return [e for e in snapshot if e.category == category]

    def security_events(self) -> list[SecurityEvent]:
        return self.events("security")

    def count(self, kind: str) -> int:
        with self._lock:
            return sum(1 for e in self._events if e.kind == kind)

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)
