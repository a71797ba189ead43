"""Bounded per-lane outbound queues drained by a single writer thread."""

from __future__ import annotations

import threading
import time
from collections import deque
from enum import Enum


class DropPolicy(str, Enum):
    DROP_OLDEST = "DROP_OLDEST"
    BLOCK = "BLOCK"

    @classmethod
    def parse(cls, value) -> "DropPolicy":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().upper().replace("-", "_"))


class EnqueueResult(str, Enum):
    ENQUEUED = "ENQUEUED"
    REPLACED_OLDEST = "REPLACED_OLDEST"


class OutboxClosed(Exception):
    pass


class Outbox:
    """Round-robin over lanes, each lane a bounded FIFO.

    Control items bypass the lanes and are always sent first. ``put`` under
    ``DROP_OLDEST`` never waits; under ``BLOCK`` it waits for room.
    """

    def __init__(self, depth: int, policy: DropPolicy = DropPolicy.DROP_OLDEST):
        if depth < 1:
            raise ValueError("queue depth must be >= 1")
        self.depth = depth
        self.policy = DropPolicy.parse(policy)
        self._cv = threading.Condition()
        self._lanes: dict[object, deque] = {}
        self._ready: deque = deque()
        self._control: deque = deque()
        self._closed = False
        self.evicted = 0

    def put(self, lane, item, on_evict=None) -> EnqueueResult:
        with self._cv:
            if self._closed:
                raise OutboxClosed()
            q = self._lanes.get(lane)
            if q is None:
                q = self._lanes[lane] = deque()
            result = EnqueueResult.ENQUEUED
            if len(q) >= self.depth:
                if self.policy is DropPolicy.BLOCK:
                    while len(q) >= self.depth and not self._closed:
                        self._cv.wait()
                    if self._closed:
                        raise OutboxClosed()
                else:
                    old = q.popleft()
                    self.evicted += 1
                    result = EnqueueResult.REPLACED_OLDEST
                    if on_evict is not None:
                        on_evict(old)
            if not q:
                self._ready.append(lane)
            q.append(item)
            self._cv.notify_all()
            return result

    def put_control(self, item) -> None:
        with self._cv:
            if self._closed:
                raise OutboxClosed()
            self._control.append(item)
            self._cv.notify_all()

    def get(self, timeout: float | None = None):
        """Next item or None on timeout; raises OutboxClosed once closed and empty of control."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while True:
                if self._control:
                    return self._control.popleft()
                if self._closed:
                    raise OutboxClosed()
                if self._ready:
                    lane = self._ready.popleft()
                    q = self._lanes[lane]
                    item = q.popleft()
                    if q:
                        self._ready.append(lane)
                    self._cv.notify_all()
                    return item
                if deadline is None:
                    self._cv.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    self._cv.wait(remaining)

    def pending(self, lane=None) -> int:
        with self._cv:
            if lane is not None:
                q = self._lanes.get(lane)
                return len(q) if q else 0
            return sum(len(q) for q in self._lanes.values()) + len(self._control)

    def wait_drained(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self._cv:
            while any(self._lanes.values()) or self._control:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._closed:
                    return False
                self._cv.wait(remaining)
            return True

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed
