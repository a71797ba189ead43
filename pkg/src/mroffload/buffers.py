"""Delay compensation: pose alignment and mask/colour frame matching."""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Any

from .wire import PosePayload


class BufferError_(Exception):
    pass


class NonMonotoneTimestamp(BufferError_, ValueError):
    pass


class InsufficientHistory(BufferError_, LookupError):
    pass


class NonPositiveInput(BufferError_, ValueError):
    pass


class DuplicateSequence(BufferError_, ValueError):
    pass


def buffer_size_frames(rtt_ms: float, frame_period_ms: float) -> int:
    """Frames needed to cover one round trip: ceil(rtt / period).

    Each input is read as its shortest decimal form (``repr``) and the ceiling
    is taken exactly, so 16.68 / 16.67 gives 2 and 50.01 / 16.67 gives 3; a
    plain float division would give 2.9999999999999996 for the latter.
    """
    if not (rtt_ms > 0 and frame_period_ms > 0):
        raise NonPositiveInput(f"rtt and period must be positive, got {rtt_ms}, {frame_period_ms}")
    if not (math.isfinite(rtt_ms) and math.isfinite(frame_period_ms)):
        raise NonPositiveInput("rtt and period must be finite")
    return math.ceil(Fraction(repr(float(rtt_ms))) / Fraction(repr(float(frame_period_ms))))


# --- pose alignment -------------------------------------------------------


def lerp(a, b, u: float) -> tuple[float, ...]:
    return tuple(x + (y - x) * u for x, y in zip(a, b))


def slerp(q0, q1, u: float) -> tuple[float, float, float, float]:
    """Shortest-arc spherical interpolation of unit quaternions (w, x, y, z)."""
    dot = sum(a * b for a, b in zip(q0, q1))
    if dot < 0.0:
        q1 = tuple(-v for v in q1)
        dot = -dot
    if dot > 0.9995:
        out = lerp(q0, q1, u)
    else:
        theta = math.acos(min(dot, 1.0))
        sin_theta = math.sin(theta)
        w0 = math.sin((1.0 - u) * theta) / sin_theta
        w1 = math.sin(u * theta) / sin_theta
        out = tuple(w0 * a + w1 * b for a, b in zip(q0, q1))
    norm = math.sqrt(sum(v * v for v in out))
    return tuple(v / norm for v in out)


class PoseDelayBuffer:
    """Ring of timestamped poses queried at ``now - t_c``."""

    def __init__(self, t_c_us: float, capacity: int = 256):
        if t_c_us < 0:
            raise NonPositiveInput("t_c must be non-negative")
        if capacity < 2:
            raise ValueError("capacity must be at least 2")
        self.t_c_us = t_c_us
        self.capacity = capacity
        self._times: deque = deque(maxlen=capacity)
        self._poses: deque = deque(maxlen=capacity)
        self._lock = threading.Lock()

    @classmethod
    def for_rate(cls, t_c_us: float, min_period_us: float, margin: int = 1) -> "PoseDelayBuffer":
        """Buffer just large enough to span ``t_c`` at the given sample rate."""
        need = math.ceil(Fraction(t_c_us) / Fraction(min_period_us)) + 1 + margin
        return cls(t_c_us, max(2, need))

    def __len__(self) -> int:
        return len(self._times)

    def push(self, t_us: float, pose: PosePayload) -> None:
        with self._lock:
            if self._times and t_us <= self._times[-1]:
                raise NonMonotoneTimestamp(f"timestamp {t_us} not after {self._times[-1]}")
            self._times.append(t_us)
            self._poses.append(pose)

    def query(self, now_us: float) -> PosePayload:
        target = now_us - self.t_c_us
        with self._lock:
            times = self._times
            if not times or target < times[0] or target > times[-1]:
                span = (times[0], times[-1]) if times else None
                raise InsufficientHistory(f"no samples bracket t={target} (buffer spans {span})")
            # binary search for the first sample at or after target
            lo, hi = 0, len(times) - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if times[mid] < target:
                    lo = mid + 1
                else:
                    hi = mid
            if times[lo] == target:
                return self._poses[lo]
            t0, t1 = times[lo - 1], times[lo]
            p0, p1 = self._poses[lo - 1], self._poses[lo]
        u = (target - t0) / (t1 - t0)
        return PosePayload(lerp(p0.position, p1.position, u), slerp(p0.orientation, p1.orientation, u))


# --- mask / colour matching ----------------------------------------------


@dataclass
class MatchStats:
    paired: int = 0
    expired_colors: int = 0
    expired_masks: int = 0
    evicted_colors: int = 0
    evicted_masks: int = 0

    @property
    def dropped(self) -> int:
        return self.expired_colors + self.evicted_colors


class FrameMatchBuffer:
    """Pairs colour frames with their masks by sequence number.

    Unpaired colours are dropped once older than ``expiry_us`` or when more
    than ``max_pending`` are waiting; they are never emitted alone.
    """

    def __init__(self, expiry_us: float, max_pending: int = 8):
        if not expiry_us > 0:
            raise NonPositiveInput("expiry must be positive")
        if max_pending < 1:
            raise ValueError("max_pending must be at least 1")
        self.expiry_us = expiry_us
        self.max_pending = max_pending
        self.stats = MatchStats()
        self._colors: dict[int, tuple[float, Any]] = {}
        self._masks: dict[int, tuple[float, Any]] = {}
        self._ready: dict[int, tuple[Any, Any]] = {}
        self._lock = threading.Lock()

    @classmethod
    def for_rtt(cls, rtt_ms: float, max_pending: int = 8) -> "FrameMatchBuffer":
        return cls(3 * rtt_ms * 1000.0, max_pending)

    def pending(self) -> int:
        with self._lock:
            return len(self._colors) + len(self._masks)

    def pending_colors(self) -> int:
        return len(self._colors)

    def pending_masks(self) -> int:
        return len(self._masks)

    def push_color(self, seq: int, frame, now_us: float = 0.0) -> None:
        with self._lock:
            self._push(seq, frame, now_us, self._colors, self._masks, color=True)

    def push_mask(self, seq: int, mask, now_us: float = 0.0) -> None:
        with self._lock:
            self._push(seq, mask, now_us, self._masks, self._colors, color=False)

    def _push(self, seq, item, now_us, mine, theirs, color: bool) -> None:
        if seq in mine or seq in self._ready:
            raise DuplicateSequence(f"{'color' if color else 'mask'} {seq} already pushed")
        if seq in theirs:
            _, other = theirs.pop(seq)
            self._ready[seq] = (item, other) if color else (other, item)
            self.stats.paired += 1
            return
        mine[seq] = (now_us, item)
        total = len(self._colors) + len(self._masks)
        while total > self.max_pending:
            # evict the oldest unmatched entry; dicts keep insertion order
            c = next(iter(self._colors.items()), None)
            m = next(iter(self._masks.items()), None)
            if m is None or (c is not None and (c[1][0], c[0]) <= (m[1][0], m[0])):
                del self._colors[c[0]]
                self.stats.evicted_colors += 1
            else:
                del self._masks[m[0]]
                self.stats.evicted_masks += 1
            total -= 1

    def expire(self, now_us: float) -> None:
        with self._lock:
            self._expire(now_us)

    def _expire(self, now_us: float) -> None:
        for store, attr in ((self._colors, "expired_colors"), (self._masks, "expired_masks")):
            stale = [k for k, (t, _) in store.items() if now_us - t > self.expiry_us]
            for k in stale:
                del store[k]
            setattr(self.stats, attr, getattr(self.stats, attr) + len(stale))

    def pop(self, now_us: float):
        """Oldest ready (color, mask) pair, or None. Runs expiry first."""
        with self._lock:
            self._expire(now_us)
            if not self._ready:
                return None
            seq = min(self._ready)
            color, mask = self._ready.pop(seq)
            return seq, color, mask


class TimeDelayBuffer:
    """Fixed-length FIFO of colour frames: the mask arriving now is shown with
    the colour captured ``size`` frames ago (assumes constant delay)."""

    def __init__(self, size: int):
        if size < 0:
            raise NonPositiveInput("size must be non-negative")
        self.size = size
        self._frames: deque = deque()

    def push(self, frame) -> Any:
        """Add the newest colour; return the delayed one once the buffer has filled."""
        self._frames.append(frame)
        if len(self._frames) > self.size:
            return self._frames.popleft()
        return None

    def __len__(self) -> int:
        return len(self._frames)
