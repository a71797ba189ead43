"""Node-side publish/subscribe client.

A node keeps one TCP connection to the router. Publishing only encodes the
packet and drops it in a bounded per-publisher queue; a background writer
thread does the network I/O. Received packets are fanned out to subscription
queues and consumed with :meth:`Subscription.poll`.

    node = connect(NodeConfig("127.0.0.1:5555", "client"))
    frames = node.advertise("frames")
    masks = node.subscribe("masks")
    frames.publish_picture(image)
    packet = masks.poll(100)
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import wire
from ._link import Link, tune_socket
from ._outbox import DropPolicy, EnqueueResult, OutboxClosed
from .config import load_kv, parse_address

__all__ = [
    "AlgaError",
    "ConnectionRefused",
    "Disconnected",
    "DropPolicy",
    "EnqueueResult",
    "Node",
    "NodeConfig",
    "Publisher",
    "SequenceError",
    "Subscription",
    "Timeout",
    "connect",
]

log = logging.getLogger(__name__)


class AlgaError(Exception):
    pass


class ConnectionRefused(AlgaError, ConnectionRefusedError):
    pass


class Timeout(AlgaError, TimeoutError):
    pass


class Disconnected(AlgaError, ConnectionError):
    pass


class SequenceError(AlgaError, ValueError):
    pass


@dataclass(frozen=True)
class NodeConfig:
    router_address: str = "127.0.0.1:5555"
    node_name: str = "node"
    outbound_queue_depth: int = 2
    drop_policy: DropPolicy = DropPolicy.DROP_OLDEST
    connect_timeout: float = 5.0
    heartbeat_interval: float = 1.0

    def __post_init__(self):
        if self.outbound_queue_depth < 1:
            raise ValueError("outbound_queue_depth must be >= 1")
        object.__setattr__(self, "drop_policy", DropPolicy.parse(self.drop_policy))

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "NodeConfig":
        """Load from a key-value file; non-None ``overrides`` (e.g. CLI flags) win."""
        raw = load_kv(path, section="node")
        values = {}
        if "router_address" in raw:
            values["router_address"] = raw["router_address"]
        if "node_name" in raw:
            values["node_name"] = raw["node_name"]
        if "queue_depth" in raw:
            values["outbound_queue_depth"] = int(raw["queue_depth"])
        if "drop_policy" in raw:
            values["drop_policy"] = DropPolicy.parse(raw["drop_policy"])
        if "connect_timeout" in raw:
            values["connect_timeout"] = float(raw["connect_timeout"])
        if "heartbeat_interval" in raw:
            values["heartbeat_interval"] = float(raw["heartbeat_interval"])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def with_overrides(self, **overrides) -> "NodeConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def connect(config: NodeConfig, timeout: float | None = None) -> "Node":
    """Open a node connection, retrying refused connects until the timeout.

    Raises :class:`ConnectionRefused` if the router port stayed closed for the
    whole window and :class:`Timeout` if it never answered.
    """
    timeout = config.connect_timeout if timeout is None else timeout
    addr = parse_address(config.router_address)
    deadline = time.monotonic() + timeout
    refused = False
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            if refused:
                raise ConnectionRefused(f"router at {config.router_address} refused connection")
            raise Timeout(f"no router at {config.router_address} within {timeout:.3g} s")
        try:
            sock = socket.create_connection(addr, timeout=remaining)
            break
        except ConnectionRefusedError:
            refused = True
            time.sleep(min(0.05, max(deadline - time.monotonic(), 0)))
        except (socket.timeout, TimeoutError):
            refused = False
        except OSError as exc:
            raise ConnectionRefused(f"cannot reach router at {config.router_address}: {exc}") from None
    sock.settimeout(None)
    tune_socket(sock)
    node = Node(config, sock)
    node._handshake(deadline)
    return node


class Node:
    """A connected node. Thread-safe; create with :func:`connect`."""

    def __init__(self, config: NodeConfig, sock: socket.socket):
        self.config = config
        self.name = config.node_name
        self.node_id: int | None = None
        self._lock = threading.Lock()
        self._publishers: dict[str, Publisher] = {}
        self._subs: dict[str, list[Subscription]] = {}
        self._acks: dict[str, threading.Event] = {}
        self._welcome = threading.Event()
        self._link = Link(
            sock,
            on_packet=self._on_packet,
            on_close=self._on_close,
            depth=config.outbound_queue_depth,
            policy=config.drop_policy,
            heartbeat_interval=config.heartbeat_interval,
            name=f"alga:{config.node_name}",
        )
        self._link.start()

    def _handshake(self, deadline: float) -> None:
        self._link.send_control("hello", name=self.name)
        if not self._welcome.wait(max(deadline - time.monotonic(), 0)):
            self._link.close("handshake timeout")
            raise Timeout("router did not answer hello")
        if not self._link.alive:
            raise Disconnected(self._link.close_reason or "disconnected during handshake")

    @property
    def connected(self) -> bool:
        return self._link.alive

    @property
    def close_reason(self) -> str | None:
        return self._link.close_reason

    def _check(self) -> None:
        if not self._link.alive:
            raise Disconnected(self._link.close_reason or "disconnected")

    def advertise(self, topic: str) -> "Publisher":
        """Publisher for ``topic``; advertising the same topic again returns the same handle."""
        self._check()
        wire._check_topic(topic.encode("utf-8"))
        with self._lock:
            pub = self._publishers.get(topic)
            if pub is not None:
                return pub
            pub = self._publishers[topic] = Publisher(self, topic)
        try:
            self._link.send_control("advertise", topic)
        except OutboxClosed:
            raise Disconnected(self._link.close_reason or "disconnected") from None
        return pub

    def subscribe(self, topic: str, maxlen: int | None = None, timeout: float | None = None) -> "Subscription":
        """Subscribe to ``topic``; blocks until the router acknowledges the first subscription."""
        self._check()
        wire._check_topic(topic.encode("utf-8"))
        sub = Subscription(self, topic, maxlen)
        with self._lock:
            existing = self._subs.setdefault(topic, [])
            first = not existing
            existing.append(sub)
            if first:
                ack = self._acks[topic] = threading.Event()
            else:
                ack = self._acks[topic]
        if first:
            try:
                self._link.send_control("subscribe", topic)
            except OutboxClosed:
                raise Disconnected(self._link.close_reason or "disconnected") from None
        wait = self.config.connect_timeout if timeout is None else timeout
        deadline = time.monotonic() + wait
        while not ack.wait(0.05):
            self._check()
            if time.monotonic() > deadline:
                raise Timeout(f"router did not acknowledge subscription to {topic!r}")
        return sub

    def _unsubscribe(self, sub: "Subscription") -> None:
        with self._lock:
            subs = self._subs.get(sub.topic, [])
            if sub in subs:
                subs.remove(sub)
            last = not subs
            if last:
                self._subs.pop(sub.topic, None)
                self._acks.pop(sub.topic, None)
        if last and self._link.alive:
            try:
                self._link.send_control("unsubscribe", sub.topic)
            except OutboxClosed:
                pass

    def close(self, flush_timeout: float = 1.0) -> None:
        """Flush pending packets (best effort) and disconnect."""
        self._link.finish(flush_timeout)
        self._link.join(flush_timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _on_packet(self, link, packet: wire.FramePacket, raw) -> None:
        arrival = time.perf_counter_ns()
        if packet.header.payload_type is wire.PayloadType.CONTROL:
            self._on_control(packet)
            return
        with self._lock:
            subs = tuple(self._subs.get(packet.topic, ()))
        for sub in subs:
            sub._deliver(packet, arrival)

    def _on_control(self, packet: wire.FramePacket) -> None:
        try:
            body = wire.parse_control(packet)
        except wire.WireError:
            log.warning("%s: ignoring malformed control packet", self.name)
            return
        op = body["op"]
        if op == "welcome":
            self.node_id = body.get("id")
            self._welcome.set()
        elif op == "suback":
            with self._lock:
                ack = self._acks.get(packet.topic)
            if ack is not None:
                ack.set()
        elif op == "bye":
            self._link.close("router said bye")

    def _on_close(self, link, reason: str) -> None:
        self._welcome.set()
        with self._lock:
            subs = [s for group in self._subs.values() for s in group]
        for sub in subs:
            sub._wake()


class Publisher:
    """Stamps sequence numbers and queues packets for one topic."""

    def __init__(self, node: Node, topic: str):
        self.node = node
        self.topic = topic
        self._next = 0
        self._lock = threading.Lock()
        self.published = 0
        self.evicted = 0

    @property
    def next_sequence(self) -> int:
        return self._next

    def reset_sequence(self, value: int = 0) -> None:
        with self._lock:
            self._next = value

    def pending(self) -> int:
        return self.node._link.outbox.pending(id(self))

    def publish(
        self,
        payload: bytes = b"",
        *,
        payload_type: wire.PayloadType = wire.PayloadType.PICTURE,
        width: int = 0,
        height: int = 0,
        channels: int = 0,
        encoding: wire.Encoding = wire.Encoding.RAW,
        timestamp_us: int | None = None,
        sequence: int | None = None,
    ) -> EnqueueResult:
        """Queue one packet without waiting for network I/O.

        ``sequence`` overrides the publisher's counter (it must not go
        backwards); ``timestamp_us`` defaults to now.
        """
        link = self.node._link
        if not link.alive:
            raise Disconnected(link.close_reason or "disconnected")
        with self._lock:
            if sequence is None:
                sequence = self._next
            elif sequence < self._next:
                raise SequenceError(f"sequence {sequence} is behind next sequence {self._next}")
            if timestamp_us is None:
                timestamp_us = time.time_ns() // 1000
            header = wire.PacketHeader(
                wire.PayloadType(payload_type), sequence, timestamp_us, width, height, channels, wire.Encoding(encoding)
            )
            data = wire.encode_parts(wire.FramePacket(self.topic, header, payload))
            try:
                result = link.send(id(self), self.topic, data, on_evict=self._count_evict)
            except OutboxClosed:
                raise Disconnected(link.close_reason or "disconnected") from None
            self._next = sequence + 1
            self.published += 1
            return result

    def _count_evict(self, item) -> None:
        self.evicted += 1

    def publish_picture(
        self,
        image: np.ndarray,
        *,
        encoding: wire.Encoding = wire.Encoding.RAW,
        quality: int = 85,
        mask: bool = False,
        timestamp_us: int | None = None,
        sequence: int | None = None,
    ) -> EnqueueResult:
        image = np.asarray(image)
        channels = wire._channels_of(image)
        return self.publish(
            wire.encode_picture(image, encoding, quality),
            payload_type=wire.PayloadType.U8PICTURE if mask else wire.PayloadType.PICTURE,
            width=image.shape[1],
            height=image.shape[0],
            channels=channels,
            encoding=encoding,
            timestamp_us=timestamp_us,
            sequence=sequence,
        )

    def publish_pose(self, pose: wire.PosePayload, *, timestamp_us: int | None = None) -> EnqueueResult:
        return self.publish(wire.encode_pose(pose), payload_type=wire.PayloadType.POSE, timestamp_us=timestamp_us)


class Subscription:
    """Poll queue for one topic on one node."""

    def __init__(self, node: Node, topic: str, maxlen: int | None = None):
        self.node = node
        self.topic = topic
        self._queue: deque = deque(maxlen=maxlen)
        self._cv = threading.Condition()
        self.received = 0
        self.dropped = 0
        self.closed = False

    def _deliver(self, packet: wire.FramePacket, arrival_ns: int) -> None:
        with self._cv:
            if self._queue.maxlen is not None and len(self._queue) == self._queue.maxlen:
                self.dropped += 1
            self._queue.append((packet, arrival_ns))
            self.received += 1
            self._cv.notify()

    def _wake(self) -> None:
        with self._cv:
            self._cv.notify_all()

    def poll_with_arrival(self, timeout_ms: float = 0) -> tuple[wire.FramePacket, int] | None:
        """Like :meth:`poll` but also returns the ``perf_counter_ns`` arrival time."""
        deadline = time.monotonic() + timeout_ms / 1000.0
        with self._cv:
            while not self._queue:
                if not self.node._link.alive:
                    raise Disconnected(self.node._link.close_reason or "disconnected")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cv.wait(remaining)
            return self._queue.popleft()

    def poll(self, timeout_ms: float = 0) -> wire.FramePacket | None:
        """Oldest queued packet, or None after ``timeout_ms`` (0 probes without waiting)."""
        item = self.poll_with_arrival(timeout_ms)
        return None if item is None else item[0]

    def __len__(self) -> int:
        return len(self._queue)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.node._unsubscribe(self)
