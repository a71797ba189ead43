"""One TCP connection owned by a reader thread and a writer thread."""

from __future__ import annotations

import itertools
import logging
import socket
import struct
import threading
import time
import weakref

from . import wire
from ._outbox import DropPolicy, Outbox, OutboxClosed

log = logging.getLogger(__name__)

RECV_CHUNK = 1 << 20
MISSED_HEARTBEATS = 3

_FIN = object()


def tune_socket(sock: socket.socket) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


class Link:
    """Framed packet transport over a connected socket.

    Outbound items are ``(key, encoded_bytes)`` tuples placed on an
    :class:`Outbox`; ``on_packet(packet, raw)`` runs on the reader thread.
    """

    def __init__(
        self,
        sock: socket.socket,
        *,
        on_packet,
        on_close=None,
        on_sent=None,
        depth: int = 2,
        policy: DropPolicy = DropPolicy.DROP_OLDEST,
        heartbeat_interval: float = 1.0,
        want_raw: bool = False,
        name: str = "link",
    ):
        self.sock = sock
        self.name = name
        self.outbox = Outbox(depth, policy)
        self.heartbeat_interval = heartbeat_interval
        self.close_reason: str | None = None
        self.malformed = 0
        self.last_error: Exception | None = None
        self._on_packet = on_packet
        self._on_close = on_close
        self._on_sent = on_sent
        self._want_raw = want_raw
        self._closed = threading.Event()
        self._close_lock = threading.Lock()
        self._last_rx = time.monotonic()
        self._last_tx = time.monotonic()
        self._ctl_seq = itertools.count(1)
        self._pushback = b""
        self._reader = threading.Thread(target=self._read_loop, name=f"{name}-rx", daemon=True)
        self._writer = threading.Thread(target=self._write_loop, name=f"{name}-tx", daemon=True)

    def start(self) -> None:
        self._reader.start()
        self._writer.start()
        _watchdog.add(self)

    @property
    def alive(self) -> bool:
        return not self._closed.is_set()

    def send(self, lane, key, data: bytes, on_evict=None):
        return self.outbox.put(lane, (key, data), on_evict)

    def send_control(self, op: str, topic: str = wire.NODE_TOPIC, **fields) -> None:
        pkt = wire.control_packet(op, topic, next(self._ctl_seq), _now_us(), **fields)
        self.outbox.put_control((None, wire.encode_packet(pkt)))

    def finish(self, timeout: float = 1.0) -> None:
        """Flush queued data, half-close, and wait briefly for the peer to hang up."""
        if not self.alive:
            return
        self.outbox.wait_drained(timeout)
        try:
            self.send_control("bye")
            self.outbox.put_control(_FIN)
        except OutboxClosed:
            pass
        self._reader.join(timeout)
        self.close("finished")

    def close(self, reason: str = "closed") -> None:
        with self._close_lock:
            if self._closed.is_set():
                return
            self.close_reason = reason
            self._closed.set()
        self.outbox.close()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass
        log.debug("%s closed: %s", self.name, reason)
        if self._on_close is not None:
            self._on_close(self, reason)

    def join(self, timeout: float | None = None) -> None:
        for t in (self._reader, self._writer):
            if t.is_alive() and t is not threading.current_thread():
                t.join(timeout)

    def _write_loop(self) -> None:
        sock = self.sock
        try:
            while True:
                wait = self.heartbeat_interval - (time.monotonic() - self._last_tx)
                item = self.outbox.get(timeout=max(wait, 0.0))
                if item is None:
                    hb = wire.control_packet("heartbeat", wire.NODE_TOPIC, next(self._ctl_seq), _now_us())
                    sock.sendall(wire.encode_packet(hb))
                    self._last_tx = time.monotonic()
                    continue
                if item is _FIN:
                    sock.shutdown(socket.SHUT_WR)
                    return
                key, data = item
                if isinstance(data, tuple):
                    for part in data:
                        sock.sendall(part)
                    data_len = sum(len(part) for part in data)
                else:
                    sock.sendall(data)
                    data_len = len(data)
                self._last_tx = time.monotonic()
                if self._on_sent is not None and key is not None:
                    self._on_sent(key, data_len)
        except OutboxClosed:
            return
        except OSError as exc:
            self.close(f"send failed: {exc}")

    def _read_loop(self) -> None:
        try:
            while not self._closed.is_set():
                packet, raw = self._read_packet()
                if packet is None:
                    continue
                if _is_heartbeat(packet):
                    continue
                try:
                    self._on_packet(self, packet, raw)
                except Exception:
                    log.exception("%s: packet handler failed", self.name)
        except _Closed:
            return
        except (OSError, ValueError) as exc:
            if not self._closed.is_set():
                self.close(f"receive failed: {exc}")

    def _read_packet(self):
        """Read one frame with exact-size reads; returns (None, None) for a skipped malformed frame."""
        prefix = self._read_exact(wire._PREFIX.size)
        if prefix[:4] != wire.MAGIC_BYTES:
            self._resync(prefix)
            return None, None
        topic_len = prefix[4]
        fixed = self._read_exact(topic_len + wire._FIELDS.size)
        (payload_len,) = struct.unpack_from("<I", fixed, len(fixed) - 4)
        if payload_len > wire.MAX_PAYLOAD:
            self._resync(prefix[1:] + fixed)
            return None, None
        payload = self._read_exact(payload_len) if payload_len else bytearray()
        head = bytes(prefix + fixed)
        try:
            packet = wire.decode_header_and_payload(head, payload)
        except wire.WireError as exc:
            self.malformed += 1
            self.last_error = exc.with_traceback(None)
            return None, None
        return packet, ((head, payload) if self._want_raw else None)

    def _resync(self, pending: bytes) -> None:
        """Slide byte by byte until the next magic; counts one malformed frame."""
        self.malformed += 1
        window = bytearray(pending[-3:]) if len(pending) >= 3 else bytearray(pending)
        while True:
            window += self._read_exact(1)
            if window[-4:] == wire.MAGIC_BYTES:
                rest = self._read_exact(1)
                self._pushback = bytes(window[-4:]) + bytes(rest)
                return
            del window[:-3]

    def _read_exact(self, n: int) -> bytearray:
        buf = bytearray(n)
        got = 0
        if self._pushback:
            take = self._pushback[:n]
            buf[: len(take)] = take
            self._pushback = self._pushback[len(take):]
            got = len(take)
        with memoryview(buf) as view:
            while got < n:
                if self._closed.is_set():
                    raise _Closed()
                k = self.sock.recv_into(view[got:], n - got, socket.MSG_WAITALL)
                if k == 0:
                    self.close("peer closed connection")
                    raise _Closed()
                got += k
                self._last_rx = time.monotonic()
        return buf

    def check_liveness(self, now: float) -> None:
        if self.alive and now - self._last_rx > self.heartbeat_interval * MISSED_HEARTBEATS:
            self.close("heartbeat timeout")


class _Closed(Exception):
    pass


class _Watchdog:
    """Single process-wide thread that closes links whose peer went silent."""

    def __init__(self):
        self._links: weakref.WeakSet = weakref.WeakSet()
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None

    def add(self, link: Link) -> None:
        with self._lock:
            self._links.add(link)
            if self._thread is None or not self._thread.is_alive():
                self._thread = threading.Thread(target=self._run, name="link-watchdog", daemon=True)
                self._thread.start()

    def _run(self) -> None:
        while True:
            with self._lock:
                links = [lk for lk in self._links if lk.alive]
            if not links:
                time.sleep(0.1)
                continue
            now = time.monotonic()
            for link in links:
                link.check_liveness(now)
            time.sleep(min(0.1, min(lk.heartbeat_interval for lk in links) / 4))


_watchdog = _Watchdog()


def _is_heartbeat(packet: wire.FramePacket) -> bool:
    return (
        packet.header.payload_type is wire.PayloadType.CONTROL
        and packet.topic == wire.NODE_TOPIC
        and packet.payload.startswith(b'{"op":"heartbeat"')
    )


def _now_us() -> int:
    return time.time_ns() // 1000
