"""Topic re-router: accepts node connections and fans packets out to subscribers.

Routing state is kept apart from the socket handling so it can be exercised
directly (:class:`RouterState`). :class:`Router` wires it to TCP.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import signal
import socket
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import wire
from ._link import Link, tune_socket
from ._outbox import DropPolicy, OutboxClosed
from .config import format_address, parse_address

log = logging.getLogger(__name__)

DEFAULT_QUEUE_DEPTH = 4


@dataclass
class TopicCounters:
    packets_in: int = 0
    packets_out: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    dropped_no_subscriber: int = 0
    evicted: int = 0


@dataclass
class _Peer:
    cid: int
    name: str = ""
    subscriptions: set = field(default_factory=set)
    advertised: set = field(default_factory=set)


class RouterState:
    """Topic tables and counters. All methods are thread-safe."""

    def __init__(self):
        self._lock = threading.Lock()
        self._peers: dict[int, _Peer] = {}
        self._subscribers: dict[str, dict[int, None]] = {}
        self._counters: dict[str, TopicCounters] = {}
        self.malformed = 0
        self.control_in = 0

    def add_peer(self, cid: int, name: str = "") -> None:
        with self._lock:
            self._peers[cid] = _Peer(cid, name)

    def remove_peer(self, cid: int) -> None:
        with self._lock:
            peer = self._peers.pop(cid, None)
            if peer is None:
                return
            for topic in peer.subscriptions:
                subs = self._subscribers.get(topic)
                if subs is not None:
                    subs.pop(cid, None)
                    if not subs:
                        del self._subscribers[topic]

    def _counter(self, topic: str) -> TopicCounters:
        c = self._counters.get(topic)
        if c is None:
            c = self._counters[topic] = TopicCounters()
        return c

    def apply_control(self, sender: int, packet: wire.FramePacket) -> dict | None:
        """Apply a CONTROL packet from ``sender``; return the reply body, if any."""
        try:
            body = wire.parse_control(packet)
        except wire.WireError:
            with self._lock:
                self.malformed += 1
            return None
        op = body["op"]
        topic = packet.topic
        with self._lock:
            self.control_in += 1
            peer = self._peers.get(sender)
            if peer is None:
                return None
            if op == "hello":
                peer.name = str(body.get("name", ""))
                return {"op": "welcome", "id": sender}
            if op == "subscribe":
                peer.subscriptions.add(topic)
                self._subscribers.setdefault(topic, {})[sender] = None
                self._counter(topic)
                return {"op": "suback"}
            if op == "unsubscribe":
                peer.subscriptions.discard(topic)
                subs = self._subscribers.get(topic)
                if subs is not None:
                    subs.pop(sender, None)
                    if not subs:
                        del self._subscribers[topic]
                return {"op": "unsuback"}
            if op == "advertise":
                peer.advertised.add(topic)
                self._counter(topic)
                return None
        return None

    def route(self, packet: wire.FramePacket, sender: int, nbytes: int | None = None) -> frozenset[int]:
        """Connections that get a copy of ``packet``: every subscriber except the sender.

        CONTROL packets are applied to the tables and never forwarded.
        """
        if packet.header.payload_type is wire.PayloadType.CONTROL:
            self.apply_control(sender, packet)
            return frozenset()
        if nbytes is None:
            nbytes = len(packet.payload)
        with self._lock:
            c = self._counter(packet.topic)
            c.packets_in += 1
            c.bytes_in += nbytes
            subs = self._subscribers.get(packet.topic)
            targets = frozenset(cid for cid in subs if cid != sender) if subs else frozenset()
            if not targets:
                c.dropped_no_subscriber += 1
            return targets

    def count_sent(self, topic: str, nbytes: int) -> None:
        with self._lock:
            c = self._counter(topic)
            c.packets_out += 1
            c.bytes_out += nbytes

    def count_evicted(self, topic: str) -> None:
        with self._lock:
            self._counter(topic).evicted += 1

    def count_malformed(self, n: int = 1) -> None:
        with self._lock:
            self.malformed += n

    def subscribers(self, topic: str) -> list[int]:
        with self._lock:
            return list(self._subscribers.get(topic, ()))

    def stats(self) -> dict:
        """JSON-serializable snapshot of counters and topic tables."""
        with self._lock:
            topics = {}
            for topic in sorted(set(self._counters) | set(self._subscribers)):
                c = self._counters.get(topic, TopicCounters())
                topics[topic] = {
                    **c.__dict__,
                    "subscribers": [self._describe(cid) for cid in self._subscribers.get(topic, ())],
                    "publishers": [
                        self._describe(p.cid) for p in self._peers.values() if topic in p.advertised
                    ],
                }
            totals = TopicCounters()
            for c in self._counters.values():
                for key, value in c.__dict__.items():
                    setattr(totals, key, getattr(totals, key) + value)
            return {
                "connections": {
                    str(p.cid): {
                        "name": p.name,
                        "subscriptions": sorted(p.subscriptions),
                        "advertised": sorted(p.advertised),
                    }
                    for p in self._peers.values()
                },
                "topics": topics,
                "totals": totals.__dict__,
                "malformed": self.malformed,
                "control_in": self.control_in,
            }

    def _describe(self, cid: int) -> dict:
        peer = self._peers.get(cid)
        return {"id": cid, "name": peer.name if peer else ""}


class Router:
    """Threaded TCP router.

    One acceptor thread, plus a reader and a writer per connection. Each
    subscriber has its own bounded outbound queues (one lane per topic) so a
    slow subscriber only loses its own packets under ``DROP_OLDEST``.
    """

    def __init__(
        self,
        bind: str | tuple[str, int] = ("127.0.0.1", 0),
        *,
        queue_depth: int = DEFAULT_QUEUE_DEPTH,
        drop_policy: DropPolicy = DropPolicy.DROP_OLDEST,
        heartbeat_interval: float = 1.0,
        stats_port: int | None = None,
        stats_host: str = "127.0.0.1",
    ):
        self.bind = parse_address(bind) if isinstance(bind, str) else bind
        self.queue_depth = queue_depth
        self.drop_policy = DropPolicy.parse(drop_policy)
        self.heartbeat_interval = heartbeat_interval
        self.state = RouterState()
        self._stats_port = stats_port
        self._stats_host = stats_host
        self._links: dict[int, Link] = {}
        self._links_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._listener: socket.socket | None = None
        self._acceptor: threading.Thread | None = None
        self._http: ThreadingHTTPServer | None = None
        self._stopped = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        if self._listener is None:
            raise RuntimeError("router not started")
        return self._listener.getsockname()[:2]

    @property
    def address_str(self) -> str:
        return format_address(self.address)

    @property
    def stats_address(self) -> tuple[str, int] | None:
        return None if self._http is None else self._http.server_address[:2]

    def start(self) -> "Router":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(self.bind)
        sock.listen(64)
        self._listener = sock
        self._acceptor = threading.Thread(target=self._accept_loop, name="polyp-accept", daemon=True)
        self._acceptor.start()
        if self._stats_port is not None:
            self._http = _stats_server(self, self._stats_host, self._stats_port)
            threading.Thread(target=self._http.serve_forever, name="polyp-stats", daemon=True).start()
        log.info("polyp listening on %s", self.address_str)
        return self

    def stop(self) -> None:
        self._stopped.set()
        if self._listener is not None:
            try:
                # shutdown wakes the blocked accept(); close alone does not on Linux
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        if self._http is not None:
            self._http.shutdown()
            self._http.server_close()
        with self._links_lock:
            links = list(self._links.values())
        for link in links:
            link.close("router stopping")
        for link in links:
            link.join(1.0)
        if self._acceptor is not None:
            self._acceptor.join(1.0)

    def __enter__(self):
        return self.start() if self._listener is None else self

    def __exit__(self, *exc):
        self.stop()

    def stats(self) -> dict:
        return self.state.stats()

    def serve_forever(self) -> None:
        if self._listener is None:
            self.start()
        self._stopped.wait()

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                conn, peer_addr = self._listener.accept()
            except OSError:
                return
            tune_socket(conn)
            cid = next(self._ids)
            link = Link(
                conn,
                on_packet=lambda lk, pkt, raw, cid=cid: self._on_packet(cid, lk, pkt, raw),
                on_close=lambda lk, reason, cid=cid: self._on_close(cid, reason),
                on_sent=self.state.count_sent,
                depth=self.queue_depth,
                policy=self.drop_policy,
                heartbeat_interval=self.heartbeat_interval,
                want_raw=True,
                name=f"polyp:{cid}",
            )
            self.state.add_peer(cid)
            with self._links_lock:
                self._links[cid] = link
            link.start()
            log.debug("connection %d from %s", cid, peer_addr)

    def _on_packet(self, cid: int, link: Link, packet: wire.FramePacket, raw: tuple) -> None:
        if packet.header.payload_type is wire.PayloadType.CONTROL:
            reply = self.state.apply_control(cid, packet)
            if reply is not None:
                op = reply.pop("op")
                try:
                    link.send_control(op, packet.topic, **reply)
                except OutboxClosed:
                    pass
            elif packet.topic == wire.NODE_TOPIC and packet.payload.startswith(b'{"op":"bye"'):
                link.close("peer said bye")
            return
        targets = self.state.route(packet, cid, len(raw[0]) + len(raw[1]))
        if not targets:
            return
        with self._links_lock:
            out = [self._links.get(t) for t in targets]
        topic = packet.topic
        for target in out:
            if target is None:
                continue
            try:
                target.send(topic, topic, raw, on_evict=lambda item, topic=topic: self.state.count_evicted(topic))
            except OutboxClosed:
                continue

    def _on_close(self, cid: int, reason: str) -> None:
        self.state.remove_peer(cid)
        with self._links_lock:
            link = self._links.pop(cid, None)
        if link is not None:
            self.state.count_malformed(link.malformed)
        log.debug("connection %d closed: %s", cid, reason)


def _stats_server(router: Router, host: str, port: int) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def do_GET(self):
            body = json.dumps(router.stats(), indent=2).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt, *args):
            log.debug("stats: " + fmt, *args)

    server = ThreadingHTTPServer((host, port), Handler)
    server.daemon_threads = True
    return server


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="polyp", description="Topic re-router for alga nodes.")
    parser.add_argument("--bind", default="127.0.0.1:5555", help="host:port to listen on")
    parser.add_argument("--stats-port", type=int, default=None, help="serve JSON stats over HTTP on this port")
    parser.add_argument("--queue-depth", type=int, default=DEFAULT_QUEUE_DEPTH, help="per-subscriber queue depth")
    parser.add_argument("--drop-policy", default="drop_oldest", choices=["drop_oldest", "block"])
    parser.add_argument("--heartbeat", type=float, default=1.0, help="heartbeat interval in seconds")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(message)s")

    router = Router(
        args.bind,
        queue_depth=args.queue_depth,
        drop_policy=args.drop_policy,
        heartbeat_interval=args.heartbeat,
        stats_port=args.stats_port,
    )
    router.start()
    print(f"polyp listening on {router.address_str}", flush=True)
    if router.stats_address:
        print(f"stats on http://{format_address(router.stats_address)}/", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(0.5):
        pass
    router.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
