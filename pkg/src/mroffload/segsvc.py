"""Segmentation server: frames in, 8-bit masks out, sequence numbers preserved.

Frames arriving on ``in_topic`` are downscaled to the segmentation size by
area averaging, segmented, upscaled back by nearest neighbour and published on
``out_topic`` with the input's sequence and timestamp.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import cv2
import numpy as np

from . import alga, wire
from ._outbox import DropPolicy
from .config import load_kv

log = logging.getLogger(__name__)


class SegmentationError(ValueError):
    pass


class BadChannelCount(SegmentationError):
    pass


@dataclass(frozen=True)
class ChromaConfig:
    """Accepted HSV box. Hue in degrees; ``hue_min > hue_max`` wraps through 0."""

    hue_min: float = 0.0
    hue_max: float = 50.0
    sat_min: float = 0.23
    val_min: float = 0.35

    def __post_init__(self):
        for name in ("hue_min", "hue_max"):
            v = getattr(self, name)
            if not 0.0 <= v < 360.0:
                raise ValueError(f"{name} must be in [0, 360), got {v}")
        for name in ("sat_min", "val_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hexcone HSV of 8-bit RGB, returns (h in [0, 1), s, v) as float64.

    Follows :func:`colorsys.rgb_to_hsv` operation by operation so the results
    agree with it exactly.
    """
    rgb = np.asarray(rgb)
    r = rgb[..., 0] / 255.0
    g = rgb[..., 1] / 255.0
    b = rgb[..., 2] / 255.0
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    rangec = maxc - minc
    grey = minc == maxc
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(grey, 0.0, rangec / maxc)
        rc = (maxc - r) / rangec
        gc = (maxc - g) / rangec
        bc = (maxc - b) / rangec
        h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
        h = np.remainder(h / 6.0, 1.0)
    h = np.where(grey, 0.0, h)
    return h, s, maxc


def hsv_in_range(h, s, v, config: ChromaConfig):
    hue = h * 360.0
    if config.hue_min <= config.hue_max:
        hue_ok = (hue >= config.hue_min) & (hue <= config.hue_max)
    else:
        hue_ok = (hue >= config.hue_min) | (hue <= config.hue_max)
    return hue_ok & (s >= config.sat_min) & (v >= config.val_min)


_LUTS: dict[ChromaConfig, np.ndarray] = {}
_LUT_LOCK = threading.Lock()


def chroma_lut(config: ChromaConfig) -> np.ndarray:
    """2^24-entry mask table indexed by ``r | g << 8 | b << 16`` (built once per config)."""
    with _LUT_LOCK:
        lut = _LUTS.get(config)
        if lut is None:
            lut = np.empty(1 << 24, dtype=np.uint8)
            rg = np.arange(1 << 16)
            plane = np.empty((1 << 16, 3), dtype=np.uint8)
            plane[:, 0] = rg & 0xFF
            plane[:, 1] = rg >> 8
            for b in range(256):
                plane[:, 2] = b
                h, s, v = rgb_to_hsv(plane)
                lut[b << 16 : (b + 1) << 16] = np.where(hsv_in_range(h, s, v, config), 255, 0)
            _LUTS[config] = lut
        return lut


def _as_rgb(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.dtype != np.uint8:
        raise SegmentationError(f"expected uint8 frame, got {frame.dtype}")
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise BadChannelCount(f"expected HxWx3 frame, got shape {frame.shape}")
    return frame


def chroma_segment(frame, config: ChromaConfig = ChromaConfig(), use_lut: bool | None = None) -> np.ndarray:
    """255 where the pixel's HSV lies in ``config``, else 0; shape (H, W)."""
    frame = _as_rgb(frame)
    if use_lut is None:
        use_lut = frame.shape[0] * frame.shape[1] >= 1 << 16 or config in _LUTS
    if not use_lut:
        h, s, v = rgb_to_hsv(frame)
        return np.where(hsv_in_range(h, s, v, config), 255, 0).astype(np.uint8)
    lut = chroma_lut(config)
    rgba = cv2.cvtColor(np.ascontiguousarray(frame), cv2.COLOR_RGB2RGBA)
    index = rgba.view(np.uint32)[..., 0]
    index &= 0xFFFFFF
    return np.take(lut, index)


class Segmenter:
    """Maps an (H, W, 3) uint8 frame to an (H, W) uint8 mask of 0/255."""

    def segment(self, frame) -> np.ndarray:
        raise NotImplementedError

    def warm(self) -> None:
        """Pay any one-off setup cost up front."""


class ChromaSegmenter(Segmenter):
    def __init__(self, config: ChromaConfig = ChromaConfig()):
        self.config = config

    def segment(self, frame) -> np.ndarray:
        return chroma_segment(frame, self.config)

    def warm(self) -> None:
        lut = chroma_lut(self.config)
        if _chroma_half_width is not None:
            _chroma_half_width(np.zeros((1, 2, 3), np.uint8), lut, np.empty((1, 2), np.uint8))


class IdentitySegmenter(Segmenter):
    """Everything is foreground."""

    def segment(self, frame) -> np.ndarray:
        frame = _as_rgb(frame)
        return np.full(frame.shape[:2], 255, dtype=np.uint8)


def sleep_until(deadline: float) -> None:
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        time.sleep(remaining)


class EmulatedSegmenter(Segmenter):
    """Chroma keying padded out to a fixed latency, standing in for a heavier model."""

    def __init__(self, delay_ms: float = 16.7, inner: Segmenter | None = None):
        if delay_ms < 0:
            raise ValueError("delay_ms must be non-negative")
        self.delay_ms = delay_ms
        self.inner = inner if inner is not None else ChromaSegmenter()

    def segment(self, frame) -> np.ndarray:
        start = time.perf_counter()
        mask = self.inner.segment(frame)
        self.wait(start)
        return mask

    def wait(self, start: float) -> None:
        sleep_until(start + self.delay_ms / 1000.0)

    def warm(self) -> None:
        self.inner.warm()


def emulated_segment(frame, delay_ms: float, config: ChromaConfig = ChromaConfig()) -> np.ndarray:
    return EmulatedSegmenter(delay_ms, ChromaSegmenter(config)).segment(frame)


class SegmenterKind(str, Enum):
    CHROMA = "chroma"
    IDENTITY = "identity"
    EMULATED = "emulated"


def make_segmenter(kind, chroma: ChromaConfig = ChromaConfig(), delay_ms: float = 16.7) -> Segmenter:
    kind = SegmenterKind(str(getattr(kind, "value", kind)).lower())
    if kind is SegmenterKind.CHROMA:
        return ChromaSegmenter(chroma)
    if kind is SegmenterKind.IDENTITY:
        return IdentitySegmenter()
    return EmulatedSegmenter(delay_ms, ChromaSegmenter(chroma))


def area_downscale(frame: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-average resize to ``size`` = (width, height), rounding half up.

    An exact 2:1 horizontal reduction takes a fast path that averages column
    pairs; it matches ``(a + b + 1) // 2`` bit for bit.
    """
    h, w = frame.shape[:2]
    tw, th = size
    if (w, h) == (tw, th):
        return frame
    if th == h and w == 2 * tw:
        return cv2.resize(frame, (tw, th), interpolation=cv2.INTER_LINEAR)
    return cv2.resize(frame, (tw, th), interpolation=cv2.INTER_AREA)


def nearest_upscale(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if mask.shape[1] == size[0] and mask.shape[0] == size[1]:
        return mask
    return cv2.resize(mask, size, interpolation=cv2.INTER_NEAREST)


try:
    import numba
except ImportError:  # pragma: no cover - the plain path below is always available
    numba = None

if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def _chroma_half_width(frame, lut, out):
        # 2:1 horizontal pair average (round half up), table lookup, and the
        # nearest-neighbour upscale in one pass over the frame
        h, w, _ = frame.shape
        for y in range(h):
            for p in range(w // 2):
                x = 2 * p
                r = (np.uint16(frame[y, x, 0]) + frame[y, x + 1, 0] + 1) >> 1
                g = (np.uint16(frame[y, x, 1]) + frame[y, x + 1, 1] + 1) >> 1
                b = (np.uint16(frame[y, x, 2]) + frame[y, x + 1, 2] + 1) >> 1
                v = lut[np.int64(r) | (np.int64(g) << 8) | (np.int64(b) << 16)]
                out[y, x] = v
                out[y, x + 1] = v
        return out

else:
    _chroma_half_width = None


def process_frame(
    frame, segmenter: Segmenter, seg_size: tuple[int, int] | None = (640, 480), fast: bool = True
) -> np.ndarray:
    """Full-resolution mask for ``frame`` segmented at ``seg_size``.

    Chroma keying of a 2:1 side-by-side frame uses a fused compiled kernel when
    numba is installed; ``fast=False`` forces the step-by-step path, which gives
    the same result.
    """
    frame = _as_rgb(frame)
    h, w = frame.shape[:2]
    if seg_size is None or (seg_size[0] >= w and seg_size[1] >= h):
        return segmenter.segment(frame)
    if (
        fast
        and _chroma_half_width is not None
        and type(segmenter) is ChromaSegmenter
        and seg_size == (w // 2, h)
        and w % 2 == 0
    ):
        lut = chroma_lut(segmenter.config)
        return _chroma_half_width(frame, lut, np.empty((h, w), dtype=np.uint8))
    small = area_downscale(frame, seg_size)
    return nearest_upscale(segmenter.segment(small), (w, h))


@dataclass(frozen=True)
class ServerConfig:
    router_address: str = "127.0.0.1:5555"
    in_topic: str = "frames"
    out_topic: str = "masks"
    segmenter: SegmenterKind = SegmenterKind.CHROMA
    emulated_delay_ms: float = 16.7
    chroma: ChromaConfig = field(default_factory=ChromaConfig)
    seg_size: tuple[int, int] | None = (640, 480)
    queue_depth: int | None = 4
    drop_policy: DropPolicy = DropPolicy.DROP_OLDEST
    node_name: str = "segsvc"
    heartbeat_interval: float = 1.0

    def __post_init__(self):
        if self.in_topic == self.out_topic:
            raise ValueError("in_topic and out_topic must differ")
        object.__setattr__(self, "segmenter", SegmenterKind(str(getattr(self.segmenter, "value", self.segmenter)).lower()))
        object.__setattr__(self, "drop_policy", DropPolicy.parse(self.drop_policy))

    @classmethod
    def from_file(cls, path, **overrides) -> "ServerConfig":
        raw = load_kv(path, "segsvc")
        chroma = {k: float(raw[k]) for k in ("hue_min", "hue_max", "sat_min", "val_min") if k in raw}
        values: dict = {}
        for key in ("router_address", "in_topic", "out_topic", "node_name"):
            if key in raw:
                values[key] = raw[key]
        if "segmenter" in raw:
            values["segmenter"] = raw["segmenter"]
        if "delay_ms" in raw:
            values["emulated_delay_ms"] = float(raw["delay_ms"])
        if "queue_depth" in raw:
            values["queue_depth"] = int(raw["queue_depth"])
        if "drop_policy" in raw:
            values["drop_policy"] = raw["drop_policy"]
        if chroma:
            values["chroma"] = ChromaConfig(**chroma)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class SegmentationServer:
    """Receive, segment and send run as separate stages.

    Receiving happens on the node's reader thread, segmenting on this
    server's worker thread (one frame at a time) and sending on the node's
    writer thread.
    """

    def __init__(self, config: ServerConfig = ServerConfig()):
        self.config = config
        self.segmenter = make_segmenter(config.segmenter, config.chroma, config.emulated_delay_ms)
        self.processed = 0
        self.skipped = 0
        self.failed = 0
        self.reconnects = 0
        self._timings: list[tuple[int, float]] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._ready = threading.Event()
        self._thread: threading.Thread | None = None
        self._node: alga.Node | None = None
        self.last_error: Exception | None = None

    def start(self, timeout: float | None = 10.0) -> "SegmentationServer":
        self.segmenter.warm()
        self._thread = threading.Thread(target=self._run, name="segsvc-worker", daemon=True)
        self._thread.start()
        if not self._ready.wait(timeout):
            raise alga.Timeout("segmentation server did not connect in time")
        return self

    def stop(self, timeout: float = 2.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)
        self._close_node()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def wait(self) -> None:
        while not self._stop.wait(0.5):
            pass

    @property
    def malformed(self) -> int:
        node = self._node
        return node._link.malformed if node is not None else 0

    def timings_ms(self, since: int = 0) -> list[tuple[int, float]]:
        """(sequence, processing ms) per processed frame, from index ``since`` on."""
        with self._lock:
            return self._timings[since:]

    def stats(self, since: int = 0) -> dict:
        timings = self.timings_ms(since)
        return {
            "processed": self.processed,
            "skipped": self.skipped,
            "failed": self.failed,
            "malformed": self.malformed,
            "reconnects": self.reconnects,
            "timings": [{"sequence": s, "ms": ms} for s, ms in timings],
        }

    def _connect(self) -> tuple[alga.Node, alga.Subscription, alga.Publisher]:
        cfg = self.config
        ncfg = alga.NodeConfig(
            router_address=cfg.router_address,
            node_name=cfg.node_name,
            drop_policy=cfg.drop_policy,
            heartbeat_interval=cfg.heartbeat_interval,
        )
        node = alga.connect(ncfg, timeout=2.0)
        depth = None if cfg.drop_policy is DropPolicy.BLOCK else cfg.queue_depth
        sub = node.subscribe(cfg.in_topic, maxlen=depth)
        pub = node.advertise(cfg.out_topic)
        return node, sub, pub

    def _close_node(self) -> None:
        node, self._node = self._node, None
        if node is not None:
            node.close()

    def _run(self) -> None:
        backoff = 0.05
        while not self._stop.is_set():
            try:
                self._node, sub, pub = self._connect()
            except (alga.AlgaError, OSError) as exc:
                self.last_error = exc
                log.warning("router not reachable (%s); retrying in %.2fs", exc, backoff)
                self._stop.wait(backoff)
                backoff = min(backoff * 2, 2.0)
                continue
            backoff = 0.05
            self._ready.set()
            try:
                self._serve(sub, pub)
            except alga.Disconnected as exc:
                self.last_error = exc
                self.reconnects += 1
                log.warning("lost router connection: %s", exc)
            finally:
                self._close_node()

    def _serve(self, sub: alga.Subscription, pub: alga.Publisher) -> None:
        emulated = self.segmenter if isinstance(self.segmenter, EmulatedSegmenter) else None
        core = emulated.inner if emulated else self.segmenter
        seg_size = self.config.seg_size
        free_at = 0.0
        while not self._stop.is_set():
            item = sub.poll_with_arrival(timeout_ms=100)
            if item is None:
                continue
            packet, arrival_ns = item
            start = time.perf_counter()
            hdr = packet.header
            if hdr.payload_type is not wire.PayloadType.PICTURE or hdr.channels != 3:
                self.skipped += 1
                continue
            try:
                frame = wire.packet_image(packet)
                mask = process_frame(frame, core, seg_size)
            except (wire.WireError, SegmentationError) as exc:
                self.failed += 1
                self.last_error = exc
                continue
            if emulated is not None:
                # a frame that queued up behind the previous one gets the model
                # when that one's slot ends, so wake-up lag does not accumulate
                begin = max(arrival_ns / 1e9, free_at)
                free_at = begin + emulated.delay_ms / 1000.0
                sleep_until(free_at)
            if hdr.sequence < pub.next_sequence:
                pub.reset_sequence(hdr.sequence)
            pub.publish_picture(mask, mask=True, sequence=hdr.sequence, timestamp_us=hdr.timestamp_us)
            elapsed = (time.perf_counter() - start) * 1000.0
            with self._lock:
                self._timings.append((hdr.sequence, elapsed))
                self.processed += 1


def serve(config: ServerConfig) -> None:
    """Run a segmentation server until SIGINT/SIGTERM."""
    server = SegmentationServer(config)
    server.start(timeout=None)
    try:
        server.wait()
    finally:
        server.stop()


class _StatsHandler(BaseHTTPRequestHandler):
    server_ref: SegmentationServer

    def do_GET(self):
        query = parse_qs(urlparse(self.path).query)
        since = int(query.get("since", ["0"])[0])
        body = json.dumps(self.server_ref.stats(since)).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def start_stats_server(server: SegmentationServer, port: int, host: str = "127.0.0.1") -> ThreadingHTTPServer:
    handler = type("Handler", (_StatsHandler,), {"server_ref": server})
    httpd = ThreadingHTTPServer((host, port), handler)
    httpd.daemon_threads = True
    threading.Thread(target=httpd.serve_forever, name="segsvc-stats", daemon=True).start()
    return httpd


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="segsvc", description="Segmentation server for the offloading pipeline.")
    parser.add_argument("--router", help="router address host:port")
    parser.add_argument("--in", dest="in_topic", help="frame topic to subscribe to")
    parser.add_argument("--out", dest="out_topic", help="mask topic to publish on")
    parser.add_argument("--segmenter", choices=[k.value for k in SegmenterKind])
    parser.add_argument("--delay-ms", type=float, help="emulated segmenter latency")
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--queue-depth", type=int, help="frames kept waiting for the segmenter")
    parser.add_argument("--drop-policy", choices=["drop_oldest", "block"])
    parser.add_argument("--stats-port", type=int, help="serve processing stats as JSON over HTTP")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(message)s")

    overrides = {
        "router_address": args.router,
        "in_topic": args.in_topic,
        "out_topic": args.out_topic,
        "segmenter": args.segmenter,
        "emulated_delay_ms": args.delay_ms,
        "queue_depth": args.queue_depth,
        "drop_policy": args.drop_policy,
    }
    try:
        if args.config:
            config = ServerConfig.from_file(args.config, **overrides)
        else:
            config = replace(ServerConfig(), **{k: v for k, v in overrides.items() if v is not None})
    except (OSError, ValueError) as exc:
        parser.error(str(exc))

    server = SegmentationServer(config)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    server.segmenter.warm()
    server.start(timeout=None)
    httpd = start_stats_server(server, args.stats_port) if args.stats_port is not None else None
    if httpd is not None:
        print(f"stats on http://127.0.0.1:{httpd.server_address[1]}/", flush=True)
    print(f"segsvc ready {config.in_topic} -> {config.out_topic} via {config.router_address}", flush=True)
    try:
        while not stop.wait(0.2):
            pass
    finally:
        if httpd is not None:
            httpd.shutdown()
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
