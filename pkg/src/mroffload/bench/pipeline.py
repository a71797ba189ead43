"""End-to-end offloading pipeline: capture, segment remotely, match, composite.

Two transports share the compositing logic:

* ``sim`` runs on a virtual clock with seeded network jitter and loss, so runs
  are reproducible bit for bit (timings included).
* ``tcp`` pushes real frames through a router and a segmentation server on
  loopback, either spawned as child processes or as threads in this process.
"""

from __future__ import annotations

import heapq
import json
import logging
import queue
import subprocess
import sys
import threading
import time
import urllib.request
from dataclasses import asdict, dataclass

import numpy as np

from .. import alga, wire
from .._outbox import DropPolicy
from ..buffers import FrameMatchBuffer, TimeDelayBuffer, buffer_size_frames
from ..segsvc import (
    ChromaConfig,
    EmulatedSegmenter,
    SegmentationServer,
    SegmenterKind,
    ServerConfig,
    make_segmenter,
    process_frame,
)
from .report import ExperimentResult, LatencyReport, LatencySample
from .scene import (
    CircularTrajectory,
    EmptyBlob,
    EmptyMask,
    LinearTrajectory,
    SyntheticScene,
    composite,
    generate_frame,
    misalignment_px,
)

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class MatchMode:
    SEQUENCE = "sequence"
    TIME = "time"


@dataclass(frozen=True)
class PipelineConfig:
    experiments: int = 4
    frames: int = 1000
    width: int = 1280
    height: int = 480
    fps: float = 60.0
    segmenter: str = "emulated"
    delay_ms: float = 16.7
    match_mode: str = "sequence"
    rtt_ms: float = 32.29  # expected round trip; sizes the time buffer and the match expiry
    time_buffer_frames: int | None = None  # default: buffer_size_frames(rtt_ms, period)
    max_pending: int = 8
    transport: str = "sim"
    spawn: str = "process"  # tcp only: "process" or "thread"
    router_address: str | None = None  # tcp only: use an already running router
    net_delay_ms: float = 0.0  # sim only: network round trip, split evenly up/down
    jitter_ms: float = 0.0  # sim only: std-dev of each one-way delay
    loss: float = 0.0  # sim only: per-packet loss probability, each direction
    trajectory: str = "circle"
    blob_speed: float = 120.0
    seed: int = 0
    abort_fraction: float = 0.5
    scenario: str | None = None

    def __post_init__(self):
        if self.match_mode not in (MatchMode.SEQUENCE, MatchMode.TIME):
            raise ValueError(f"match_mode must be 'sequence' or 'time', got {self.match_mode!r}")
        if self.transport not in ("sim", "tcp"):
            raise ValueError(f"transport must be 'sim' or 'tcp', got {self.transport!r}")
        if self.spawn not in ("process", "thread"):
            raise ValueError(f"spawn must be 'process' or 'thread', got {self.spawn!r}")
        if self.experiments < 0 or self.frames < 0:
            raise ValueError("experiments and frames must be non-negative")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if not 0.0 <= self.loss < 1.0:
            raise ValueError("loss must be in [0, 1)")
        SegmenterKind(self.segmenter)

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.fps

    @property
    def buffer_frames(self) -> int:
        if self.time_buffer_frames is not None:
            return self.time_buffer_frames
        return buffer_size_frames(self.rtt_ms, self.period_ms)

    @property
    def scenario_name(self) -> str:
        return self.scenario or ("sim" if self.transport == "sim" else "loopback")

    def scene(self) -> SyntheticScene:
        eye_w = self.width // 2
        margin = 50.0
        if self.trajectory == "circle":
            radius = max(10.0, min(120.0, eye_w / 2 - margin, self.height / 2 - margin))
            traj = CircularTrajectory((eye_w / 2, self.height / 2), radius, self.blob_speed)
        elif self.trajectory == "linear":
            traj = LinearTrajectory((margin + 10, self.height / 2), (eye_w - margin - 10, self.height / 2), self.blob_speed)
        else:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        radius = min(40.5, margin - 5.5)
        return SyntheticScene(self.width, self.height, self.fps, blob_radius=radius, trajectory=traj)


class _Compositor:
    """Pairs colour frames with masks (by sequence or by fixed delay) and records results."""

    def __init__(self, cfg: PipelineConfig, scene: SyntheticScene, result: ExperimentResult):
        self.cfg = cfg
        self.scene = scene
        self.result = result
        self.captured: dict[int, tuple[np.ndarray, float, float]] = {}
        self.match = FrameMatchBuffer(3 * cfg.rtt_ms * 1000.0, cfg.max_pending)
        self.delay = TimeDelayBuffer(cfg.buffer_frames)
        self.latest_mask: tuple[int, np.ndarray, float] | None = None
        self.shown_masks: set[int] = set()
        self.server_ms: dict[int, float] = {}
        self.last_output = None

    def on_color(self, seq: int, frame: np.ndarray, t_capture: float, t_sent: float) -> None:
        """New capture; in time mode this is also a display tick for the delayed colour."""
        self.captured[seq] = (frame, t_capture, t_sent)
        if self.cfg.match_mode == MatchMode.SEQUENCE:
            self.match.push_color(seq, frame, t_capture)
        else:
            delayed = self.delay.push(seq)
            if delayed is not None:
                self.on_tick(delayed, t_sent)
        limit = max(2 * self.cfg.max_pending, self.cfg.buffer_frames + 4)
        while len(self.captured) > limit:
            self.captured.pop(next(iter(self.captured)))

    def on_mask(self, seq: int, mask: np.ndarray, t_arrival: float) -> None:
        if self.cfg.match_mode == MatchMode.SEQUENCE:
            if seq not in self.captured:
                return
            self.match.push_mask(seq, mask, t_arrival)
            while (pair := self.match.pop(t_arrival)) is not None:
                pseq, color, pmask = pair
                self._emit(pseq, color, pmask, t_arrival, t_arrival)
        else:
            self.latest_mask = (seq, mask, t_arrival)

    def on_tick(self, color_seq: int, t_tick: float) -> None:
        """Time mode: show colour ``color_seq`` with whatever mask is newest."""
        if self.latest_mask is None or color_seq not in self.captured:
            return
        mseq, mask, t_arrival = self.latest_mask
        color = self.captured[color_seq][0]
        self._emit(mseq, color, mask, t_arrival, t_tick)

    def _emit(self, mseq, color, mask, t_arrival, t_composited) -> None:
        self.last_output = composite(color, mask)
        try:
            err = misalignment_px(color, mask, self.scene.blob_color)
        except (EmptyMask, EmptyBlob):
            err = float("nan")
        self.result.misalignment_px.append(err)
        if mseq in self.shown_masks or mseq not in self.captured:
            return
        self.shown_masks.add(mseq)
        _, t_capture, t_sent = self.captured[mseq]
        self.result.samples.append(
            LatencySample(mseq, t_capture, t_sent, t_arrival, max(t_composited, t_arrival), self.server_ms.get(mseq, 0.0))
        )

    def finish(self) -> None:
        self.result.drops = self.result.frames - len(self.shown_masks)


# --- simulated transport ---------------------------------------------------


def _run_sim_experiment(cfg: PipelineConfig, index: int) -> ExperimentResult:
    scene = cfg.scene()
    rng = np.random.default_rng([cfg.seed, index])
    result = ExperimentResult(index + 1, cfg.scenario_name, cfg.frames)
    comp = _Compositor(cfg, scene, result)
    seg = make_segmenter(cfg.segmenter, ChromaConfig(), cfg.delay_ms)
    core = seg.inner if isinstance(seg, EmulatedSegmenter) else seg
    server_ms = cfg.delay_ms if isinstance(seg, EmulatedSegmenter) else 0.0
    period_us = scene.period_us
    half_net = cfg.net_delay_ms * 500.0
    jitter = cfg.jitter_ms * 1000.0

    def one_way() -> float:
        return max(0.0, half_net + (rng.normal(0.0, jitter) if jitter > 0 else 0.0))

    # plan the transport first so the random stream is independent of the images
    events: list[tuple[float, int, int]] = []  # (time_us, kind, seq); kind 0 = colour, 1 = mask
    server_free = 0.0
    for i in range(cfg.frames):
        t_cap = i * period_us
        events.append((t_cap, 0, i))
        up, down = one_way(), one_way()
        lost = rng.random() < cfg.loss or rng.random() < cfg.loss
        if lost:
            continue
        start = max(t_cap + up, server_free)
        server_free = start + server_ms * 1000.0
        comp.server_ms[i] = server_ms
        events.append((server_free + down, 1, i))
    heapq.heapify(events)

    frames: dict[int, np.ndarray] = {}
    while events:
        t, kind, seq = heapq.heappop(events)
        if kind == 0:
            frame, _, _ = generate_frame(scene, t)
            frames[seq] = frame
            comp.on_color(seq, frame, t, t)
        else:
            frame = frames.get(seq)
            if frame is None:
                frame, _, _ = generate_frame(scene, seq * period_us)
            comp.on_mask(seq, process_frame(frame, core), t)
        if len(frames) > 16:
            del frames[min(frames)]
    comp.finish()
    result.duration_s = cfg.frames / cfg.fps
    result.aborted = result.drops > cfg.abort_fraction * cfg.frames
    return result


# --- TCP transport ---------------------------------------------------------


class _Child:
    """A child process whose stdout lines are collected in the background."""

    def __init__(self, args: list[str]):
        self.proc = subprocess.Popen(
            [sys.executable, *args], stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, bufsize=1
        )
        self.lines: queue.Queue[str] = queue.Queue()
        threading.Thread(target=self._pump, daemon=True).start()

    def _pump(self) -> None:
        for line in self.proc.stdout:
            self.lines.put(line.rstrip("\n"))

    def wait_for(self, prefix: str, timeout: float = 30.0) -> str:
        deadline = time.monotonic() + timeout
        seen = []
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0 or self.proc.poll() is not None and self.lines.empty():
                raise PipelineError(f"child {self.proc.args} did not print {prefix!r}; output: {seen}")
            try:
                line = self.lines.get(timeout=min(remaining, 0.2))
            except queue.Empty:
                continue
            seen.append(line)
            if line.startswith(prefix):
                return line

    def stop(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


class _Services:
    """Router and segmentation server for the TCP transport."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.children: list[_Child] = []
        self.router = None
        self.server: SegmentationServer | None = None
        self.stats_url: str | None = None
        self.router_address = cfg.router_address

    def start(self) -> "_Services":
        cfg = self.cfg
        try:
            if cfg.spawn == "process":
                if self.router_address is None:
                    child = _Child(["-m", "mroffload.polyp", "--bind", "127.0.0.1:0"])
                    self.children.append(child)
                    self.router_address = child.wait_for("polyp listening on").rsplit(" ", 1)[1]
                child = _Child(
                    [
                        "-m", "mroffload.segsvc",
                        "--router", self.router_address,
                        "--in", "frames", "--out", "masks",
                        "--segmenter", cfg.segmenter,
                        "--delay-ms", repr(cfg.delay_ms),
                        "--stats-port", "0",
                    ]
                )
                self.children.append(child)
                self.stats_url = child.wait_for("stats on").rsplit(" ", 1)[1]
                child.wait_for("segsvc ready")
            else:
                from ..polyp import Router

                if self.router_address is None:
                    self.router = Router(("127.0.0.1", 0)).start()
                    self.router_address = self.router.address_str
                server_cfg = ServerConfig(
                    router_address=self.router_address,
                    segmenter=SegmenterKind(cfg.segmenter),
                    emulated_delay_ms=cfg.delay_ms,
                )
                self.server = SegmentationServer(server_cfg).start()
        except BaseException:
            self.stop()
            raise
        return self

    def server_timings(self, since: int) -> list[tuple[int, float]]:
        if self.server is not None:
            return self.server.timings_ms(since)
        with urllib.request.urlopen(f"{self.stats_url}?since={since}", timeout=10) as resp:
            body = json.loads(resp.read().decode("utf-8"))
        return [(t["sequence"], t["ms"]) for t in body["timings"]]

    def stop(self) -> None:
        if self.server is not None:
            self.server.stop()
            self.server = None
        for child in reversed(self.children):
            child.stop()
        self.children.clear()
        if self.router is not None:
            self.router.stop()
            self.router = None


def _now_us() -> float:
    return time.perf_counter_ns() / 1000.0


def _run_tcp_experiment(
    cfg: PipelineConfig, index: int, node: alga.Node, pub: alga.Publisher, sub: alga.Subscription, services: _Services
) -> ExperimentResult:
    scene = cfg.scene()
    result = ExperimentResult(index + 1, cfg.scenario_name, cfg.frames)
    comp = _Compositor(cfg, scene, result)
    lock = threading.Lock()
    first_seq = pub.next_sequence
    timings_before = len(services.server_timings(0))
    period = 1.0 / cfg.fps
    done = threading.Event()
    abort = threading.Event()

    def capture() -> None:
        start = time.perf_counter() + 0.05
        try:
            for i in range(cfg.frames):
                if abort.is_set():
                    break
                deadline = start + i * period
                while (left := deadline - time.perf_counter()) > 0:
                    time.sleep(left)
                seq = first_seq + i
                frame, _, _ = generate_frame(scene, i * period * 1e6)
                t_capture = _now_us()
                pub.publish_picture(frame, sequence=seq, timestamp_us=int(t_capture))
                t_sent = _now_us()
                with lock:
                    comp.on_color(seq, frame, t_capture, t_sent)
                    if comp.match.stats.dropped > cfg.abort_fraction * cfg.frames:
                        result.notes = "aborted: too many unmatched frames"
                        abort.set()
        except alga.Disconnected as exc:
            result.notes = f"aborted: {exc}"
            abort.set()
        finally:
            done.set()

    capturer = threading.Thread(target=capture, name="bench-capture", daemon=True)
    t0 = time.perf_counter()
    capturer.start()
    last_seq = first_seq + cfg.frames - 1
    grace_deadline = None
    while True:
        item = sub.poll_with_arrival(timeout_ms=20)
        if item is not None:
            packet, arrival_ns = item
            seq = packet.header.sequence
            if seq < first_seq:
                continue
            mask = wire.packet_image(packet)[..., 0]
            with lock:
                comp.on_mask(seq, mask, arrival_ns / 1000.0)
            if seq >= last_seq:
                break
        if done.is_set():
            if grace_deadline is None:
                grace_deadline = time.perf_counter() + max(1.0, 5 * cfg.rtt_ms / 1000.0)
            elif time.perf_counter() > grace_deadline:
                break
    capturer.join()
    result.duration_s = time.perf_counter() - t0

    timings = {s: ms for s, ms in services.server_timings(timings_before) if s >= first_seq}
    for sample in result.samples:
        sample.server_ms = timings.get(sample.sequence, 0.0)
    comp.finish()
    result.aborted = abort.is_set() or result.drops > cfg.abort_fraction * cfg.frames
    return result


def _run_tcp(cfg: PipelineConfig, report: LatencyReport) -> None:
    services = _Services(cfg).start()
    try:
        node = alga.connect(
            alga.NodeConfig(router_address=services.router_address, node_name="bench-client", drop_policy=DropPolicy.DROP_OLDEST),
            timeout=10.0,
        )
        with node:
            pub = node.advertise("frames")
            sub = node.subscribe("masks")
            _warm_up(cfg, pub, sub)
            for e in range(cfg.experiments):
                report.experiments.append(_run_tcp_experiment(cfg, e, node, pub, sub, services))
                while sub.poll() is not None:
                    pass
    finally:
        services.stop()


def _warm_up(cfg: PipelineConfig, pub: alga.Publisher, sub: alga.Subscription, timeout: float = 30.0) -> None:
    """Push a few frames until masks come back so caches and sockets are hot."""
    scene = cfg.scene()
    deadline = time.monotonic() + timeout
    got = 0
    i = 0
    while got < 5:
        if time.monotonic() > deadline:
            raise PipelineError("segmentation server never answered")
        frame, _, _ = generate_frame(scene, i * 1e6 / cfg.fps)
        pub.publish_picture(frame)
        i += 1
        if sub.poll(timeout_ms=200) is not None:
            got += 1
    time.sleep(0.1)
    while sub.poll() is not None:
        pass


def run_pipeline(cfg: PipelineConfig) -> LatencyReport:
    """Run ``cfg.experiments`` experiments of ``cfg.frames`` frames each."""
    report = LatencyReport(scenario=cfg.scenario_name, config=asdict(cfg))
    if cfg.transport == "sim":
        for e in range(cfg.experiments):
            report.experiments.append(_run_sim_experiment(cfg, e))
    else:
        _run_tcp(cfg, report)
    return report
