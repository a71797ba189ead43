"""``bench`` command line: run the offloading benchmark or reprint a saved report."""

from __future__ import annotations

import argparse
import logging
import math
import sys

from .pipeline import PipelineConfig, PipelineError, run_pipeline
from .report import LatencyReport, ReportError, format_table, read_report, write_report


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 1280x480, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def check_report(report: LatencyReport, cfg: PipelineConfig) -> list[str]:
    """Acceptance invariants; returns one message per failure."""
    failures = []
    min_rate = cfg.fps * 59.0 / 60.0
    for e in report.experiments:
        tag = f"experiment {e.experiment}"
        if e.aborted:
            failures.append(f"{tag}: aborted ({e.notes or 'too many drops'})")
            continue
        if e.throughput_hz < min_rate:
            failures.append(f"{tag}: throughput {e.throughput_hz:.2f} Hz < {min_rate:.2f} Hz")
        finite = [m for m in e.misalignment_px if not math.isnan(m)]
        if len(finite) != len(e.misalignment_px):
            failures.append(f"{tag}: {len(e.misalignment_px) - len(finite)} composites had no blob or no mask")
        if cfg.match_mode == "sequence" and any(m != 0.0 for m in finite):
            failures.append(f"{tag}: misalignment {max(finite):.3f} px in sequence mode")
        if cfg.match_mode == "time" and finite and max(finite) > 0.5:
            failures.append(f"{tag}: misalignment {max(finite):.3f} px > 0.5 px in time mode")
        if cfg.segmenter == "emulated" and e.samples:
            mean = e.server().mean
            if abs(mean - cfg.delay_ms) > 1.0:
                failures.append(f"{tag}: server mean {mean:.3f} ms not within 1 ms of {cfg.delay_ms} ms")
    if not report.experiments and cfg.experiments:
        failures.append("no experiments ran")
    return failures


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description="Offloading pipeline benchmark.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run experiments and write a report")
    run.add_argument("--experiments", type=int, default=4)
    run.add_argument("--frames", type=int, default=1000)
    run.add_argument("--resolution", type=_resolution, default=(1280, 480))
    run.add_argument("--fps", type=float, default=60.0)
    run.add_argument("--segmenter", choices=["chroma", "identity", "emulated"], default="emulated")
    run.add_argument("--delay-ms", type=float, default=16.7, help="emulated segmenter latency")
    run.add_argument("--match-mode", choices=["sequence", "time"], default="sequence")
    run.add_argument("--rtt-ms", type=float, default=32.29, help="expected round trip for buffer sizing")
    run.add_argument("--buffer-frames", type=int, help="time-mode buffer length (default: from --rtt-ms)")
    run.add_argument("--transport", choices=["tcp", "sim"], default="tcp")
    run.add_argument("--spawn", choices=["process", "thread"], default="process", help="how tcp mode starts services")
    run.add_argument("--router", help="use a running router at host:port instead of spawning one")
    run.add_argument("--net-delay-ms", type=float, default=0.0, help="sim: network round trip")
    run.add_argument("--jitter-ms", type=float, default=0.0, help="sim: one-way delay std-dev")
    run.add_argument("--loss", type=float, default=0.0, help="sim: per-direction loss probability")
    run.add_argument("--trajectory", choices=["circle", "linear"], default="circle")
    run.add_argument("--blob-speed", type=float, default=120.0, help="px/s")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--scenario", help="label for the report rows")
    run.add_argument("--report", help="output path (.csv or .json)")
    run.add_argument("--json", help="also write the full JSON report here")
    run.add_argument("--check", action="store_true", help="exit nonzero if an acceptance invariant fails")
    run.add_argument("-q", "--quiet", action="store_true")

    replay = sub.add_parser("replay", help="print the tables of a saved JSON report")
    replay.add_argument("--report", required=True)
    replay.add_argument("--csv", help="re-export the report as CSV")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")

    if args.cmd == "replay":
        try:
            report = read_report(args.report)
            if args.csv:
                write_report(report, args.csv, "csv")
        except (ReportError, ValueError, KeyError, TypeError) as exc:
            print(f"bench: {exc}", file=sys.stderr)
            return 2
        print(format_table(report))
        return 0

    try:
        cfg = PipelineConfig(
            experiments=args.experiments,
            frames=args.frames,
            width=args.resolution[0],
            height=args.resolution[1],
            fps=args.fps,
            segmenter=args.segmenter,
            delay_ms=args.delay_ms,
            match_mode=args.match_mode,
            rtt_ms=args.rtt_ms,
            time_buffer_frames=args.buffer_frames,
            transport=args.transport,
            spawn=args.spawn,
            router_address=args.router,
            net_delay_ms=args.net_delay_ms,
            jitter_ms=args.jitter_ms,
            loss=args.loss,
            trajectory=args.trajectory,
            blob_speed=args.blob_speed,
            seed=args.seed,
            scenario=args.scenario,
        )
        cfg.scene()
    except ValueError as exc:
        parser.error(str(exc))

    try:
        report = run_pipeline(cfg)
    except (PipelineError, OSError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    try:
        if args.report:
            write_report(report, args.report)
        if args.json:
            write_report(report, args.json, "json")
    except ReportError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        print(format_table(report))
    if args.check:
        failures = check_report(report, cfg)
        for msg in failures:
            print(f"CHECK FAILED: {msg}", file=sys.stderr)
        if failures:
            return 1
        print("all checks passed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
