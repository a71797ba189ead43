"""Latency samples, per-experiment results and CSV/JSON reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .stats import Summary, stats

CSV_COLUMNS = [
    "experiment",
    "scenario",
    "mean_ms",
    "variance_ms2",
    "p95_ms",
    "frames",
    "drops",
    "std_ms",
    "server_mean_ms",
    "server_variance_ms2",
    "server_std_ms",
    "server_p95_ms",
    "e2e_mean_ms",
]

AGGREGATE = "aggregate"


class ReportError(OSError):
    pass


@dataclass
class LatencySample:
    """Per-frame timestamps in microseconds on the client clock.

    ``server_ms`` is the server's own processing time for this frame.
    """

    sequence: int
    t_capture: float
    t_sent: float
    t_mask_received: float
    t_composited: float
    server_ms: float = 0.0

    @property
    def rtt_ms(self) -> float:
        """Capture to mask arrival, everything included."""
        return (self.t_mask_received - self.t_capture) / 1000.0

    @property
    def network_ms(self) -> float:
        """Round trip with the server's processing time taken out."""
        return self.rtt_ms - self.server_ms

    def monotone(self) -> bool:
        return self.t_capture <= self.t_sent <= self.t_mask_received <= self.t_composited


@dataclass
class ExperimentResult:
    experiment: int
    scenario: str
    frames: int
    samples: list[LatencySample] = field(default_factory=list)
    misalignment_px: list[float] = field(default_factory=list)
    drops: int = 0
    duration_s: float = 0.0
    aborted: bool = False
    notes: str = ""

    @property
    def composited(self) -> int:
        return len(self.samples)

    @property
    def throughput_hz(self) -> float:
        """Composited pairs per second between the first and last composite."""
        times = sorted(s.t_composited for s in self.samples)
        if len(times) < 2 or times[-1] <= times[0]:
            return 0.0
        return (len(times) - 1) / ((times[-1] - times[0]) / 1e6)

    def network(self) -> Summary | None:
        return stats([s.network_ms for s in self.samples]) if self.samples else None

    def server(self) -> Summary | None:
        return stats([s.server_ms for s in self.samples]) if self.samples else None

    def rtt(self) -> Summary | None:
        return stats([s.rtt_ms for s in self.samples]) if self.samples else None


@dataclass
class LatencyReport:
    scenario: str = "loopback"
    experiments: list[ExperimentResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def all_samples(self) -> list[LatencySample]:
        return [s for e in self.experiments for s in e.samples]

    def rows(self) -> list[dict]:
        """CSV rows: one per experiment, then the pooled aggregate."""
        if not self.experiments:
            return []
        rows = [
            _row(str(e.experiment), e.scenario, e.samples, e.frames, e.drops) for e in self.experiments
        ]
        rows.append(
            _row(
                AGGREGATE,
                self.scenario,
                self.all_samples(),
                sum(e.frames for e in self.experiments),
                sum(e.drops for e in self.experiments),
            )
        )
        return rows

    def aggregate(self) -> dict:
        return self.rows()[-1] if self.experiments else {}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LatencyReport":
        exps = []
        for e in data.get("experiments", []):
            e = dict(e)
            e["samples"] = [LatencySample(**s) for s in e.get("samples", [])]
            exps.append(ExperimentResult(**e))
        return cls(scenario=data.get("scenario", "loopback"), experiments=exps, config=dict(data.get("config", {})))


def _row(name: str, scenario: str, samples: list[LatencySample], frames: int, drops: int) -> dict:
    row = dict.fromkeys(CSV_COLUMNS, "")
    row.update(experiment=name, scenario=scenario, frames=frames, drops=drops)
    if samples:
        net = stats([s.network_ms for s in samples])
        srv = stats([s.server_ms for s in samples])
        row.update(
            mean_ms=net.mean,
            variance_ms2=net.variance,
            p95_ms=net.p95,
            std_ms=net.std,
            server_mean_ms=srv.mean,
            server_variance_ms2=srv.variance,
            server_std_ms=srv.std,
            server_p95_ms=srv.p95,
            e2e_mean_ms=net.mean + srv.mean,
        )
    return row


def write_report(report: LatencyReport, path: str | Path, fmt: str | None = None) -> Path:
    """Write ``report`` as CSV or JSON (by ``fmt`` or the file suffix)."""
    path = Path(path)
    fmt = (fmt or ("json" if path.suffix.lower() == ".json" else "csv")).lower()
    try:
        if fmt == "json":
            path.write_text(json.dumps(report.to_dict(), indent=1, allow_nan=False), encoding="utf-8")
        elif fmt == "csv":
            with path.open("w", newline="", encoding="utf-8") as fh:
                writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
                writer.writeheader()
                for row in report.rows():
                    writer.writerow({k: _fmt(v) for k, v in row.items()})
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise ReportError(f"cannot write report to {path}: {exc}") from exc
    return path


def _fmt(value):
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ""
    return value


def read_report(path: str | Path) -> LatencyReport:
    path = Path(path)
    try:
        return LatencyReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except OSError as exc:
        raise ReportError(f"cannot read report {path}: {exc}") from exc


def read_csv_rows(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_table(report: LatencyReport) -> str:
    """Plain-text table in the shape of the latency results."""
    header = f"{'experiment':>10} {'frames':>6} {'drops':>5} {'mean ms':>9} {'var ms2':>9} {'std ms':>8} {'p95 ms':>8} {'server ms':>9} {'e2e ms':>8}"
    lines = [f"scenario: {report.scenario}", header]
    for row in report.rows():
        if row["mean_ms"] == "":
            lines.append(f"{row['experiment']:>10} {row['frames']:>6} {row['drops']:>5} {'-':>9}")
            continue
        lines.append(
            f"{row['experiment']:>10} {row['frames']:>6} {row['drops']:>5} {row['mean_ms']:9.3f} "
            f"{row['variance_ms2']:9.3f} {row['std_ms']:8.3f} {row['p95_ms']:8.3f} "
            f"{row['server_mean_ms']:9.3f} {row['e2e_mean_ms']:8.3f}"
        )
    for e in report.experiments:
        mis = max(e.misalignment_px) if e.misalignment_px else float("nan")
        flag = " ABORTED" if e.aborted else ""
        lines.append(
            f"experiment {e.experiment}: {e.composited} composited, {e.throughput_hz:.2f} Hz, "
            f"max misalignment {mis:.3f} px{flag}"
        )
    return "\n".join(lines)
