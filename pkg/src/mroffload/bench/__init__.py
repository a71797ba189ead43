"""Synthetic-scene pipeline runner and latency reporting."""

from .pipeline import PipelineConfig, run_pipeline
from .report import LatencyReport, LatencySample, read_report, write_report
from .scene import SyntheticScene, generate_frame, misalignment_px
from .stats import Summary

__all__ = [
    "PipelineConfig",
    "run_pipeline",
    "LatencyReport",
    "LatencySample",
    "read_report",
    "write_report",
    "SyntheticScene",
    "generate_frame",
    "misalignment_px",
    "Summary",
]
