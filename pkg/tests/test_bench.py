import math
import random
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mroffload.bench import cli, report, scene, stats
from mroffload.bench.pipeline import PipelineConfig, run_pipeline
from mroffload.bench.report import ExperimentResult, LatencyReport, LatencySample
from mroffload.segsvc import chroma_segment


@pytest.fixture(scope="module")
def default_scene():
    return scene.SyntheticScene()


def test_generate_frame_deterministic(default_scene):
    a = scene.generate_frame(default_scene, 123_456)
    b = scene.generate_frame(default_scene, 123_456)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]


def test_ground_truth_is_blob_support(default_scene):
    frame, mask, _ = scene.generate_frame(default_scene, 0.5e6)
    blob = (frame == default_scene.blob_color).all(axis=-1)
    assert np.array_equal(blob, mask == 255)
    assert np.array_equal(mask, default_scene.ground_truth(0.5e6))


def test_blob_at_given_position():
    s = scene.SyntheticScene(trajectory=scene.LinearTrajectory((100, 200), (100.0001, 200), speed=0.0))
    frame, mask, _ = scene.generate_frame(s, 0)
    ys, xs = np.nonzero(mask[:, :640])
    assert abs(xs.mean() + 0.5 - 100) < 1 and abs(ys.mean() + 0.5 - 200) < 1
    assert ((xs + 0.5 - 100) ** 2 + (ys + 0.5 - 200) ** 2).max() <= (s.blob_radius + 1.5) ** 2


def test_chroma_reproduces_ground_truth(default_scene):
    for t in (0, 0.3e6, 1.7e6):
        frame, mask, _ = scene.generate_frame(default_scene, t)
        assert np.array_equal(chroma_segment(frame), mask)


def test_scene_rejects_blob_outside():
    with pytest.raises(ValueError):
        scene.SyntheticScene(trajectory=scene.CircularTrajectory((320, 240), 230))


def test_pose_encodes_trajectory(default_scene):
    pose = default_scene.pose(1e6)
    cx, cy = default_scene.blob_center(1e6)
    assert pose.position[:2] == pytest.approx((cx / 1000, cy / 1000))


def test_misalignment_examples(default_scene):
    period = default_scene.period_us
    frame, gt, _ = scene.generate_frame(default_scene, 100 * period)
    assert scene.misalignment_px(frame, gt) == 0.0
    lagged = default_scene.ground_truth(98 * period)
    # chord of a 120 px circle swept at 120 px/s over 2/60 s
    r = default_scene.trajectory.radius
    chord = 2 * r * math.sin(120 / r * (2 / 60) / 2)
    assert scene.misalignment_px(frame, lagged) == pytest.approx(chord, abs=0.1)
    assert chord == pytest.approx(4.0, abs=1e-3)
    with pytest.raises(scene.EmptyMask):
        scene.misalignment_px(frame, np.zeros_like(gt))
    with pytest.raises(scene.EmptyBlob):
        scene.misalignment_px(np.zeros_like(frame), gt)
    with pytest.raises(ValueError):
        scene.misalignment_px(frame, gt[:10])


def test_composite_keeps_masked_pixels(default_scene):
    frame, gt, _ = scene.generate_frame(default_scene, 0)
    out = scene.composite(frame, gt)
    assert np.array_equal(out[gt == 255], frame[gt == 255])
    assert (out[gt == 0] == 0).all()


def brute_stats(xs):
    n = len(xs)
    mean = sum(xs) / n
    var = sum((x - mean) * (x - mean) for x in xs) / (n - 1) if n > 1 else 0.0
    ordered = sorted(xs)
    rank = math.ceil(0.95 * n - 1e-12)
    return mean, var, ordered[max(rank, 1) - 1]


def test_stats_examples():
    assert stats.stats([5.0]) == (5.0, 0.0, 5.0)
    s = stats.stats(range(1, 101))
    assert (s.mean, s.p95) == (50.5, 95)
    with pytest.raises(stats.EmptyInput):
        stats.stats([])
    with pytest.raises(ValueError):
        stats.stats([1.0, math.nan])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200))
def test_stats_bounds(xs):
    s = stats.stats(xs)
    assert min(xs) - 1e-9 <= s.mean <= max(xs) + 1e-9
    assert min(xs) <= s.p95 <= max(xs)
    assert s.variance >= 0
    assert tuple(s) == pytest.approx(brute_stats(xs), rel=1e-9, abs=1e-9)


def _sample(seq, cap, rtt_ms, server_ms):
    return LatencySample(seq, cap, cap + 100, cap + rtt_ms * 1000, cap + rtt_ms * 1000 + 50, server_ms)


def _report(n_exp=4, n=10):
    rng = random.Random(0)
    exps = []
    for e in range(n_exp):
        samples = [_sample(i, i * 16_667.0, rng.uniform(20, 40), rng.uniform(16, 17.5)) for i in range(n)]
        exps.append(ExperimentResult(e + 1, "loopback", n, samples, [0.0] * n, drops=e))
    return LatencyReport("loopback", exps, {"fps": 60})


def test_sample_arithmetic():
    s = _sample(0, 1000.0, 30.0, 16.0)
    assert s.monotone()
    assert s.rtt_ms == pytest.approx(30.0) and s.network_ms == pytest.approx(14.0)


def test_report_rows_and_aggregate():
    rep = _report()
    rows = rep.rows()
    assert len(rows) == 5 and rows[-1]["experiment"] == "aggregate"
    pooled = rep.all_samples()
    net = sum(s.network_ms for s in pooled) / len(pooled)
    srv = sum(s.server_ms for s in pooled) / len(pooled)
    assert rows[-1]["e2e_mean_ms"] == pytest.approx(net + srv, abs=1e-9)
    assert rows[-1]["drops"] == 0 + 1 + 2 + 3
    assert LatencyReport().rows() == []


def test_csv_report(tmp_path):
    path = report.write_report(_report(), tmp_path / "out.csv")
    rows = report.read_csv_rows(path)
    assert len(rows) == 5
    assert list(rows[0])[:7] == ["experiment", "scenario", "mean_ms", "variance_ms2", "p95_ms", "frames", "drops"]
    empty = report.write_report(LatencyReport(), tmp_path / "empty.csv")
    assert empty.read_text().strip().splitlines() == [",".join(report.CSV_COLUMNS)]


def test_json_roundtrip(tmp_path):
    rep = _report()
    path = report.write_report(rep, tmp_path / "out.json")
    assert report.read_report(path) == rep


def test_write_report_error(tmp_path):
    with pytest.raises(report.ReportError):
        report.write_report(_report(), tmp_path / "missing" / "out.csv")


def test_throughput():
    exp = ExperimentResult(1, "x", 3, [_sample(i, i * 1e6 / 60, 30, 16) for i in range(61)])
    assert exp.throughput_hz == pytest.approx(60.0)


SIM = PipelineConfig(experiments=1, frames=120, transport="sim", segmenter="chroma", delay_ms=0.0)


def test_sim_sequence_mode_zero_misalignment():
    rep = run_pipeline(replace(SIM, net_delay_ms=30, jitter_ms=5, loss=0.05, seed=3))
    exp = rep.experiments[0]
    assert exp.misalignment_px and all(m == 0.0 for m in exp.misalignment_px)
    assert exp.drops > 0 and not exp.aborted


def test_sim_is_deterministic():
    cfg = replace(SIM, net_delay_ms=20, jitter_ms=4, loss=0.1, seed=7, match_mode="time", time_buffer_frames=1)
    a, b = run_pipeline(cfg), run_pipeline(cfg)
    assert a.to_dict() == b.to_dict()
    assert run_pipeline(replace(cfg, seed=8)).to_dict() != a.to_dict()


@pytest.mark.parametrize("k", [1, 2])
def test_sim_time_mode_law(k):
    period = 16.67
    base = replace(SIM, fps=1000 / period, net_delay_ms=32.29, match_mode="time", trajectory="linear")
    exact = run_pipeline(replace(base, time_buffer_frames=2)).experiments[0]
    assert max(exact.misalignment_px) <= 0.5
    under = run_pipeline(replace(base, time_buffer_frames=2 - k)).experiments[0]
    expected = base.blob_speed * k * period / 1000
    assert all(abs(m - expected) <= 0.5 for m in under.misalignment_px[5:])


def test_sim_aborts_when_most_frames_drop():
    rep = run_pipeline(replace(SIM, loss=0.6, seed=1))
    assert rep.experiments[0].aborted


def test_bench_cli_sim_and_replay(tmp_path, capsys):
    out_json = tmp_path / "r.json"
    code = cli.main([
        "run", "--transport", "sim", "--experiments", "2", "--frames", "60", "--segmenter", "chroma",
        "--delay-ms", "0", "--report", str(tmp_path / "r.csv"), "--json", str(out_json), "--check",
    ])
    assert code == 0
    assert "all checks passed" in capsys.readouterr().out
    assert len(report.read_csv_rows(tmp_path / "r.csv")) == 3
    assert cli.main(["replay", "--report", str(out_json)]) == 0
    assert "aggregate" in capsys.readouterr().out
    assert cli.main(["replay", "--report", str(tmp_path / "nope.json")]) == 2


def test_bench_cli_check_fails_on_undersized_buffer(tmp_path, capsys):
    code = cli.main([
        "run", "--transport", "sim", "--experiments", "1", "--frames", "60", "--segmenter", "chroma",
        "--delay-ms", "0", "--match-mode", "time", "--net-delay-ms", "33.34", "--buffer-frames", "0", "--check", "-q",
    ])
    assert code == 1
    assert "misalignment" in capsys.readouterr().err


def test_tcp_pipeline_threads_short():
    cfg = PipelineConfig(experiments=1, frames=90, transport="tcp", spawn="thread", segmenter="emulated", delay_ms=5.0)
    exp = run_pipeline(cfg).experiments[0]
    assert exp.composited >= 85 and not exp.aborted
    assert all(m == 0.0 for m in exp.misalignment_px)
    assert all(s.monotone() for s in exp.samples)
    assert 4.0 <= exp.server().mean <= 8.0
