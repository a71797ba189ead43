import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mroffload import calib
from mroffload.calib import CameraModel, ExtrinsicOffset
from mroffload.wire import PosePayload


def scalar_distort(fx, fy, cx, cy, k1, k2, k3, p1, p2, x, y):
    """Independent evaluator of the radial + tangential model, term by term in pixels."""
    xb = x - cx
    yb = y - cy
    r = math.sqrt(xb ** 2 + yb ** 2)
    radial = k1 * r ** 2 + k2 * r ** 4 + k3 * r ** 6
    x_out = x + xb * radial + p1 * (r ** 2 + 2 * xb ** 2) + 2 * p2 * xb * yb
    y_out = y + yb * radial + p2 * (r ** 2 + 2 * yb ** 2) + 2 * p1 * xb * yb
    return x_out, y_out


def random_model(rng):
    return CameraModel(
        rng.uniform(300, 900), rng.uniform(300, 900), rng.uniform(200, 440), rng.uniform(150, 330),
        rng.uniform(-1e-6, 1e-6), rng.uniform(-1e-12, 1e-12), rng.uniform(-1e-18, 1e-18),
        rng.uniform(-1e-5, 1e-5), rng.uniform(-1e-5, 1e-5),
    )


def test_hand_example():
    m = CameraModel(500, 500, 320, 240, k_1=1e-4)
    assert calib.apply_distortion(m, (330, 240)) == pytest.approx((330.1, 240), abs=1e-12)


def test_vectorised_matches_scalar_path():
    rng = random.Random(3)
    m = random_model(rng)
    pts = np.array([[rng.uniform(0, 640), rng.uniform(0, 480)] for _ in range(200)])
    vec = calib.apply_distortion(m, pts)
    for p, out in zip(pts, vec):
        assert tuple(out) == pytest.approx(calib.apply_distortion(m, p), abs=1e-12)


def test_symmetry_between_axes():
    m = CameraModel(500, 500, 320, 240, 1e-6, 0, 0, 3e-5, -2e-5)
    swapped = CameraModel(500, 500, 240, 320, 1e-6, 0, 0, -2e-5, 3e-5)
    x, y = calib.apply_distortion(m, (400, 100))
    ys, xs = calib.apply_distortion(swapped, (100, 400))
    assert (x, y) == pytest.approx((xs, ys), abs=1e-12)


def test_normalized_variant_scales_by_focal_length():
    m = CameraModel(400, 400, 320, 240, k_1=0.1)
    x, _ = calib.apply_distortion(m, (360, 240), normalized=True)
    # x_bar = 40 / 400 = 0.1, r^2 = 0.01 -> correction 0.1*0.1*0.01*400
    assert x == pytest.approx(360 + 0.1 * 0.1 * 0.01 * 400, abs=1e-12)


def test_invert_distortion():
    m = CameraModel(500, 500, 320, 240, k_1=1e-4)
    assert calib.invert_distortion(m, (330.1, 240)) == pytest.approx((330, 240), abs=1e-4)
    ident = CameraModel(500, 500, 320, 240)
    assert calib.invert_distortion(ident, (12.5, 99.0)) == (12.5, 99.0)


def test_invert_pathological_raises():
    m = CameraModel(500, 500, 320, 240, k_1=1.0)
    with pytest.raises(calib.NoConvergence):
        calib.invert_distortion(m, (0, 0))


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1e-6, 1e-6), st.floats(-1e-6, 1e-6), st.floats(-1e-6, 1e-6),
    st.floats(0, 640), st.floats(0, 480),
)
def test_invert_apply_roundtrip(k1, p1, p2, x, y):
    m = CameraModel(500, 500, 320, 240, k_1=k1, p_1=p1, p_2=p2)
    xd, yd = calib.apply_distortion(m, (x, y))
    assert calib.invert_distortion(m, (xd, yd)) == pytest.approx((x, y), abs=1e-4)


def test_invert_outside_distortion_range_raises():
    # barrel distortion folds at r = 1/sqrt(3|k1|) ~ 597 px, peaking near 398 px;
    # the corner is 400 px out, so nothing distorts onto it
    m = CameraModel(500, 500, 320, 240, k_1=-9.34478747278399e-07)
    with pytest.raises(calib.NoConvergence):
        calib.invert_distortion(m, (0, 0))


def test_camera_model_validation_and_dict():
    with pytest.raises(calib.CalibError):
        CameraModel(0, 500, 320, 240)
    m = CameraModel(1, 2, 3, 4, 5, 6, 7, 8, 9)
    assert CameraModel.from_dict(m.to_dict()) == m
    assert CameraModel.from_dict({"f_x": 1, "f_y": 2, "c_x": 3, "c_y": 4}) == CameraModel(1, 2, 3, 4)


def test_plane_scale_examples():
    m = CameraModel(480, 480, 320, 240)
    s = calib.plane_scale(m, 1.0, (640, 480))
    assert (s.s_x, s.s_y) == pytest.approx((4 / 3, 1.0))
    s2 = calib.plane_scale(m, 2.0, (640, 480))
    assert (s2.s_x, s2.s_y) == pytest.approx((8 / 3, 2.0))
    with pytest.raises(calib.NonPositiveDistance):
        calib.plane_scale(m, 0.0, (640, 480))


@given(st.floats(0.01, 100), st.floats(10, 5000), st.integers(1, 4000), st.integers(1, 4000))
def test_plane_scale_homogeneity(d, fy, rx, ry):
    m = CameraModel(100, fy, 0, 0)
    s = calib.plane_scale(m, d, (rx, ry))
    assert s.s_x / s.s_y == pytest.approx(rx / ry)
    assert calib.plane_scale(m, 2 * d, (rx, ry)).s_y == pytest.approx(2 * s.s_y)
    assert calib.plane_scale(CameraModel(100, 2 * fy, 0, 0), d, (rx, ry)).s_y == pytest.approx(s.s_y / 2)


@given(st.floats(-20, 20))
def test_wrap_angle_range(a):
    w = calib.wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)
    assert math.sin(w) == pytest.approx(math.sin(a), abs=1e-9)


def test_wrap_angle_boundary():
    assert calib.wrap_angle(-math.pi) == math.pi
    assert ExtrinsicOffset(0, 0, 3 * math.pi).beta == pytest.approx(math.pi)


def _synthetic_pairs(n, offset, rng, noise=0.0):
    cam = rng.uniform(-1, 1, (n, 2))
    dev = offset.apply_points(cam) + rng.normal(0, noise, (n, 2)) if noise else offset.apply_points(cam)
    return [(tuple(d), tuple(c)) for d, c in zip(dev, cam)]


def test_solve_recovers_noiseless():
    truth = ExtrinsicOffset(0.03, -0.05, math.radians(25))
    pairs = _synthetic_pairs(50, truth, np.random.default_rng(0))
    est = calib.solve_extrinsic(pairs)
    assert (est.delta_x, est.delta_y, est.beta) == pytest.approx((truth.delta_x, truth.delta_y, truth.beta), abs=1e-6)


def test_solve_permutation_invariant():
    rng = np.random.default_rng(1)
    pairs = _synthetic_pairs(40, ExtrinsicOffset(0.1, 0.2, -1.0), rng, noise=0.01)
    shuffled = list(pairs)
    random.Random(2).shuffle(shuffled)
    a, b = calib.solve_extrinsic(pairs), calib.solve_extrinsic(shuffled)
    assert (a.delta_x, a.delta_y, a.beta) == pytest.approx((b.delta_x, b.delta_y, b.beta), abs=1e-12)


def test_solve_degenerate_cases():
    assert calib.solve_extrinsic([((1.0, 2.0), (1.0, 2.0))] * 3) == ExtrinsicOffset(0, 0, 0)
    with pytest.raises(calib.DegenerateConfiguration):
        calib.solve_extrinsic([((1.0, 2.0), (0.0, 0.0))] * 3)
    with pytest.raises(calib.DegenerateConfiguration):
        calib.solve_extrinsic([((1.0, 2.0), (0.0, 0.0))])


def test_extrinsic_apply_and_inverse():
    off = ExtrinsicOffset(0.03, -0.05, math.radians(25))
    pose = PosePayload((0.4, -0.2, 1.5), (math.cos(0.3), 0.0, 0.0, math.sin(0.3)))
    assert calib.apply_extrinsic(ExtrinsicOffset(), pose) == pose
    back = calib.apply_extrinsic(off.inverse(), calib.apply_extrinsic(off, pose))
    assert back.position == pytest.approx(pose.position, abs=1e-9)
    assert back.orientation == pytest.approx(pose.orientation, abs=1e-9)


def test_solve_then_apply_closes_loop():
    truth = ExtrinsicOffset(-0.02, 0.07, 0.4)
    pairs = _synthetic_pairs(20, truth, np.random.default_rng(5))
    est = calib.solve_extrinsic(pairs)
    for dev, cam in pairs:
        out = calib.apply_extrinsic(est, PosePayload((cam[0], cam[1], 0.0)))
        assert out.position[:2] == pytest.approx(dev, abs=1e-9)


def test_calib_cli(tmp_path, capsys):
    truth = ExtrinsicOffset(0.03, -0.05, math.radians(25))
    pairs = _synthetic_pairs(30, truth, np.random.default_rng(9))
    path = tmp_path / "pairs.json"
    path.write_text(json.dumps({"pairs": [{"device": d, "camera": c} for d, c in pairs]}))
    assert calib.main(["solve", "--input", str(path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["beta_deg"] == pytest.approx(25.0)
    cam = tmp_path / "cam.json"
    cam.write_text(json.dumps(CameraModel(480, 480, 320, 240).to_dict()))
    assert calib.main(["scale", "--camera", str(cam), "--distance", "1", "--resolution", "640x480"]) == 0
    assert json.loads(capsys.readouterr().out)["s_x"] == pytest.approx(4 / 3)
    assert calib.main(["solve", "--input", str(tmp_path / "missing.json")]) == 2
