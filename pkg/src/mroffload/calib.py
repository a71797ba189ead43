"""Camera calibration math for placing the pass-through rendering planes.

Lens distortion is evaluated directly in pixel coordinates around the
principal point::

    x' = x + x̄(k1 r² + k2 r⁴ + k3 r⁶) + p1 (r² + 2x̄²) + 2 p2 x̄ ȳ
    y' = y + ȳ(k1 r² + k2 r⁴ + k3 r⁶) + p2 (r² + 2ȳ²) + 2 p1 x̄ ȳ

with x̄ = x - c_x, ȳ = y - c_y and r² = x̄² + ȳ². Pass ``normalized=True`` to
use the conventional form that divides by the focal length first.

The camera-to-device relationship is planar: a rotation β about the device's
lateral axis and a translation (Δx, Δy) in the plane it spans. Device frame
convention: x forward, y up, z lateral.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .wire import PosePayload


class CalibError(ValueError):
    pass


class NoConvergence(CalibError):
    pass


class NonPositiveDistance(CalibError):
    pass


class DegenerateConfiguration(CalibError):
    pass


@dataclass(frozen=True)
class CameraModel:
    f_x: float
    f_y: float
    c_x: float
    c_y: float
    k_1: float = 0.0
    k_2: float = 0.0
    k_3: float = 0.0
    p_1: float = 0.0
    p_2: float = 0.0

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise CalibError(f"focal lengths must be positive, got f_x={self.f_x}, f_y={self.f_y}")

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        if "intrinsics" in data:
            f_x, f_y, c_x, c_y = data["intrinsics"]
            k_1, k_2, k_3, p_1, p_2 = data.get("distortion", [0.0] * 5)
            return cls(f_x, f_y, c_x, c_y, k_1, k_2, k_3, p_1, p_2)
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> dict:
        return {
            "intrinsics": [self.f_x, self.f_y, self.c_x, self.c_y],
            "distortion": [self.k_1, self.k_2, self.k_3, self.p_1, self.p_2],
        }


def wrap_angle(angle: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(angle, 2 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


@dataclass(frozen=True)
class ExtrinsicOffset:
    delta_x: float = 0.0
    delta_y: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta", wrap_angle(self.beta))

    def inverse(self) -> "ExtrinsicOffset":
        c, s = math.cos(self.beta), math.sin(self.beta)
        # inverse of p -> R p + t is p -> R^T p - R^T t
        return ExtrinsicOffset(-(c * self.delta_x + s * self.delta_y), -(-s * self.delta_x + c * self.delta_y), -self.beta)

    def apply_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        c, s = math.cos(self.beta), math.sin(self.beta)
        rot = np.array([[c, -s], [s, c]])
        return pts @ rot.T + np.array([self.delta_x, self.delta_y])


@dataclass(frozen=True)
class PlaneScale:
    s_x: float
    s_y: float
    d_r: float


def _correction(model: CameraModel, x, y, normalized: bool):
    xb = x - model.c_x
    yb = y - model.c_y
    if normalized:
        xb = xb / model.f_x
        yb = yb / model.f_y
    r2 = xb * xb + yb * yb
    radial = model.k_1 * r2 + model.k_2 * r2 * r2 + model.k_3 * r2 * r2 * r2
    dx = xb * radial + model.p_1 * (r2 + 2 * xb * xb) + 2 * model.p_2 * xb * yb
    dy = yb * radial + model.p_2 * (r2 + 2 * yb * yb) + 2 * model.p_1 * xb * yb
    if normalized:
        dx = dx * model.f_x
        dy = dy * model.f_y
    return dx, dy


def apply_distortion(model: CameraModel, point, normalized: bool = False):
    """Distorted pixel position of ``point``; accepts an (x, y) pair or an (N, 2) array."""
    arr = np.asarray(point, dtype=float)
    if arr.ndim == 1:
        x, y = float(arr[0]), float(arr[1])
        dx, dy = _correction(model, x, y, normalized)
        return (x + dx, y + dy)
    x, y = arr[..., 0], arr[..., 1]
    dx, dy = _correction(model, x, y, normalized)
    return np.stack([x + dx, y + dy], axis=-1)


def invert_distortion(
    model: CameraModel, point, normalized: bool = False, max_iter: int = 20, tol: float = 1e-6
) -> tuple[float, float]:
    """Undistorted position whose distortion is ``point``.

    Fixed-point iteration ``x <- x' - correction(x)`` until an update is below
    ``tol``. Far from the principal point the contraction can be too slow for
    ``max_iter`` steps; if the iteration is still shrinking it is finished
    with Newton steps on the same equation. A diverging iteration raises.
    """
    xd, yd = float(point[0]), float(point[1])
    x, y = xd, yd
    first = None
    step = math.inf
    for _ in range(max_iter):
        dx, dy = _correction(model, x, y, normalized)
        nx, ny = xd - dx, yd - dy
        if not (math.isfinite(nx) and math.isfinite(ny)):
            break
        step = math.hypot(nx - x, ny - y)
        x, y = nx, ny
        if step < tol:
            return (x, y)
        first = step if first is None else first
    else:
        if first is not None and step < first:
            return _newton(model, xd, yd, x, y, normalized, max_iter, tol)
    raise NoConvergence(f"no convergence for ({xd}, {yd}) after {max_iter} iterations")


def _newton(model, xd, yd, x, y, normalized, max_iter, tol):
    h = 1e-4
    for _ in range(max_iter):
        fx, fy = _correction(model, x, y, normalized)
        rx, ry = x + fx - xd, y + fy - yd
        ax, ay = _correction(model, x + h, y, normalized)
        bx, by = _correction(model, x, y + h, normalized)
        j11, j21 = 1 + (ax - fx) / h, (ay - fy) / h
        j12, j22 = (bx - fx) / h, 1 + (by - fy) / h
        det = j11 * j22 - j12 * j21
        if not math.isfinite(det) or det == 0:
            break
        sx = (j22 * rx - j12 * ry) / det
        sy = (j11 * ry - j21 * rx) / det
        x, y = x - sx, y - sy
        if math.hypot(sx, sy) < tol:
            return (x, y)
    raise NoConvergence(f"no convergence for ({xd}, {yd})")


def plane_scale(model: CameraModel, d_r: float, resolution: tuple[int, int]) -> PlaneScale:
    """Rendering-plane size at distance ``d_r``: s_y = d_r R_y / f_y, s_x = s_y R_x / R_y."""
    if not d_r > 0:
        raise NonPositiveDistance(f"rendering distance must be positive, got {d_r}")
    r_x, r_y = resolution
    s_y = d_r * r_y / model.f_y
    return PlaneScale(s_y * r_x / r_y, s_y, d_r)


def solve_extrinsic(pairs: Sequence) -> ExtrinsicOffset:
    """Least-squares planar rigid transform mapping camera points onto device points.

    ``pairs`` holds ``(device_xy, camera_xy)`` correspondences; the result
    minimizes sum |R(beta) p_cam + t - p_dev|^2 (2-D orthogonal Procrustes).
    """
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 3 or arr.shape[1:] != (2, 2):
        raise CalibError("pairs must have shape (N, 2, 2): (device_xy, camera_xy) per row")
    if len(arr) < 2:
        raise DegenerateConfiguration("need at least two correspondences")
    dev, cam = arr[:, 0], arr[:, 1]
    dev_c, cam_c = dev.mean(axis=0), cam.mean(axis=0)
    d, c = dev - dev_c, cam - cam_c
    spread = max(np.abs(c).max(), np.abs(d).max())
    if spread <= 1e-12 * max(1.0, np.abs(arr).max()):
        if np.allclose(dev, cam):
            return ExtrinsicOffset(0.0, 0.0, 0.0)
        raise DegenerateConfiguration("all correspondence points coincide")
    num = float(np.sum(c[:, 0] * d[:, 1] - c[:, 1] * d[:, 0]))
    den = float(np.sum(c[:, 0] * d[:, 0] + c[:, 1] * d[:, 1]))
    if num == 0.0 and den == 0.0:
        raise DegenerateConfiguration("rotation is undetermined")
    beta = math.atan2(num, den)
    cb, sb = math.cos(beta), math.sin(beta)
    tx = dev_c[0] - (cb * cam_c[0] - sb * cam_c[1])
    ty = dev_c[1] - (sb * cam_c[0] + cb * cam_c[1])
    return ExtrinsicOffset(float(tx), float(ty), beta)


def _qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def apply_extrinsic(offset: ExtrinsicOffset, pose: PosePayload) -> PosePayload:
    """Compose the planar offset with ``pose``: rotate by beta about z, then translate in x/y."""
    c, s = math.cos(offset.beta), math.sin(offset.beta)
    x, y, z = pose.position
    position = (c * x - s * y + offset.delta_x, s * x + c * y + offset.delta_y, z)
    half = offset.beta / 2
    q = _qmul((math.cos(half), 0.0, 0.0, math.sin(half)), pose.orientation)
    norm = math.sqrt(sum(v * v for v in q))
    return PosePayload(position, tuple(v / norm for v in q))


def load_pairs(path: str | Path) -> list:
    """Correspondences from JSON: ``{"pairs": [{"device": [x, y], "camera": [x, y]}, ...]}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    rows = data["pairs"] if isinstance(data, dict) else data
    out = []
    for row in rows:
        if isinstance(row, dict):
            out.append((tuple(row["device"]), tuple(row["camera"])))
        else:
            out.append((tuple(row[0]), tuple(row[1])))
    return out


def load_camera(path: str | Path) -> CameraModel:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return CameraModel.from_dict(data.get("camera", data))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="calib", description="Pass-through camera calibration helpers.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    solve = sub.add_parser("solve", help="solve the camera-to-device offset from correspondences")
    solve.add_argument("--input", required=True, help="JSON file with device/camera point pairs")

    scale = sub.add_parser("scale", help="rendering plane scale for a camera model")
    scale.add_argument("--camera", required=True, help="JSON camera model")
    scale.add_argument("--distance", type=float, required=True, help="rendering distance in meters")
    scale.add_argument("--resolution", default="1280x480")

    args = parser.parse_args(argv)
    try:
        if args.cmd == "solve":
            offset = solve_extrinsic(load_pairs(args.input))
            out = {**asdict(offset), "beta_deg": math.degrees(offset.beta)}
        else:
            r_x, r_y = (int(v) for v in args.resolution.lower().split("x"))
            out = asdict(plane_scale(load_camera(args.camera), args.distance, (r_x, r_y)))
    except (CalibError, OSError, KeyError, ValueError) as exc:
        print(f"calib: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(out, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
