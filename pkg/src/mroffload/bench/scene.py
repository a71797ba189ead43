"""Synthetic side-by-side stereo scene: one coloured disc moving over a flat background."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import cv2
import numpy as np

from ..wire import PosePayload


class EmptyMask(ValueError):
    pass


class EmptyBlob(ValueError):
    pass


@dataclass(frozen=True)
class CircularTrajectory:
    """Constant-speed circle in eye-local pixels."""

    center: tuple[float, float] = (320.0, 240.0)
    radius: float = 120.0
    speed: float = 120.0  # px/s along the path
    phase: float = 0.0

    def position(self, t_s: float) -> tuple[float, float]:
        a = self.phase + self.speed / self.radius * t_s
        return (self.center[0] + self.radius * math.cos(a), self.center[1] + self.radius * math.sin(a))

    def heading(self, t_s: float) -> float:
        return self.phase + self.speed / self.radius * t_s + math.pi / 2

    def extent(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return (cx - self.radius, cy - self.radius, cx + self.radius, cy + self.radius)


@dataclass(frozen=True)
class LinearTrajectory:
    """Back-and-forth motion along a segment at constant speed (a triangle wave)."""

    start: tuple[float, float] = (140.0, 240.0)
    end: tuple[float, float] = (500.0, 240.0)
    speed: float = 120.0

    def position(self, t_s: float) -> tuple[float, float]:
        length = math.dist(self.start, self.end)
        travelled = (self.speed * t_s) % (2 * length)
        u = travelled / length if travelled <= length else 2 - travelled / length
        return (
            self.start[0] + (self.end[0] - self.start[0]) * u,
            self.start[1] + (self.end[1] - self.start[1]) * u,
        )

    def heading(self, t_s: float) -> float:
        return math.atan2(self.end[1] - self.start[1], self.end[0] - self.start[0])

    def extent(self) -> tuple[float, float, float, float]:
        xs = (self.start[0], self.end[0])
        ys = (self.start[1], self.end[1])
        return (min(xs), min(ys), max(xs), max(ys))


@dataclass(frozen=True)
class SyntheticScene:
    """Two identical 640-wide eyes side by side, each showing the same disc.

    The disc is rasterised on column pairs (both pixels of every even/odd pair
    share a value), so a 2:1 horizontal area downscale followed by a nearest
    upscale reproduces the ground-truth mask exactly.
    """

    width: int = 1280
    height: int = 480
    fps: float = 60.0
    blob_color: tuple[int, int, int] = (220, 160, 120)
    background: tuple[int, int, int] = (0, 80, 200)
    blob_radius: float = 40.5
    trajectory: CircularTrajectory | LinearTrajectory = field(default_factory=CircularTrajectory)
    stereo: bool = True

    def __post_init__(self):
        if self.width % 2 or (self.stereo and self.width % 4):
            raise ValueError("width must split into even-width eyes")
        if self.blob_color == self.background:
            raise ValueError("blob and background colours must differ")
        x0, y0, x1, y1 = self.trajectory.extent()
        r = self.blob_radius + 1
        if x0 - r < 0 or y0 - r < 0 or x1 + r > self.eye_width or y1 + r > self.height:
            raise ValueError("trajectory takes the blob outside the eye")

    @property
    def eye_width(self) -> int:
        return self.width // 2 if self.stereo else self.width

    @property
    def period_us(self) -> float:
        return 1e6 / self.fps

    @property
    def blob_speed(self) -> float:
        return self.trajectory.speed

    def capture_time_us(self, index: int) -> float:
        return index * 1e6 / self.fps

    def blob_center(self, t_us: float) -> tuple[float, float]:
        return self.trajectory.position(t_us / 1e6)

    def _eye_support(self, t_us: float) -> tuple[int, int, np.ndarray]:
        """(x0, y0, bool patch) of the disc inside one eye."""
        cx, cy = self.blob_center(t_us)
        r = self.blob_radius
        p0 = max(0, int(math.floor((cx - r - 1) / 2)))
        p1 = min(self.eye_width // 2, int(math.ceil((cx + r + 1) / 2)) + 1)
        y0 = max(0, int(math.floor(cy - r - 1)))
        y1 = min(self.height, int(math.ceil(cy + r + 1)) + 1)
        pair_x = 2.0 * np.arange(p0, p1) + 1.0
        row_y = np.arange(y0, y1) + 0.5
        inside = (pair_x[None, :] - cx) ** 2 + (row_y[:, None] - cy) ** 2 <= r * r
        return 2 * p0, y0, np.repeat(inside, 2, axis=1)

    def _eyes(self):
        return (0, self.eye_width) if self.stereo else (0,)

    def ground_truth(self, t_us: float) -> np.ndarray:
        mask = np.zeros((self.height, self.width), dtype=np.uint8)
        x0, y0, patch = self._eye_support(t_us)
        h, w = patch.shape
        for off in self._eyes():
            mask[y0 : y0 + h, off + x0 : off + x0 + w][patch] = 255
        return mask

    def pose(self, t_us: float) -> PosePayload:
        """Device pose carrying the trajectory: position in metres at 1 mm/px, yaw = heading."""
        cx, cy = self.blob_center(t_us)
        half = self.trajectory.heading(t_us / 1e6) / 2
        return PosePayload((cx / 1000.0, cy / 1000.0, 0.0), (math.cos(half), 0.0, 0.0, math.sin(half)))


def generate_frame(scene: SyntheticScene, t_us: float) -> tuple[np.ndarray, np.ndarray, PosePayload]:
    """(RGB frame, ground-truth mask, pose) at time ``t_us``; deterministic."""
    frame = _background(scene.height, scene.width, scene.background).copy()
    mask = np.zeros((scene.height, scene.width), dtype=np.uint8)
    x0, y0, patch = scene._eye_support(t_us)
    h, w = patch.shape
    for off in scene._eyes():
        frame[y0 : y0 + h, off + x0 : off + x0 + w][patch] = scene.blob_color
        mask[y0 : y0 + h, off + x0 : off + x0 + w][patch] = 255
    return frame, mask, scene.pose(t_us)


@lru_cache(maxsize=8)
def _background(height: int, width: int, color: tuple[int, int, int]) -> np.ndarray:
    frame = np.empty((height, width, 3), dtype=np.uint8)
    frame[:] = color
    frame.flags.writeable = False
    return frame


def _centroid(binary: np.ndarray) -> tuple[float, float] | None:
    # moments over the bounding box only; offsets added back afterwards
    x, y, w, h = cv2.boundingRect(binary)
    if w == 0 or h == 0:
        return None
    m = cv2.moments(binary[y : y + h, x : x + w], binaryImage=True)
    if m["m00"] == 0:
        return None
    return (x + m["m10"] / m["m00"], y + m["m01"] / m["m00"])


def blob_centroid(color_frame: np.ndarray, blob_color=SyntheticScene.blob_color) -> tuple[float, float]:
    color = np.array(blob_color, dtype=np.uint8)
    hits = cv2.inRange(np.ascontiguousarray(color_frame), color, color)
    c = _centroid(hits)
    if c is None:
        raise EmptyBlob("no pixel has the blob colour")
    return c


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask[..., 0]
    c = _centroid(np.ascontiguousarray(mask))
    if c is None:
        raise EmptyMask("mask has no foreground")
    return c


def misalignment_px(color_frame: np.ndarray, mask: np.ndarray, blob_color=SyntheticScene.blob_color) -> float:
    """Distance between the blob-colour centroid of ``color_frame`` and the mask's centroid."""
    if color_frame.shape[:2] != np.asarray(mask).shape[:2]:
        raise ValueError(f"frame {color_frame.shape[:2]} and mask {np.asarray(mask).shape[:2]} differ in size")
    cm = mask_centroid(mask)
    cb = blob_centroid(color_frame, blob_color)
    return math.hypot(cb[0] - cm[0], cb[1] - cm[1])


def composite(color_frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep the masked pixels of the colour frame, black elsewhere."""
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask[..., 0]
    return cv2.bitwise_and(color_frame, color_frame, mask=np.ascontiguousarray(mask))
