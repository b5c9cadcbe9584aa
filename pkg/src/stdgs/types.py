"""Core domain types shared across the pipeline.

Timestamps are integer microseconds everywhere; images are float arrays in
[0, 1]; cameras use a world-to-camera convention (x_cam = R @ x_world + T).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when input data violates a documented invariant."""


@dataclass(frozen=True)
class Event:
    """Single polarity event."""

    t: int  # microseconds
    x: int
    y: int
    p: int  # +1 or -1

    def __post_init__(self):
        if self.t < 0:
            raise ValidationError(f"event timestamp must be non-negative, got {self.t}")
        if self.p not in (1, -1):
            raise ValidationError(f"event polarity must be +1 or -1, got {self.p}")


class EventStream:
    """Time-sorted polarity events with sensor geometry.

    Internally stored as a structured (N, 4) int64 array with columns
    (t, x, y, p) so that bulk operations stay vectorized.
    """

    def __init__(self, events: np.ndarray, width: int, height: int, contrast: float):
        events = np.asarray(events, dtype=np.int64).reshape(-1, 4)
        if contrast <= 0:
            raise ValidationError(f"contrast threshold must be > 0, got {contrast}")
        if width <= 0 or height <= 0:
            raise ValidationError("sensor dimensions must be positive")
        if events.size:
            t, x, y, p = events.T
            if np.any(np.diff(t) < 0):
                raise ValidationError("events must be sorted by non-decreasing t")
            if np.any((x < 0) | (x >= width) | (y < 0) | (y >= height)):
                bad = int(np.flatnonzero((x < 0) | (x >= width) | (y < 0) | (y >= height))[0])
                raise ValidationError(
                    f"event {bad} out of bounds: x={x[bad]} y={y[bad]} "
                    f"for sensor {width}x{height}"
                )
            if np.any((p != 1) & (p != -1)):
                raise ValidationError("event polarity must be +1 or -1")
        self.events = events
        self.width = int(width)
        self.height = int(height)
        self.contrast = float(contrast)

    def __len__(self):
        return self.events.shape[0]

    @property
    def t(self):
        return self.events[:, 0]

    @property
    def x(self):
        return self.events[:, 1]

    @property
    def y(self):
        return self.events[:, 2]

    @property
    def p(self):
        return self.events[:, 3]

    def window(self, t0: int, t1: int) -> "EventStream":
        """Events with t0 < t <= t1 (integration convention of the brightness map)."""
        m = (self.events[:, 0] > t0) & (self.events[:, 0] <= t1)
        return EventStream(self.events[m], self.width, self.height, self.contrast)

    @staticmethod
    def from_records(records, width, height, contrast) -> "EventStream":
        arr = np.array([(e.t, e.x, e.y, e.p) for e in records], dtype=np.int64).reshape(-1, 4)
        return EventStream(arr, width, height, contrast)


@dataclass
class CameraModel:
    """Pinhole camera with world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # 3x3 rotation
    T: np.ndarray  # 3-vector

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9):
            raise ValidationError("R must be orthonormal within 1e-9")
        if np.linalg.det(self.R) < 0:
            raise ValidationError("R must have det +1")

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (N, 3) -> pixel coords (N, 2) and camera depth (N,)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        cam = pts @ self.R.T + self.T
        z = cam[:, 2]
        u = self.fx * cam[:, 0] / z + self.cx
        v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def backproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coords (N, 2) at camera depth (N,) -> world points (N, 3)."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), (uv.shape[0],))
        xc = (uv[:, 0] - self.cx) / self.fx * depth
        yc = (uv[:, 1] - self.cy) / self.fy * depth
        cam = np.stack([xc, yc, depth], axis=1)
        return (cam - self.T) @ self.R


@dataclass
class Frame:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    timestamp: int  # microseconds
    camera: CameraModel


class FrameSequence:
    """Timestamped images with per-frame camera."""

    def __init__(self, frames: list[Frame], width: int, height: int):
        if not frames:
            raise ValidationError("empty sequence")
        for i, f in enumerate(frames):
            img = np.asarray(f.image, dtype=np.float64)
            if img.shape != (height, width, 3):
                raise ValidationError(
                    f"frame {i} has shape {img.shape}, expected ({height}, {width}, 3)"
                )
            f.image = img
        ts = [f.timestamp for f in frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError("frame timestamps must be strictly increasing")
        self.frames = frames
        self.width = int(width)
        self.height = int(height)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> Frame:
        return self.frames[i]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames], dtype=np.int64)

    def span(self) -> tuple[int, int]:
        return self.frames[0].timestamp, self.frames[-1].timestamp


def luminance(image: np.ndarray) -> np.ndarray:
    """Scalar intensity of an RGB image (plain channel mean)."""
    return np.asarray(image, dtype=np.float64).mean(axis=-1)


# Log-intensity floor shared by the simulator and event brightness integration.
INTENSITY_FLOOR = 1e-4


def safe_log(intensity: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(intensity, INTENSITY_FLOOR))
