"""Synthetic desk-scale dynamic scenes and an idealized event camera.

A SceneScript describes a textured background plane plus sprites following
piecewise-linear trajectories, viewed by a pinhole camera that may translate.
The script renders to a dense intensity function which drives both frame
extraction (with optional motion-blur synthesis) and event generation by
log-intensity threshold crossing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .types import (
    CameraModel,
    Frame,
    FrameSequence,
    EventStream,
    ValidationError,
    luminance,
    safe_log,
)

US = 1_000_000  # microseconds per second


@dataclass
class Sprite:
    texture: dict  # {"kind": "solid"|"checker", "color": [...], ...}
    size: float  # side length in pixels
    trajectory: list  # [(t_us, u, v)] piecewise-linear center track, pixel coords

    def position(self, t_us: int) -> tuple[float, float]:
        knots = self.trajectory
        ts = np.array([k[0] for k in knots], dtype=np.float64)
        us = np.array([k[1] for k in knots], dtype=np.float64)
        vs = np.array([k[2] for k in knots], dtype=np.float64)
        t = float(np.clip(t_us, ts[0], ts[-1]))
        return float(np.interp(t, ts, us)), float(np.interp(t, ts, vs))


@dataclass
class SceneScript:
    width: int
    height: int
    duration_us: int
    background: dict = field(default_factory=lambda: {"kind": "checker", "cell": 16})
    sprites: list[Sprite] = field(default_factory=list)
    camera_track: list = field(default_factory=list)  # [(t_us, tx, ty)] world units
    depth: float = 5.0  # scene plane depth in camera units
    seed: int = 0

    def __post_init__(self):
        if self.duration_us <= 0:
            raise ValidationError("script duration must be positive")
        for s in self.sprites:
            ts = [k[0] for k in s.trajectory]
            if not ts or ts[0] < 0 or ts[-1] > self.duration_us:
                raise ValidationError("sprite trajectory must lie within [0, duration]")

    @staticmethod
    def from_json(path) -> "SceneScript":
        with open(path) as fh:
            d = json.load(fh)
        sprites = [Sprite(s["texture"], s["size"], [tuple(k) for k in s["trajectory"]])
                   for s in d.get("sprites", [])]
        return SceneScript(
            width=d["width"], height=d["height"], duration_us=d["duration_us"],
            background=d.get("background", {"kind": "checker", "cell": 16}),
            sprites=sprites,
            camera_track=[tuple(k) for k in d.get("camera_track", [])],
            depth=d.get("depth", 5.0), seed=d.get("seed", 0),
        )


def _make_texture(spec: dict, h: int, w: int, seed: int) -> np.ndarray:
    kind = spec.get("kind", "solid")
    if kind == "solid":
        color = np.asarray(spec.get("color", [0.5, 0.5, 0.5]), dtype=np.float64)
        return np.broadcast_to(color, (h, w, 3)).copy()
    if kind == "checker":
        cell = int(spec.get("cell", 16))
        c0 = np.asarray(spec.get("color0", [0.25, 0.25, 0.3]), dtype=np.float64)
        c1 = np.asarray(spec.get("color1", [0.7, 0.7, 0.6]), dtype=np.float64)
        yy, xx = np.mgrid[0:h, 0:w]
        mask = ((yy // cell + xx // cell) % 2).astype(np.float64)[..., None]
        return c0 * (1 - mask) + c1 * mask
    if kind == "noise":
        rng = np.random.RandomState(seed)
        base = rng.uniform(0.2, 0.8, size=(h, w, 1))
        return np.repeat(base, 3, axis=2)
    if kind == "hgradient":
        lo = float(spec.get("lo", 0.2))
        hi = float(spec.get("hi", 0.8))
        ramp = np.linspace(lo, hi, w)[None, :, None]
        return np.broadcast_to(ramp, (h, w, 3)).copy()
    raise ValidationError(f"unknown texture kind {kind!r}")


def _interval_coverage(centers: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Per-cell overlap of [lo, hi] with unit pixel cells centered at `centers`."""
    return np.clip(np.minimum(centers + 0.5, hi) - np.maximum(centers - 0.5, lo), 0.0, 1.0)


class ScriptRenderer:
    """Renders a SceneScript to images, object masks, and camera poses."""

    def __init__(self, script: SceneScript):
        self.script = script
        h, w = script.height, script.width
        self.background = _make_texture(script.background, h, w, script.seed)
        self.sprite_colors = []
        for i, s in enumerate(script.sprites):
            tex = _make_texture(s.texture, 1, 1, script.seed + 1 + i)
            self.sprite_colors.append(tex[0, 0])
        self.fx = self.fy = float(w)
        self.cx, self.cy = w / 2.0, h / 2.0
        self._xs = np.arange(w, dtype=np.float64)
        self._ys = np.arange(h, dtype=np.float64)

    def camera_shift(self, t_us: int) -> tuple[float, float]:
        """Pixel shift of the scene plane induced by camera translation."""
        track = self.script.camera_track
        if not track:
            return 0.0, 0.0
        ts = np.array([k[0] for k in track], dtype=np.float64)
        tx = np.interp(float(np.clip(t_us, ts[0], ts[-1])), ts, [k[1] for k in track])
        ty = np.interp(float(np.clip(t_us, ts[0], ts[-1])), ts, [k[2] for k in track])
        return self.fx * tx / self.script.depth, self.fy * ty / self.script.depth

    def camera(self, t_us: int) -> CameraModel:
        track = self.script.camera_track
        T = np.zeros(3)
        if track:
            ts = np.array([k[0] for k in track], dtype=np.float64)
            t = float(np.clip(t_us, ts[0], ts[-1]))
            T[0] = np.interp(t, ts, [k[1] for k in track])
            T[1] = np.interp(t, ts, [k[2] for k in track])
        return CameraModel(self.fx, self.fy, self.cx, self.cy, np.eye(3), T)

    def _sprite_coverage(self, sprite: Sprite, idx: int, t_us: int,
                         dx: float, dy: float) -> np.ndarray:
        u, v = sprite.position(t_us)
        u, v = u + dx, v + dy
        half = sprite.size / 2.0
        cov_x = _interval_coverage(self._xs, u - half, u + half)
        cov_y = _interval_coverage(self._ys, v - half, v + half)
        return cov_y[:, None] * cov_x[None, :]

    def render(self, t_us: int) -> np.ndarray:
        """Intensity image H x W x 3 at time t."""
        dx, dy = self.camera_shift(t_us)
        if dx or dy:
            img = self._shifted_background(dx, dy)
        else:
            img = self.background.copy()
        for i, s in enumerate(self.script.sprites):
            cov = self._sprite_coverage(s, i, t_us, dx, dy)[..., None]
            img = img * (1 - cov) + self.sprite_colors[i] * cov
        return img

    def _shifted_background(self, dx: float, dy: float) -> np.ndarray:
        # bilinear shift with edge clamping
        h, w = self.script.height, self.script.width
        xs = np.clip(self._xs - dx, 0, w - 1)
        ys = np.clip(self._ys - dy, 0, h - 1)
        x0 = np.floor(xs).astype(int)
        y0 = np.floor(ys).astype(int)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = (xs - x0)[None, :, None]
        fy = (ys - y0)[:, None, None]
        bg = self.background
        top = bg[y0][:, x0] * (1 - fx) + bg[y0][:, x1] * fx
        bot = bg[y1][:, x0] * (1 - fx) + bg[y1][:, x1] * fx
        return top * (1 - fy) + bot * fy

    def object_mask(self, t_us: int, threshold: float = 0.5) -> np.ndarray:
        """Ground-truth label map: 0 background, k for sprite k (1-based)."""
        dx, dy = self.camera_shift(t_us)
        mask = np.zeros((self.script.height, self.script.width), dtype=np.int32)
        for i, s in enumerate(self.script.sprites):
            cov = self._sprite_coverage(s, i, t_us, dx, dy)
            mask[cov > threshold] = i + 1
        return mask

    def render_frames(self, fps: float) -> FrameSequence:
        if fps <= 0:
            raise ValidationError("frame rate must be positive")
        n = int(np.floor(self.script.duration_us * fps / US)) + 1
        frames = []
        for k in range(n):
            t = int(round(k * US / fps))
            frames.append(Frame(self.render(t), t, self.camera(t)))
        return FrameSequence(frames, self.script.width, self.script.height)


def synthesize_blur(frames: FrameSequence, window: int) -> FrameSequence:
    """Average `window` consecutive sub-frames around each frame's timestamp.

    The window is shifted inward at sequence boundaries so every output frame
    is still the mean of exactly `window` sub-frames.
    """
    if window < 1:
        raise ValidationError("blur window must be >= 1")
    n = len(frames)
    if window > n:
        raise ValidationError(f"blur window {window} exceeds available {n} sub-frames")
    if window == 1:
        return frames
    images = np.stack([f.image for f in frames.frames])
    out = []
    for i, f in enumerate(frames.frames):
        start = min(max(i - (window - 1) // 2, 0), n - window)
        mean = images[start:start + window].mean(axis=0)
        out.append(Frame(mean, f.timestamp, f.camera))
    return FrameSequence(out, frames.width, frames.height)


def subsample_frames(frames: FrameSequence, fps: float, subfps: float) -> FrameSequence:
    """Keep every (subfps/fps)-th frame of a dense sub-frame sequence."""
    step = subfps / fps
    if step < 1 or abs(step - round(step)) > 1e-9:
        raise ValidationError("subfps must be an integer multiple of fps")
    step = int(round(step))
    kept = frames.frames[::step]
    return FrameSequence(list(kept), frames.width, frames.height)


def simulate_events(
    script: SceneScript,
    contrast: float,
    refractory_us: int = 0,
    subfps: float = 400.0,
    jitter_std: float = 0.0,
    seed: int = 0,
) -> EventStream:
    """Idealized event camera: per-pixel log-intensity threshold crossing.

    Each time |log I - log I_ref| reaches a multiple of the per-pixel
    contrast threshold, one event of the change's sign is emitted and the
    reference steps by that threshold. Timestamps are linearly interpolated
    inside each dense sample interval. Events closer than `refractory_us`
    at the same pixel are dropped (their reference step is kept, so dropped
    events lose their contribution).
    """
    if contrast <= 0:
        raise ValidationError(f"contrast threshold must be > 0, got {contrast}")
    if not script.sprites and not script.camera_track and script.duration_us <= 0:
        raise ValidationError("empty script")
    renderer = ScriptRenderer(script)
    n_steps = int(np.floor(script.duration_us * subfps / US))
    if n_steps < 1:
        raise ValidationError("empty script: no event samples within duration")

    h, w = script.height, script.width
    if jitter_std > 0:
        rng = np.random.RandomState(seed)
        c_px = np.maximum(contrast + rng.normal(0, jitter_std, size=(h, w)),
                          0.01 * contrast)
    else:
        c_px = np.full((h, w), contrast)

    ref = safe_log(luminance(renderer.render(0)))
    t_prev = 0
    chunks = []
    for k in range(1, n_steps + 1):
        t_k = int(round(k * US / subfps))
        cur = safe_log(luminance(renderer.render(t_k)))
        delta = cur - ref
        n_cross = np.floor(np.abs(delta) / c_px).astype(np.int64)
        ys, xs = np.nonzero(n_cross)
        if ys.size:
            sgn = np.sign(delta[ys, xs]).astype(np.int64)
            counts = n_cross[ys, xs]
            reps = np.repeat(np.arange(ys.size), counts)
            j = np.concatenate([np.arange(1, c + 1) for c in counts])
            frac = j * c_px[ys, xs][reps] / np.abs(delta[ys, xs])[reps]
            ts = t_prev + np.round(frac * (t_k - t_prev)).astype(np.int64)
            chunk = np.stack([ts, xs[reps], ys[reps], sgn[reps]], axis=1)
            chunks.append(chunk)
            ref[ys, xs] += sgn * counts * c_px[ys, xs]
        t_prev = t_k

    if chunks:
        events = np.concatenate(chunks, axis=0)
    else:
        events = np.zeros((0, 4), dtype=np.int64)

    # canonical order: (t, y, x, p)
    if events.size:
        order = np.lexsort((events[:, 3], events[:, 1], events[:, 2], events[:, 0]))
        events = events[order]

    if refractory_us > 0 and events.size:
        events = _apply_refractory(events, refractory_us)

    return EventStream(events, w, h, contrast)


def _apply_refractory(events: np.ndarray, refractory_us: int) -> np.ndarray:
    keep = np.ones(events.shape[0], dtype=bool)
    last = {}
    for i, (t, x, y, _p) in enumerate(events):
        key = (int(x), int(y))
        lt = last.get(key)
        if lt is not None and t - lt < refractory_us:
            keep[i] = False
        else:
            last[key] = int(t)
    return events[keep]
