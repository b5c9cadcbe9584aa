"""Event-derived reference signals: integrated brightness and normal flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import EventStream, Frame, ValidationError, luminance, safe_log
from .features import EventVoxelGrid

US = 1_000_000


@dataclass
class EventBrightnessMap:
    L: np.ndarray  # H x W intensity in [0, 1]
    reference_timestamp: int
    query_timestamp: int
    log_pre_clamp: np.ndarray  # log-intensity before exp/clamp, for oracles


@dataclass
class EventFlowField:
    F: np.ndarray  # H x W x 2 pixels/second (x, y components)
    valid: np.ndarray  # H x W bool


def event_brightness(frame: Frame, stream: EventStream, t_query: int) -> EventBrightnessMap:
    """Integrate event polarities on top of the nearest sharp reference frame.

    L(x, y) = clamp(exp(log max(I, floor) + C * sum of polarities in
    (t_ref, t_query]), 0, 1).
    """
    if frame.timestamp > t_query:
        raise ValidationError(
            f"no reference frame before query time {t_query} "
            f"(frame is at {frame.timestamp})"
        )
    logI = safe_log(luminance(frame.image))
    sub = stream.window(frame.timestamp, t_query)
    acc = np.zeros_like(logI)
    if len(sub):
        np.add.at(acc, (sub.y, sub.x), sub.p.astype(np.float64))
    log_new = logI + stream.contrast * acc
    L = np.clip(np.exp(log_new), 0.0, 1.0)
    return EventBrightnessMap(L, frame.timestamp, int(t_query), log_new)


def flow_from_timestamps(tmap: np.ndarray, valid: np.ndarray,
                         window_px: int = 2, min_events: int = 5) -> EventFlowField:
    """Normal flow via least-squares plane fit t ~ a*x + b*y + d.

    `tmap` holds per-pixel timestamps in seconds, `valid` marks pixels whose
    timestamp is meaningful. Flow is (a, b) / (a^2 + b^2) in pixels/second;
    pixels with fewer than `min_events` valid neighbors or a rank-deficient
    fit are marked invalid.
    """
    h, w = tmap.shape
    F = np.zeros((h, w, 2))
    out_valid = np.zeros((h, w), dtype=bool)
    ys, xs = np.nonzero(valid)
    for y, x in zip(ys, xs):
        y0, y1 = max(0, y - window_px), min(h, y + window_px + 1)
        x0, x1 = max(0, x - window_px), min(w, x + window_px + 1)
        sub_valid = valid[y0:y1, x0:x1]
        n = int(sub_valid.sum())
        if n < min_events:
            continue
        yy, xx = np.nonzero(sub_valid)
        A = np.stack([xx + x0 - x, yy + y0 - y, np.ones(n)], axis=1).astype(np.float64)
        b = tmap[y0:y1, x0:x1][sub_valid]
        if np.linalg.matrix_rank(A) < 3:
            continue
        coef, *_ = np.linalg.lstsq(A, b, rcond=None)
        a_, b_ = coef[0], coef[1]
        denom = a_ * a_ + b_ * b_
        if denom < 1e-18:
            continue
        F[y, x] = (a_ / denom, b_ / denom)
        out_valid[y, x] = True
    return EventFlowField(F, out_valid)


def event_flow(grid: EventVoxelGrid, window_px: int = 2,
               min_events: int = 5) -> EventFlowField:
    """Normal flow from a voxel grid.

    The per-pixel timestamp is the bin-center time of the latest active bin.
    """
    if grid.B < 3:
        raise ValidationError("flow estimation needs at least 3 temporal bins")
    active = np.abs(grid.grid) > 0
    any_active = active.any(axis=0)
    # index of last active bin per pixel
    last_bin = grid.B - 1 - np.argmax(active[::-1], axis=0)
    bin_dt = (grid.t1 - grid.t0) / grid.B / US
    tmap = (grid.t0 / US) + (last_bin + 0.5) * bin_dt
    tmap = np.where(any_active, tmap, 0.0)
    return flow_from_timestamps(tmap, any_active, window_px, min_events)
