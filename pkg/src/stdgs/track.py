"""Object tracking through the event stream: constant-velocity Kalman filter
plus normalized cross-correlation template matching on event-count images.

The filter API keeps the predict/update split of an extended Kalman filter so
nonlinear measurement models can slot in, but the default motion and
measurement models are linear.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .types import EventStream, ValidationError
from .features import voxelize_events, EventVoxelGrid
from .dataio import atomic_write_json

logger = logging.getLogger(__name__)

US = 1_000_000


@dataclass
class TrackState:
    x: np.ndarray  # (u, v, du, dv) pixels / pixels-per-second
    P: np.ndarray  # 4x4 covariance
    t: int  # microseconds

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(4)
        self.P = np.asarray(self.P, dtype=np.float64).reshape(4, 4)

    @property
    def position(self) -> np.ndarray:
        return self.x[:2]


@dataclass
class Template:
    counts: np.ndarray  # patch event-count image
    correlation: np.ndarray  # B x B patch correlation matrix
    size: tuple  # (h, w)


@dataclass
class Trajectory:
    object_id: int
    step_us: int
    points: list = field(default_factory=list)  # (t_us, u, v, P)

    def times(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=np.int64)

    def positions(self) -> np.ndarray:
        return np.array([[p[1], p[2]] for p in self.points], dtype=np.float64)

    def anchor(self, t_us: float) -> np.ndarray:
        """Piecewise-linear (u, v) interpolation, clamped to the span."""
        ts = self.times().astype(np.float64)
        pos = self.positions()
        t = float(np.clip(t_us, ts[0], ts[-1]))
        return np.array([np.interp(t, ts, pos[:, 0]), np.interp(t, ts, pos[:, 1])])

    def span(self) -> tuple[int, int]:
        return int(self.points[0][0]), int(self.points[-1][0])


def process_noise(dt: float, q: float) -> np.ndarray:
    """White-acceleration noise for a constant-velocity model."""
    q2 = q * q
    dt2, dt3, dt4 = dt * dt, dt ** 3, dt ** 4
    Q1 = np.array([[dt4 / 4, dt3 / 2], [dt3 / 2, dt2]]) * q2
    Q = np.zeros((4, 4))
    Q[0, 0], Q[0, 2], Q[2, 0], Q[2, 2] = Q1[0, 0], Q1[0, 1], Q1[1, 0], Q1[1, 1]
    Q[1, 1], Q[1, 3], Q[3, 1], Q[3, 3] = Q1[0, 0], Q1[0, 1], Q1[1, 0], Q1[1, 1]
    return Q


def ekf_predict(state: TrackState, dt: float, q: float) -> TrackState:
    """Constant-velocity propagation over dt seconds."""
    if dt <= 0:
        raise ValidationError("dt must be positive")
    F = np.array([
        [1, 0, dt, 0],
        [0, 1, 0, dt],
        [0, 0, 1, 0],
        [0, 0, 0, 1],
    ], dtype=np.float64)
    x = F @ state.x
    P = F @ state.P @ F.T + process_noise(dt, q)
    P = 0.5 * (P + P.T)
    return TrackState(x, P, state.t + int(round(dt * US)))


def ekf_update(state: TrackState, z: np.ndarray, r: float) -> TrackState:
    """Position measurement update in Joseph form."""
    if r <= 0:
        raise ValidationError("measurement noise must be positive")
    z = np.asarray(z, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(z)):
        raise ValidationError("non-finite measurement")
    H = np.array([[1, 0, 0, 0], [0, 1, 0, 0]], dtype=np.float64)
    R = np.eye(2) * r * r
    S = H @ state.P @ H.T + R
    K = state.P @ H.T @ np.linalg.inv(S)
    innovation = z - H @ state.x
    x = state.x + K @ innovation
    IKH = np.eye(4) - K @ H
    P = IKH @ state.P @ IKH.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    return TrackState(x, P, state.t)


def extract_template(grid: EventVoxelGrid, bbox: tuple) -> Template:
    """Template = event-count image + correlation matrix of a bbox region."""
    y0, x0, y1, x1 = bbox
    if y1 <= y0 or x1 <= x0:
        raise ValidationError("empty template region")
    counts = grid.count_image()[y0:y1, x0:x1]
    slices = grid.grid[:, y0:y1, x0:x1].reshape(grid.B, -1)
    norms = np.linalg.norm(slices, axis=1)
    m = slices @ slices.T
    denom = norms[:, None] * norms[None, :]
    corr = np.where(denom > 0, m / np.where(denom > 0, denom, 1.0), 0.0)
    return Template(counts=counts, correlation=corr, size=counts.shape)


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation of two equal-shape patches."""
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float((a * b).sum() / (na * nb))


def match_template(template: Template, grid: EventVoxelGrid,
                   search_center: tuple, radius: int):
    """Best integer offset of the template inside a search window.

    Returns ((u, v), score) for the template's top-left corner placed so the
    patch is centered at the returned position, or (None, 0.0) when the
    search window carries no events. Ties break by smallest offset norm,
    then row-major order.
    """
    th, tw = template.size
    counts = grid.count_image()
    H, W = counts.shape
    cu, cv = search_center
    bx = int(round(cu - (tw - 1) / 2))
    by = int(round(cv - (th - 1) / 2))
    best = None  # key = (-score, offset_norm2, dv, du)
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            y0 = by + dv
            x0 = bx + du
            if y0 < 0 or x0 < 0 or y0 + th > H or x0 + tw > W:
                continue
            window = counts[y0:y0 + th, x0:x0 + tw]
            if not window.any():
                continue
            score = _ncc(template.counts, window)
            key = (-score, du * du + dv * dv, dv, du)
            if best is None or key < best[0]:
                # measurement = absolute center of the placed patch, so the
                # filter sees where the pattern is, not its own prediction
                # (pixel centers sit on integer coordinates)
                best = (key, (x0 + (tw - 1) / 2.0, y0 + (th - 1) / 2.0, score))
    if best is None:
        return None, 0.0
    u, v, score = best[1]
    return (u, v), score


def refine_subpixel(template: Template, grid: EventVoxelGrid,
                    pos: tuple) -> tuple:
    """Parabolic refinement of an integer NCC peak, one axis at a time.

    Fits a quadratic through the scores at the peak and its two axis
    neighbors; degenerate (non-concave) fits leave the coordinate alone.
    The correction is clamped to half a pixel.
    """
    th, tw = template.size
    counts = grid.count_image()
    H, W = counts.shape
    y0 = int(round(pos[1] - (th - 1) / 2))
    x0 = int(round(pos[0] - (tw - 1) / 2))

    def score_at(yy, xx):
        if yy < 0 or xx < 0 or yy + th > H or xx + tw > W:
            return None
        return _ncc(template.counts, counts[yy:yy + th, xx:xx + tw])

    s0 = score_at(y0, x0)
    if s0 is None:
        return pos
    u, v = float(pos[0]), float(pos[1])
    sl, sr = score_at(y0, x0 - 1), score_at(y0, x0 + 1)
    if sl is not None and sr is not None:
        denom = sl - 2.0 * s0 + sr
        if denom < -1e-12:
            u += float(np.clip(0.5 * (sl - sr) / denom, -0.5, 0.5))
    st, sb = score_at(y0 - 1, x0), score_at(y0 + 1, x0)
    if st is not None and sb is not None:
        denom = st - 2.0 * s0 + sb
        if denom < -1e-12:
            v += float(np.clip(0.5 * (st - sb) / denom, -0.5, 0.5))
    return (u, v)


@dataclass
class TrackConfig:
    step_us: int = 10_000
    q: float = 50.0  # px/s^2
    r: float = 1.0  # px
    lost_limit: int = 5
    min_radius: int = 4
    max_radius: int = 32
    bins: int = 8
    init_pos_std: float = 4.0
    init_vel_std: float = 50.0
    # re-extract the template after each update; helps deformable objects but
    # consecutive event windows correlate strongest at zero shift, so refresh
    # lags sub-pixel per-step motion and drifts on rigid targets
    refresh: bool = False


def track_object(stream: EventStream, decomposition, object_id: int,
                 config: TrackConfig | None = None) -> Trajectory:
    """Track one object through the event stream at a fixed step.

    Initializes from the object's first-frame centroid; per step the filter
    predicts, a template is matched around the prediction, and a successful
    match updates the filter. The template is optionally re-extracted after
    each successful update (see TrackConfig.refresh); after `lost_limit`
    consecutive misses the trajectory terminates.
    """
    cfg = config or TrackConfig()
    first = None
    for i in range(len(decomposition.masks)):
        c = decomposition.object_centroid(i, object_id)
        if c is not None:
            first = (i, c)
            break
    if first is None:
        raise ValidationError(f"object id {object_id} absent from decomposition")
    if first[0] != 0:
        logger.warning("object %d first appears at frame %d", object_id, first[0])

    bbox = decomposition.object_bboxes(first[0]).get(object_id)
    # pad so the event strips at the object boundary land inside the patch
    pad = 3
    bbox = (max(bbox[0] - pad, 0), max(bbox[1] - pad, 0),
            min(bbox[2] + pad, stream.height), min(bbox[3] + pad, stream.width))
    t0 = int(stream.t.min()) if len(stream) else 0
    t_end = int(stream.t.max()) if len(stream) else 0

    state = TrackState(
        x=[first[1][0], first[1][1], 0.0, 0.0],
        P=np.diag([cfg.init_pos_std ** 2, cfg.init_pos_std ** 2,
                   cfg.init_vel_std ** 2, cfg.init_vel_std ** 2]),
        t=t0,
    )
    # widen the initial window until the template actually contains events
    half = cfg.step_us // 2
    hi = t0 + cfg.step_us
    template = None
    while hi <= t_end:
        grid0 = voxelize_events(stream, (t0, hi), cfg.bins)
        template = extract_template(grid0, bbox)
        if template.counts.any():
            break
        hi += cfg.step_us
    if template is None or not template.counts.any():
        raise ValidationError(
            f"object id {object_id} has no events to build a template from")

    traj = Trajectory(object_id=object_id, step_us=cfg.step_us)
    traj.points.append((t0, state.x[0], state.x[1], state.P.copy()))

    # the template content sits at (patch center + anchor); the anchor keeps
    # the sub-pixel residual that a rounded re-extraction would otherwise
    # discard on every refresh, which accumulates into drift
    th, tw = template.size
    anchor = np.array([first[1][0] - (bbox[1] + (tw - 1) / 2.0),
                       first[1][1] - (bbox[0] + (th - 1) / 2.0)])

    lost = 0
    t = t0
    dt = cfg.step_us / US
    while t + cfg.step_us <= t_end:
        t_meas = t + cfg.step_us
        # event window centered on the measurement time so the matched
        # position is not biased a half step into the past
        grid = voxelize_events(stream, (t_meas - half, min(t_meas + half, t_end)),
                               cfg.bins)
        state = ekf_predict(state, dt, cfg.q)
        sigma = np.sqrt(max(state.P[0, 0], state.P[1, 1]))
        radius = int(np.clip(np.ceil(3 * sigma), cfg.min_radius, cfg.max_radius))
        raw, score = match_template(
            template, grid, (state.x[0] - anchor[0], state.x[1] - anchor[1]),
            radius)
        if raw is not None:
            raw = refine_subpixel(template, grid, raw)
            pos = (raw[0] + anchor[0], raw[1] + anchor[1])
            state = ekf_update(state, pos, cfg.r)
            lost = 0
            if cfg.refresh:
                # refresh the template where the match actually was, so the
                # template content stays locked to the reported position
                th, tw = template.size
                y0 = int(np.clip(round(pos[1] - (th - 1) / 2), 0, stream.height - th))
                x0 = int(np.clip(round(pos[0] - (tw - 1) / 2), 0, stream.width - tw))
                refreshed = extract_template(grid, (y0, x0, y0 + th, x0 + tw))
                if refreshed.counts.any():  # templates must stay non-empty
                    template = refreshed
                    anchor = np.array([pos[0] - (x0 + (tw - 1) / 2.0),
                                       pos[1] - (y0 + (th - 1) / 2.0)])
        else:
            lost += 1
            if lost > cfg.lost_limit:
                break
        t += cfg.step_us
        traj.points.append((t, state.x[0], state.x[1], state.P.copy()))
    return traj


def write_trajectory(path, traj: Trajectory):
    obj = {
        "object_id": traj.object_id,
        "step_us": traj.step_us,
        "points": [
            {"t_us": int(t), "u": float(u), "v": float(v),
             "P": [float(x) for x in np.asarray(P).reshape(16)]}
            for t, u, v, P in traj.points
        ],
    }
    atomic_write_json(path, obj)


def load_trajectory(path) -> Trajectory:
    with open(path) as fh:
        obj = json.load(fh)
    traj = Trajectory(object_id=int(obj["object_id"]), step_us=int(obj["step_us"]))
    for p in obj["points"]:
        traj.points.append((int(p["t_us"]), float(p["u"]), float(p["v"]),
                            np.array(p["P"], dtype=np.float64).reshape(4, 4)))
    return traj
