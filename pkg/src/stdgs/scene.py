"""Gaussian scene representation: static 3D background Gaussians plus
per-object 4D Gaussians anchored on tracked trajectories, with the
event-consistency loss tying object Gaussians to event brightness and flow.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch

from .types import CameraModel, FrameSequence, EventStream, ValidationError
from .track import Trajectory, load_trajectory, write_trajectory
from .features import voxelize_events
from .event_priors import event_brightness, event_flow
from .dataio import atomic_write_json

logger = logging.getLogger(__name__)

US = 1_000_000


def inverse_sigmoid(x: float) -> float:
    return float(np.log(x / (1.0 - x)))


class GaussianSet:
    """Bag of 3D Gaussians with torch parameters (double precision)."""

    PARAM_CLASSES = ("mu", "quat", "log_scales", "opacity", "color")

    def __init__(self, mu, quat, log_scales, opacity, color):
        self.mu = _param(mu, (-1, 3))
        self.quat = _param(quat, (-1, 4))
        self.log_scales = _param(log_scales, (-1, 3))
        self.opacity = _param(opacity, (-1,))
        self.color = _param(color, (-1, 3))

    def __len__(self):
        return self.mu.shape[0]

    def parameters(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAM_CLASSES}

    def activated_opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity)

    def normalize_quaternions(self):
        with torch.no_grad():
            self.quat /= torch.linalg.norm(self.quat, dim=1, keepdim=True)

    @staticmethod
    def empty() -> "GaussianSet":
        z = np.zeros((0, 3))
        return GaussianSet(z, np.zeros((0, 4)), z, np.zeros(0), z)


class ObjectGaussians(GaussianSet):
    """4D Gaussians: temporal center/scale plus per-knot offsets."""

    PARAM_CLASSES = GaussianSet.PARAM_CLASSES + ("t_center", "t_log_scale", "knots", "depth")

    def __init__(self, mu, quat, log_scales, opacity, color,
                 t_center, t_log_scale, knots, depth, trajectory: Trajectory):
        super().__init__(mu, quat, log_scales, opacity, color)
        self.t_center = _param(t_center, (-1,))  # microseconds
        self.t_log_scale = _param(t_log_scale, (-1,))  # log seconds
        self.knots = _param(knots, (len(self), len(trajectory.points), 3))
        self.depth = _param(depth, ())
        self.trajectory = trajectory

    def temporal_weight(self, t_us: float) -> torch.Tensor:
        dt = (t_us - self.t_center) / US
        sigma = torch.exp(self.t_log_scale)
        return torch.exp(-(dt ** 2) / (2.0 * sigma ** 2))

    def knot_offset(self, t_us: float) -> torch.Tensor:
        """Linear interpolation of per-knot offsets at time t (clamped)."""
        ts = self.trajectory.times().astype(np.float64)
        t = float(np.clip(t_us, ts[0], ts[-1]))
        if len(ts) == 1:
            return self.knots[:, 0, :]
        k = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
        denom = ts[k + 1] - ts[k]
        w = (t - ts[k]) / denom if denom > 0 else 0.0
        return (1.0 - w) * self.knots[:, k, :] + w * self.knots[:, k + 1, :]


def _param(value, shape) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(value, dtype=np.float64)).reshape(shape).clone()
    t.requires_grad_(True)
    return t


def backproject_torch(uv: np.ndarray, depth: torch.Tensor, cam: CameraModel) -> torch.Tensor:
    """Differentiable (w.r.t. depth) back-projection of a pixel to world."""
    xc = (uv[0] - cam.cx) / cam.fx * depth
    yc = (uv[1] - cam.cy) / cam.fy * depth
    cam_pt = torch.stack([xc, yc, depth])
    R = torch.as_tensor(cam.R)
    T = torch.as_tensor(cam.T)
    return R.T @ (cam_pt - T)


@dataclass
class GaussianScene:
    background: GaussianSet
    objects: dict  # object id -> ObjectGaussians
    reference_camera: CameraModel

    def span(self) -> tuple[int, int]:
        los, his = [], []
        for obj in self.objects.values():
            lo, hi = obj.trajectory.span()
            los.append(lo)
            his.append(hi)
        if not los:
            return 0, 0
        return min(los), max(his)

    def parameters(self) -> dict:
        """Parameter class name -> list of tensors across all sets."""
        out = {name: [p] for name, p in self.background.parameters().items()}
        for oid in sorted(self.objects):
            for name, p in self.objects[oid].parameters().items():
                out.setdefault(name, []).append(p)
        return out

    def all_tensors(self) -> list:
        return [p for ps in self.parameters().values() for p in ps]

    def normalize_quaternions(self):
        self.background.normalize_quaternions()
        for obj in self.objects.values():
            obj.normalize_quaternions()

    def assert_finite(self):
        for name, ps in self.parameters().items():
            for p in ps:
                if not torch.isfinite(p).all():
                    raise FloatingPointError(f"non-finite values in parameter class {name}")


def deform(obj: ObjectGaussians, trajectory: Trajectory, t_us: float,
           camera: CameraModel) -> tuple[torch.Tensor, torch.Tensor]:
    """Positions and temporal opacity multipliers of object Gaussians at t.

    Position = back-projected trajectory anchor at t + per-Gaussian spatial
    offset + interpolated knot offset. Times outside the trajectory span are
    clamped with a warning.
    """
    if not trajectory.points:
        raise ValidationError("empty trajectory")
    lo, hi = trajectory.span()
    if t_us < lo or t_us > hi:
        logger.warning("query time %s outside trajectory span [%s, %s]; clamped",
                       t_us, lo, hi)
    anchor_uv = trajectory.anchor(t_us)
    anchor3d = backproject_torch(anchor_uv, obj.depth, camera)
    pos = anchor3d[None, :] + obj.mu + obj.knot_offset(t_us)
    return pos, obj.temporal_weight(t_us)


@dataclass
class SceneConfig:
    bg_depth: float = 5.0
    bg_stride: int = 8
    object_count: int = 96
    init_opacity: float = 0.5
    seed: int = 0


def estimate_object_depth(trajectory: Trajectory, frames: FrameSequence,
                          default: float) -> float:
    """Per-object depth from anchor reprojection across views.

    With a static (or near-static) camera the problem is degenerate and the
    default plane depth is returned.
    """
    Ts = np.stack([f.camera.T for f in frames.frames])
    if np.ptp(Ts, axis=0).max() < 1e-9:
        return default
    # translating camera: pick the depth whose back-projected anchor at the
    # first view reprojects closest to the tracked anchor in all later views,
    # assuming the object holds still between adjacent frames
    cands = np.linspace(0.3 * default, 2.0 * default, 64)
    best, best_err = default, np.inf
    for d in cands:
        err = 0.0
        for fa, fb in zip(frames.frames[:-1], frames.frames[1:]):
            ua = trajectory.anchor(fa.timestamp)
            world = fa.camera.backproject(ua[None, :], np.array([d]))
            uv, _ = fb.camera.project(world)
            ub = trajectory.anchor(fb.timestamp)
            err += float(((uv[0] - ub) ** 2).sum())
        if err < best_err:
            best, best_err = float(d), err
    return best


def init_scene(decomposition, frames: FrameSequence, trajectories: dict,
               config: SceneConfig | None = None) -> GaussianScene:
    """Seed background Gaussians on a stride grid and object Gaussians
    around trajectory back-projections. Deterministic given the seed."""
    cfg = config or SceneConfig()
    rng = np.random.RandomState(cfg.seed)
    cam = frames[0].camera
    frame0 = frames[0]
    bg_mask = decomposition.masks[0] == 0
    if not bg_mask.any():
        raise ValidationError("empty background mask")

    half = cfg.bg_stride // 2
    ys = np.arange(half, frames.height, cfg.bg_stride)
    xs = np.arange(half, frames.width, cfg.bg_stride)
    pts, cols = [], []
    for y in ys:
        for x in xs:
            if bg_mask[y, x]:
                pts.append((float(x), float(y)))
                cols.append(frame0.image[y, x])
    uv = np.array(pts)
    world = cam.backproject(uv, np.full(len(pts), cfg.bg_depth))
    pixel_world = cfg.bg_depth / cam.fx  # world size of one pixel at the plane
    scale0 = np.log(cfg.bg_stride * pixel_world * 0.5)
    n_bg = len(pts)
    background = GaussianSet(
        mu=world,
        quat=np.tile([1.0, 0, 0, 0], (n_bg, 1)),
        log_scales=np.full((n_bg, 3), scale0),
        opacity=np.full(n_bg, inverse_sigmoid(cfg.init_opacity)),
        color=np.array(cols),
    )

    objects = {}
    for oid, traj in sorted(trajectories.items()):
        if decomposition.num_objects and oid > decomposition.num_objects:
            raise ValidationError(f"trajectory for unknown object id {oid}")
        lo, hi = traj.span()
        depth = estimate_object_depth(traj, frames, cfg.bg_depth * 0.95)
        # spatial extent from the first frame where the object is visible
        radius_px = 4.0
        color = np.array([0.5, 0.5, 0.5])
        for i in range(len(decomposition.masks)):
            bb = decomposition.object_bboxes(i).get(oid)
            if bb:
                radius_px = max(2.0, 0.25 * ((bb[2] - bb[0]) + (bb[3] - bb[1])) / 2)
                m = decomposition.masks[i] == oid
                color = frames[i].image[m].mean(axis=0)
                break
        radius_world = radius_px * depth / cam.fx
        n = cfg.object_count
        t_centers = np.linspace(lo, hi, n)
        mu = rng.normal(0.0, radius_world, size=(n, 3))
        col = np.clip(color[None, :] + rng.normal(0, 0.02, size=(n, 3)), 0.0, 1.0)
        duration_s = max((hi - lo) / US, 1e-3)
        objects[oid] = ObjectGaussians(
            mu=mu,
            quat=np.tile([1.0, 0, 0, 0], (n, 1)),
            log_scales=np.full((n, 3), np.log(radius_world * 0.5)),
            opacity=np.full(n, inverse_sigmoid(cfg.init_opacity)),
            color=col,
            t_center=t_centers,
            t_log_scale=np.full(n, np.log(duration_s / 2.0)),
            knots=np.zeros((n, len(traj.points), 3)),
            depth=depth,
            trajectory=traj,
        )
    return GaussianScene(background=background, objects=objects, reference_camera=cam)


def consistency_loss(scene: GaussianScene, stream: EventStream,
                     frames: FrameSequence, t_samples, decomposition,
                     flow_window_us: int | None = None,
                     color_weight: float = 1.0, flow_weight: float = 1.0,
                     cache: dict | None = None,
                     ) -> tuple[float, torch.Tensor]:
    """Event-consistency loss for object Gaussians.

    Color term: L1 between the rendered object-layer color and the
    integrated event brightness over object-mask pixels. Flow term: L1
    between the projected Gaussian displacement over one tracking step and
    the event normal flow at the Gaussian's pixel. Returns the scalar value
    and the differentiable loss tensor.
    """
    from . import render as render_mod

    if not scene.objects:
        return 0.0, torch.zeros((), dtype=torch.float64)
    ts_frames = frames.timestamps
    step_us = min(obj.trajectory.step_us for obj in scene.objects.values())
    if flow_window_us is None:
        flow_window_us = 10 * step_us

    total = torch.zeros((), dtype=torch.float64)
    for t in t_samples:
        t = int(t)
        ref_idx = int(np.searchsorted(ts_frames, t, side="right")) - 1
        if ref_idx < 0:
            raise ValidationError(f"no reference frame before query time {t}")
        frame = frames[ref_idx]
        mask_idx = int(np.argmin(np.abs(ts_frames - t)))
        obj_mask = decomposition.masks[mask_idx] > 0

        if color_weight > 0 and obj_mask.any():
            if cache is not None and ("brightness", t) in cache:
                bmap = cache[("brightness", t)]
            else:
                bmap = event_brightness(frame, stream, t)
                if cache is not None:
                    cache[("brightness", t)] = bmap
            layer = render_mod.rasterize_objects(scene, frame.camera, t,
                                                 frames.width, frames.height)
            target = torch.as_tensor(bmap.L)[..., None].expand(-1, -1, 3)
            m = torch.as_tensor(obj_mask)
            total = total + color_weight * torch.abs(
                layer.color[m] - target[m]).sum()

        if flow_weight > 0:
            if cache is not None and ("flow", t) in cache:
                flow = cache[("flow", t)]
            else:
                t0f = max(int(stream.t.min()) if len(stream) else t,
                          t - flow_window_us)
                if t0f < t:
                    grid = voxelize_events(stream, (t0f, t), 32)
                    flow = event_flow(grid)
                else:
                    flow = None
                if cache is not None:
                    cache[("flow", t)] = flow
            valid_any = flow is not None and flow.valid.any()
            if not valid_any:
                logger.warning("no valid flow pixels at t=%d; flow term skipped", t)
            else:
                dt_s = step_us / US
                Fv = torch.as_tensor(flow.F)
                for oid in sorted(scene.objects):
                    obj = scene.objects[oid]
                    p0, _ = deform(obj, obj.trajectory, t, frame.camera)
                    p1, _ = deform(obj, obj.trajectory, t + step_us, frame.camera)
                    uv0 = render_mod.project_points(p0, frame.camera)
                    uv1 = render_mod.project_points(p1, frame.camera)
                    px = uv0.detach().numpy().round().astype(int)
                    inb = ((px[:, 0] >= 0) & (px[:, 0] < frames.width) &
                           (px[:, 1] >= 0) & (px[:, 1] < frames.height))
                    sel = np.zeros(len(px), dtype=bool)
                    sel[inb] = (flow.valid[px[inb, 1], px[inb, 0]] &
                                obj_mask[px[inb, 1], px[inb, 0]])
                    if not sel.any():
                        continue
                    disp = uv1[sel] - uv0[sel]
                    target = Fv[px[sel, 1], px[sel, 0]] * dt_s
                    total = total + flow_weight * torch.abs(disp - target).sum()
    return float(total.detach()), total


# ---------------------------------------------------------------------------
# checkpoint io

def save_scene(path, scene: GaussianScene, overlap_field=None,
               trajectory_dir: str | None = None):
    """Scene checkpoint as JSON; trajectories written next to it."""
    base = os.path.dirname(os.path.abspath(path))
    traj_dir = trajectory_dir or base
    os.makedirs(traj_dir, exist_ok=True)

    def _set_json(s: GaussianSet):
        return [
            {
                "mu": _vec(s.mu[i]), "q": _vec(s.quat[i]), "s": _vec(s.log_scales[i]),
                "sigma": float(s.opacity.detach()[i]), "c": _vec(s.color[i]),
            }
            for i in range(len(s))
        ]

    obj = {
        "camera": {
            "fx": scene.reference_camera.fx, "fy": scene.reference_camera.fy,
            "cx": scene.reference_camera.cx, "cy": scene.reference_camera.cy,
            "R": [float(v) for v in scene.reference_camera.R.reshape(9)],
            "T": [float(v) for v in scene.reference_camera.T],
        },
        "background": _set_json(scene.background),
        "objects": {},
    }
    for oid, o in sorted(scene.objects.items()):
        traj_rel = f"trajectory_{oid}.json"
        write_trajectory(os.path.join(traj_dir, traj_rel), o.trajectory)
        gaussians = []
        for i in range(len(o)):
            g = {
                "mu": _vec(o.mu[i]), "q": _vec(o.quat[i]), "s": _vec(o.log_scales[i]),
                "sigma": float(o.opacity.detach()[i]), "c": _vec(o.color[i]),
                "t_c": float(o.t_center.detach()[i]),
                "t_s": float(o.t_log_scale.detach()[i]),
                "knots": [_vec(o.knots[i, k]) for k in range(o.knots.shape[1])],
            }
            gaussians.append(g)
        obj["objects"][str(oid)] = {
            "trajectory_path": traj_rel,
            "depth": float(o.depth.detach()),
            "gaussians": gaussians,
        }
    if overlap_field is not None:
        obj["overlap_field"] = overlap_field.state_dict_json()
    atomic_write_json(path, obj)


def _vec(t: torch.Tensor):
    return [float(v) for v in t.detach().reshape(-1)]


def load_scene(path):
    """Load a checkpoint; returns (GaussianScene, overlap_field or None)."""
    from .render import OverlapField

    with open(path) as fh:
        d = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    cam = CameraModel(
        fx=d["camera"]["fx"], fy=d["camera"]["fy"],
        cx=d["camera"]["cx"], cy=d["camera"]["cy"],
        R=np.array(d["camera"]["R"]).reshape(3, 3),
        T=np.array(d["camera"]["T"]),
    )
    bg = d["background"]
    background = GaussianSet(
        mu=[g["mu"] for g in bg] or np.zeros((0, 3)),
        quat=[g["q"] for g in bg] or np.zeros((0, 4)),
        log_scales=[g["s"] for g in bg] or np.zeros((0, 3)),
        opacity=[g["sigma"] for g in bg] or np.zeros(0),
        color=[g["c"] for g in bg] or np.zeros((0, 3)),
    )
    objects = {}
    for oid_str, od in d["objects"].items():
        traj = load_trajectory(os.path.join(base, od["trajectory_path"]))
        gs = od["gaussians"]
        objects[int(oid_str)] = ObjectGaussians(
            mu=[g["mu"] for g in gs],
            quat=[g["q"] for g in gs],
            log_scales=[g["s"] for g in gs],
            opacity=[g["sigma"] for g in gs],
            color=[g["c"] for g in gs],
            t_center=[g["t_c"] for g in gs],
            t_log_scale=[g["t_s"] for g in gs],
            knots=[g["knots"] for g in gs],
            depth=od["depth"],
            trajectory=traj,
        )
    scene = GaussianScene(background=background, objects=objects, reference_camera=cam)
    field = None
    if "overlap_field" in d:
        field = OverlapField.from_state_dict_json(d["overlap_field"])
    return scene, field
