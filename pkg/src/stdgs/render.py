"""Differentiable splatting renderer.

Projects Gaussians with the EWA perspective approximation, rasterizes
background and object layers tile by tile with front-to-back alpha blending,
fuses the layers with a learned per-pixel overlap probability, and exposes
the L1 + SSIM reconstruction loss. All math runs in double precision;
gradients come from reverse-mode autodiff over the recorded forward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .types import CameraModel, ValidationError
from .metrics import ssim_torch
from .scene import GaussianScene, GaussianSet, ObjectGaussians, deform

logger = logging.getLogger(__name__)

NEAR_PLANE = 0.01
EIG_FLOOR = 1e-6
ALPHA_MAX = 0.99
TRANSMITTANCE_EPS = 1e-4
ELLIPSE_CUTOFF = 9.0  # squared Mahalanobis radius (3 sigma)
TILE = 16
DENSITY_EPS = 1e-8


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternions (N, 4) wxyz -> rotation matrices (N, 3, 3)."""
    q = q / torch.linalg.norm(q, dim=1, keepdim=True)
    w, x, y, z = q.unbind(dim=1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=1).reshape(-1, 3, 3)


def project_points(positions: torch.Tensor, cam: CameraModel) -> torch.Tensor:
    """World points (N, 3) -> pixel coordinates (N, 2), differentiable."""
    R = torch.as_tensor(cam.R)
    T = torch.as_tensor(cam.T)
    c = positions @ R.T + T
    u = cam.fx * c[:, 0] / c[:, 2] + cam.cx
    v = cam.fy * c[:, 1] / c[:, 2] + cam.cy
    return torch.stack([u, v], dim=1)


@dataclass
class ProjectedBatch:
    """Screen-space Gaussians surviving the near-plane cull."""

    mean2d: torch.Tensor  # (N, 2)
    cov2d: torch.Tensor  # (N, 3) as (a, b, c) of [[a, b], [b, c]]
    depth: torch.Tensor  # (N,)
    color: torch.Tensor  # (N, 3)
    opacity: torch.Tensor  # (N,) activated, in (0, 1)
    radius: np.ndarray  # (N,) pixel radius for tile binning (detached)

    def __len__(self):
        return self.mean2d.shape[0]

    @staticmethod
    def empty() -> "ProjectedBatch":
        z = torch.zeros((0,), dtype=torch.float64)
        return ProjectedBatch(z.reshape(0, 2), z.reshape(0, 3), z,
                              z.reshape(0, 3), z, np.zeros(0))

    @staticmethod
    def concat(batches: list) -> "ProjectedBatch":
        batches = [b for b in batches if len(b)] or [ProjectedBatch.empty()]
        return ProjectedBatch(
            mean2d=torch.cat([b.mean2d for b in batches]),
            cov2d=torch.cat([b.cov2d for b in batches]),
            depth=torch.cat([b.depth for b in batches]),
            color=torch.cat([b.color for b in batches]),
            opacity=torch.cat([b.opacity for b in batches]),
            radius=np.concatenate([b.radius for b in batches]),
        )


def project_batch(positions: torch.Tensor, quat: torch.Tensor,
                  log_scales: torch.Tensor, opacity: torch.Tensor,
                  color: torch.Tensor, cam: CameraModel) -> ProjectedBatch:
    """EWA projection of a Gaussian set at given world positions."""
    R = torch.as_tensor(cam.R)
    T = torch.as_tensor(cam.T)
    c = positions @ R.T + T
    keep = c[:, 2] > NEAR_PLANE
    if not keep.any():
        return ProjectedBatch.empty()
    c = c[keep]
    quat = quat[keep]
    scales = torch.exp(log_scales[keep])
    opacity = opacity[keep]
    color = color[keep]

    x, y, z = c.unbind(dim=1)
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    mean2d = torch.stack([u, v], dim=1)

    Rq = quat_to_rotmat(quat)
    # world covariance Rq diag(s^2) Rq^T
    S = Rq * scales[:, None, :]
    sigma = S @ S.transpose(1, 2)

    zero = torch.zeros_like(z)
    J = torch.stack([
        cam.fx / z, zero, -cam.fx * x / (z * z),
        zero, cam.fy / z, -cam.fy * y / (z * z),
    ], dim=1).reshape(-1, 2, 3)
    M = J @ R[None]
    cov = M @ sigma @ M.transpose(1, 2)
    a = cov[:, 0, 0]
    b = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    d = cov[:, 1, 1]

    # eigenvalue floor: shift both eigenvalues up when the smaller one dips
    # below EIG_FLOOR
    mid = 0.5 * (a + d)
    disc = torch.sqrt(torch.clamp((0.5 * (a - d)) ** 2 + b * b, min=0.0) + 1e-30)
    lam_min = mid - disc
    lam_max = mid + disc
    lift = torch.clamp(EIG_FLOOR - lam_min, min=0.0)
    a = a + lift
    d = d + lift

    radius = np.ceil(3.0 * np.sqrt((lam_max + lift).detach().numpy())) + 1.0
    return ProjectedBatch(
        mean2d=mean2d,
        cov2d=torch.stack([a, b, d], dim=1),
        depth=z,
        color=color,
        opacity=torch.sigmoid(opacity),
        radius=radius,
    )


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray  # 2x2
    depth: float
    color: np.ndarray
    opacity: float


def project_gaussian(mu, quat, log_scales, opacity_logit, color,
                     cam: CameraModel) -> ProjectedGaussian | None:
    """Single-Gaussian projection; returns None when culled by the near plane."""
    batch = project_batch(
        torch.as_tensor(np.asarray(mu, dtype=np.float64)).reshape(1, 3),
        torch.as_tensor(np.asarray(quat, dtype=np.float64)).reshape(1, 4),
        torch.as_tensor(np.asarray(log_scales, dtype=np.float64)).reshape(1, 3),
        torch.as_tensor(np.asarray([opacity_logit], dtype=np.float64)),
        torch.as_tensor(np.asarray(color, dtype=np.float64)).reshape(1, 3),
        cam,
    )
    if len(batch) == 0:
        return None
    a, b, d = batch.cov2d[0].detach().numpy()
    return ProjectedGaussian(
        mean2d=batch.mean2d[0].detach().numpy(),
        cov2d=np.array([[a, b], [b, d]]),
        depth=float(batch.depth[0]),
        color=batch.color[0].detach().numpy(),
        opacity=float(batch.opacity[0]),
    )


@dataclass
class LayerRender:
    color: torch.Tensor  # (H, W, 3)
    density: torch.Tensor  # (H, W) accumulated alpha in [0, 1]


def rasterize_layer(batch: ProjectedBatch, width: int, height: int,
                    tile: int = TILE) -> LayerRender:
    """Front-to-back alpha blending over depth-sorted Gaussians, per tile.

    Per pixel: alpha_i = opacity_i * exp(-0.5 d^T Sigma^-1 d), clamped to
    ALPHA_MAX and cut beyond the 3-sigma ellipse; contributions stop once
    transmittance drops below TRANSMITTANCE_EPS, so contribution + remaining
    transmittance always sums to one exactly.
    """
    color = torch.zeros((height, width, 3), dtype=torch.float64)
    density = torch.zeros((height, width), dtype=torch.float64)
    if len(batch) == 0:
        return LayerRender(color, density)

    order = torch.argsort(batch.depth, stable=True)
    mean2d = batch.mean2d[order]
    cov = batch.cov2d[order]
    cols = batch.color[order]
    ops = batch.opacity[order]
    radius = batch.radius[order.detach().numpy()]
    centers = mean2d.detach().numpy()

    x0s = centers[:, 0] - radius
    x1s = centers[:, 0] + radius
    y0s = centers[:, 1] - radius
    y1s = centers[:, 1] + radius

    # batch tiles into padded graphs: per tile the Gaussian rows keep their
    # global depth order and padding rows (zero alpha) sit at the end, so
    # blending matches a tile-at-a-time loop bit for bit. Tiles are grouped
    # by descending row count so a few dense tiles (e.g. every object
    # Gaussian over a small sprite) do not inflate the padding of the rest.
    tiles = []  # (ty, tx, sel)
    for ty in range(0, height, tile):
        for tx in range(0, width, tile):
            th = min(tile, height - ty)
            tw = min(tile, width - tx)
            sel = np.nonzero((x1s >= tx) & (x0s < tx + tw) &
                             (y1s >= ty) & (y0s < ty + th))[0]
            if sel.size:
                tiles.append((ty, tx, sel))
    if not tiles:
        return LayerRender(color, density)
    tiles.sort(key=lambda t: -t[2].size)

    col_coords = torch.arange(width, dtype=torch.float64)
    row_coords = torch.arange(height, dtype=torch.float64)

    CHUNK = 8
    for start in range(0, len(tiles), CHUNK):
        chunk = tiles[start:start + CHUNK]
        n_max = max(s.size for _, _, s in chunk)
        pad_idx = np.zeros((len(chunk), n_max), dtype=np.int64)
        pad_mask = np.zeros((len(chunk), n_max), dtype=np.float64)
        for i, (_, _, s) in enumerate(chunk):
            pad_idx[i, :s.size] = s
            pad_mask[i, :s.size] = 1.0
        idx = torch.as_tensor(pad_idx)  # (T, n)
        mask = torch.as_tensor(pad_mask)[:, :, None]  # (T, n, 1)

        # edge tiles hold fewer pixels; pad their coordinate rows (the padded
        # columns are computed and discarded, they cannot affect real pixels)
        p_rows, sizes = [], []
        p_max = 0
        for ty, tx, _ in chunk:
            th = min(tile, height - ty)
            tw = min(tile, width - tx)
            tpx = col_coords[tx:tx + tw].repeat(th)
            tpy = row_coords[ty:ty + th].repeat_interleave(tw)
            p_rows.append((tpx, tpy))
            sizes.append(th * tw)
            p_max = max(p_max, th * tw)
        px = torch.stack([
            torch.cat([r[0], r[0][-1:].expand(p_max - n)]) if n < p_max else r[0]
            for r, n in zip(p_rows, sizes)])
        py = torch.stack([
            torch.cat([r[1], r[1][-1:].expand(p_max - n)]) if n < p_max else r[1]
            for r, n in zip(p_rows, sizes)])

        m = mean2d[idx]  # (T, n, 2)
        cv = cov[idx]  # (T, n, 3)
        dx = m[:, :, 0:1] - px[:, None, :]  # (T, n, P)
        dy = m[:, :, 1:2] - py[:, None, :]
        a = cv[:, :, 0:1]
        b = cv[:, :, 1:2]
        c = cv[:, :, 2:3]
        det = a * c - b * b
        q = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
        alpha = torch.clamp(ops[idx][:, :, None] * torch.exp(-0.5 * q),
                            max=ALPHA_MAX)
        inside = (q.detach() <= ELLIPSE_CUTOFF)
        alpha = alpha * inside * mask
        one = 1.0 - alpha
        t_prev = torch.cumprod(one, dim=1)
        t_prev = torch.cat([torch.ones_like(t_prev[:, :1]), t_prev[:, :-1]],
                           dim=1)
        live = (t_prev.detach() >= TRANSMITTANCE_EPS)
        contrib = alpha * t_prev * live  # (T, n, P)
        tile_color = (contrib[:, :, :, None] * cols[idx][:, :, None, :]).sum(dim=1)
        tile_density = contrib.sum(dim=1)
        for i, (ty, tx, _) in enumerate(chunk):
            th = min(tile, height - ty)
            tw = min(tile, width - tx)
            n = th * tw
            color[ty:ty + th, tx:tx + tw] = tile_color[i, :n].reshape(th, tw, 3)
            density[ty:ty + th, tx:tx + tw] = tile_density[i, :n].reshape(th, tw)
    return LayerRender(color, density)


def _axis_angle(R: np.ndarray) -> np.ndarray:
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-12:
        return np.zeros(3)
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    axis = axis / (2.0 * np.sin(angle))
    return axis * angle


class OverlapField:
    """Per-pixel overlap probability: a small perceptron over (pixel coords,
    time, pose summary), squashed through a logistic so rho stays in (0, 1).

    The output layer starts at zero, giving rho = 0.5 everywhere.
    """

    HIDDEN = 32
    IN_DIM = 9  # x, y, t, translation (3), axis-angle rotation (3)

    def __init__(self, t_span: tuple[int, int] = (0, 1_000_000), seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        def init(shape, scale):
            return ((torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1)
                    * scale).requires_grad_(True)
        h = self.HIDDEN
        self.w1 = init((h, self.IN_DIM), 1.0 / np.sqrt(self.IN_DIM))
        self.b1 = torch.zeros(h, dtype=torch.float64, requires_grad=True)
        self.w2 = init((h, h), 1.0 / np.sqrt(h))
        self.b2 = torch.zeros(h, dtype=torch.float64, requires_grad=True)
        self.w3 = torch.zeros((1, h), dtype=torch.float64, requires_grad=True)
        self.b3 = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        self.t_span = (int(t_span[0]), int(t_span[1]))

    def parameters(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def rho(self, cam: CameraModel, t_us: float, width: int, height: int) -> torch.Tensor:
        yy, xx = torch.meshgrid(
            torch.arange(height, dtype=torch.float64),
            torch.arange(width, dtype=torch.float64),
            indexing="ij",
        )
        t0, t1 = self.t_span
        t_norm = (float(t_us) - t0) / max(t1 - t0, 1)
        pose = np.concatenate([cam.T, _axis_angle(cam.R)])
        feats = torch.stack([
            xx.reshape(-1) / max(width - 1, 1),
            yy.reshape(-1) / max(height - 1, 1),
            torch.full((height * width,), t_norm, dtype=torch.float64),
        ], dim=1)
        pose_t = torch.as_tensor(pose).expand(height * width, 6)
        x = torch.cat([feats, pose_t], dim=1)
        h1 = torch.tanh(x @ self.w1.T + self.b1)
        h2 = torch.tanh(h1 @ self.w2.T + self.b2)
        logit = h2 @ self.w3.T + self.b3
        return torch.sigmoid(logit).reshape(height, width)

    def state_dict_json(self) -> dict:
        names = ["w1", "b1", "w2", "b2", "w3", "b3"]
        d = {n: [float(v) for v in getattr(self, n).detach().reshape(-1)]
             for n in names}
        d["t_span"] = list(self.t_span)
        return d

    @staticmethod
    def from_state_dict_json(d: dict) -> "OverlapField":
        f = OverlapField(t_span=tuple(d.get("t_span", (0, 1_000_000))))
        with torch.no_grad():
            for n in ["w1", "b1", "w2", "b2", "w3", "b3"]:
                p = getattr(f, n)
                p.copy_(torch.as_tensor(d[n], dtype=torch.float64).reshape(p.shape))
        return f


def overlap_rho(field: OverlapField, cam: CameraModel, t_us: float,
                width: int, height: int) -> torch.Tensor:
    return field.rho(cam, t_us, width, height)


def fuse_and_blend(bg: LayerRender, obj: LayerRender, rho: torch.Tensor,
                   renormalize: bool = True) -> torch.Tensor:
    """Density-and-rho weighted color fusion of the two layers.

    w_s = sigma_s / (sigma_s + sigma_d) * (1 - rho),
    w_d = sigma_d / (sigma_s + sigma_d) * rho, with the density ratio
    defined as 1/2 where both densities vanish. The fused color is
    renormalized by (w_s + w_d) unless disabled for ablation.
    """
    if bg.color.shape != obj.color.shape:
        raise ValidationError("layer dimension mismatch")
    ssum = bg.density + obj.density
    safe = torch.clamp(ssum, min=DENSITY_EPS)
    ratio_s = torch.where(ssum < DENSITY_EPS, torch.full_like(ssum, 0.5),
                          bg.density / safe)
    ratio_d = torch.where(ssum < DENSITY_EPS, torch.full_like(ssum, 0.5),
                          obj.density / safe)
    w_s = ratio_s * (1.0 - rho)
    w_d = ratio_d * rho
    fused = w_s[..., None] * bg.color + w_d[..., None] * obj.color
    if renormalize:
        wsum = w_s + w_d
        norm = torch.where(wsum > DENSITY_EPS, wsum, torch.ones_like(wsum))
        fused = fused / norm[..., None]
        # the multiply-then-divide round trip loses an ulp, so pass the
        # surviving layer through untouched when the other weight is zero
        only_s = ((w_d == 0.0) & (w_s > 0.0))[..., None]
        only_d = ((w_s == 0.0) & (w_d > 0.0))[..., None]
        fused = torch.where(only_s, bg.color, fused)
        fused = torch.where(only_d, obj.color, fused)
    return fused


@dataclass
class RenderOutput:
    image: torch.Tensor  # (H, W, 3), pre-clamp
    background: LayerRender
    objects: LayerRender
    rho: torch.Tensor | None

    def image_numpy(self) -> np.ndarray:
        return np.clip(self.image.detach().numpy(), 0.0, 1.0)


def _project_background(scene: GaussianScene, cam: CameraModel) -> ProjectedBatch:
    bg = scene.background
    if len(bg) == 0:
        return ProjectedBatch.empty()
    return project_batch(bg.mu, bg.quat, bg.log_scales, bg.opacity, bg.color, cam)


def _project_objects(scene: GaussianScene, cam: CameraModel, t_us: float) -> ProjectedBatch:
    parts = []
    for oid in sorted(scene.objects):
        obj = scene.objects[oid]
        pos, w = deform(obj, obj.trajectory, t_us, scene.reference_camera)
        # temporal weight scales activated opacity; fold into the logit-free
        # path by pre-multiplying after activation
        batch = project_batch(pos, obj.quat, obj.log_scales, obj.opacity,
                              obj.color, cam)
        if len(batch):
            # align temporal weights with the near-plane survivors
            c = (pos @ torch.as_tensor(cam.R).T + torch.as_tensor(cam.T))
            survived = c[:, 2] > NEAR_PLANE
            batch.opacity = batch.opacity * w[survived]
        parts.append(batch)
    return ProjectedBatch.concat(parts)


def rasterize_objects(scene: GaussianScene, cam: CameraModel, t_us: float,
                      width: int, height: int) -> LayerRender:
    return rasterize_layer(_project_objects(scene, cam, t_us), width, height)


def render(scene: GaussianScene, cam: CameraModel, t_us: float,
           field: OverlapField | None, width: int, height: int,
           mode: str = "fused", renormalize: bool = True) -> RenderOutput:
    """Full forward pass: deform -> project -> rasterize layers -> fuse.

    Modes: "fused" (learned rho fusion), "joint" (both sets splatted as one
    layer, no fusion), "background_only".
    """
    if len(scene.background) == 0 and not scene.objects:
        logger.warning("empty scene; rendering black frame")
        z = torch.zeros((height, width, 3), dtype=torch.float64)
        zl = LayerRender(z, torch.zeros((height, width), dtype=torch.float64))
        return RenderOutput(z, zl, zl, None)

    bg_batch = _project_background(scene, cam)
    if mode == "background_only":
        layer = rasterize_layer(bg_batch, width, height)
        empty = LayerRender(torch.zeros_like(layer.color),
                            torch.zeros_like(layer.density))
        return RenderOutput(layer.color, layer, empty, None)

    obj_batch = _project_objects(scene, cam, t_us)
    if mode == "joint":
        layer = rasterize_layer(ProjectedBatch.concat([bg_batch, obj_batch]),
                                width, height)
        empty = LayerRender(torch.zeros_like(layer.color),
                            torch.zeros_like(layer.density))
        return RenderOutput(layer.color, layer, empty, None)

    if mode != "fused":
        raise ValidationError(f"unknown render mode {mode!r}")
    bg_layer = rasterize_layer(bg_batch, width, height)
    obj_layer = rasterize_layer(obj_batch, width, height)
    if field is None:
        rho = torch.full((height, width), 0.5, dtype=torch.float64)
    else:
        rho = field.rho(cam, t_us, width, height)
    image = fuse_and_blend(bg_layer, obj_layer, rho, renormalize=renormalize)
    return RenderOutput(image, bg_layer, obj_layer, rho)


def recon_loss(image: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean L1 plus (1 - SSIM); differentiable in `image`."""
    if image.shape != gt.shape:
        raise ValidationError(f"dimension mismatch {tuple(image.shape)} vs {tuple(gt.shape)}")
    l1 = torch.abs(image - gt).mean()
    return l1 + (1.0 - ssim_torch(image, gt))


def recon_loss_with_grad(image: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Scalar loss and its image-space gradient d(loss)/d(image)."""
    img = torch.as_tensor(np.asarray(image, dtype=np.float64)).clone()
    img.requires_grad_(True)
    loss = recon_loss(img, torch.as_tensor(np.asarray(gt, dtype=np.float64)))
    loss.backward()
    return float(loss.detach()), img.grad.numpy()
