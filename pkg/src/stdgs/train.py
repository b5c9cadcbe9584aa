"""Two-phase optimization of the Gaussian scene with adaptive density
control, checkpointing, and held-out evaluation.

Phase 1 optimizes the scene and the overlap perceptron under the image
reconstruction loss only. Phase 2 adds the clustering consistency loss
(refining the disentangle feature map) and the event-consistency loss
(fine-tuning object Gaussians).
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .types import FrameSequence, EventStream, ValidationError
from .scene import (
    GaussianScene,
    GaussianSet,
    ObjectGaussians,
    SceneConfig,
    init_scene,
    consistency_loss,
    save_scene,
)
from .render import OverlapField, render, recon_loss
from .metrics import psnr, ssim
from .clustering import FeatureMap, kmeans, clustering_loss_tensor
from .features import build_features, voxelize_events
from .superpixel import slic_superpixels
from .disentangle import DisentangleConfig, frame_windows

logger = logging.getLogger(__name__)


class NumericalAbort(FloatingPointError):
    """Raised when training hits NaNs or diverges."""


# clustering-loss minibatch: superpixel features sampled per iteration
CLUSTER_BATCH = 512

DEFAULT_LRS = {
    "mu": 1.6e-4,
    "quat": 1e-3,
    "log_scales": 5e-3,
    "opacity": 5e-2,
    "color": 2.5e-3,
    "t_center": 1e-3,
    "t_log_scale": 1e-3,
    "knots": 1e-3,
    "depth": 1e-3,
    "rho_net": 1e-3,
    "feature_map": 1e-3,
}


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    phase1_iters: int = 1500
    phase2_iters: int = 500
    lrs: dict = field(default_factory=lambda: dict(DEFAULT_LRS))
    mu_lr_decay: float = 0.999
    densify_every: int = 100
    densify_grad_threshold: float = 2e-4
    densify_scale_threshold: float = 0.05  # world units: split above, clone below
    prune_opacity: float = 0.005
    checkpoint_every: int = 0  # 0 = final only
    log_every: int = 10
    eval_every: int = 0
    holdout_every: int = 8  # every n-th frame held out
    seed: int = 0
    mode: str = "fused"  # "fused" | "joint" | "unified"
    renormalize: bool = True
    scene: SceneConfig = field(default_factory=SceneConfig)
    disentangle: DisentangleConfig = field(default_factory=DisentangleConfig)

    def validate(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ValidationError("iteration counts must be >= 0")
        if self.mode not in ("fused", "joint", "unified"):
            raise ValidationError(f"unknown training mode {self.mode!r}")


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def log(self, **kw):
        self.records.append(kw)

    def to_json_lines(self) -> str:
        import json
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records) + "\n"


def total_loss(recon: float, clu: float, consis: float, cfg: TrainConfig) -> float:
    """Weighted sum of the three loss components."""
    for name, v in (("recon", recon), ("clu", clu), ("consis", consis)):
        if not np.isfinite(v):
            raise NumericalAbort(f"loss component {name} is not finite: {v}")
    return cfg.lambda1 * recon + cfg.lambda2 * clu + cfg.lambda3 * consis


def split_train_holdout(frames: FrameSequence, every: int):
    if every <= 0 or len(frames) < 2:
        return list(range(len(frames))), []
    held = [i for i in range(len(frames)) if i % every == every - 1]
    train = [i for i in range(len(frames)) if i not in held]
    if not train:
        train, held = held, []
    return train, held


class _Optimizer:
    """Adam over named parameter groups with per-class learning rates."""

    def __init__(self, groups: dict, lrs: dict):
        self.lrs = lrs
        param_groups = []
        for name, params in groups.items():
            params = [p for p in params if p.numel()]
            if params:
                param_groups.append({"params": params, "lr": lrs[name], "name": name})
        self.opt = torch.optim.Adam(param_groups, betas=(0.9, 0.999), eps=1e-8)

    def step(self):
        self.opt.step()

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)

    def decay_mu(self, factor: float):
        for g in self.opt.param_groups:
            if g.get("name") == "mu":
                g["lr"] *= factor


def _scene_groups(scene: GaussianScene, field_: OverlapField | None,
                  fmap: FeatureMap | None) -> dict:
    groups = {name: list(ps) for name, ps in scene.parameters().items()}
    if field_ is not None:
        groups["rho_net"] = field_.parameters()
    if fmap is not None:
        groups["feature_map"] = fmap.parameters()
    return groups


def train(frames: FrameSequence, stream: EventStream, decomposition,
          trajectories: dict, cfg: TrainConfig | None = None,
          out_dir: str | None = None):
    """Run both optimization phases; returns (scene, field, report)."""
    cfg = cfg or TrainConfig()
    cfg.validate()
    torch.manual_seed(cfg.seed)
    t_start = time.time()

    train_idx, held_idx = split_train_holdout(frames, cfg.holdout_every)

    if cfg.mode == "unified":
        decomposition = _all_background(decomposition, frames)
        trajectories = {}
    scene = init_scene(decomposition, frames, trajectories, cfg.scene)
    span = frames.span()
    field_ = OverlapField(t_span=span, seed=cfg.seed) if cfg.mode == "fused" else None

    report = TrainReport(config=_config_dict(cfg))
    fmap = None
    feat_batch = None
    feat_labels = None

    optimizer = _Optimizer(_scene_groups(scene, field_, None), cfg.lrs)
    grad_accum = _GradAccumulator(scene)

    render_mode = {"fused": "fused", "joint": "joint", "unified": "background_only"}[cfg.mode]
    initial_loss = None
    diverged_streak = 0
    total_iters = cfg.phase1_iters + cfg.phase2_iters
    consis_cache = {}

    for it in range(total_iters):
        phase = 1 if it < cfg.phase1_iters else 2
        if phase == 2 and it == cfg.phase1_iters:
            # the loss scale changes when the new terms switch on
            initial_loss = None
            if cfg.lambda2 > 0:
                feat_batch, feat_labels, fmap = _build_clustering_state(
                    frames, stream, cfg, train_idx)
                optimizer = _Optimizer(_scene_groups(scene, field_, fmap), cfg.lrs)

        fi = train_idx[it % len(train_idx)]
        frame = frames[fi]
        out = render(scene, frame.camera, frame.timestamp, field_,
                     frames.width, frames.height, mode=render_mode,
                     renormalize=cfg.renormalize)
        gt = torch.as_tensor(frame.image)
        l_recon = recon_loss(out.image, gt)

        l_clu = torch.zeros((), dtype=torch.float64)
        l_consis = torch.zeros((), dtype=torch.float64)
        if phase == 2:
            if fmap is not None and cfg.lambda2 > 0:
                feats, labels = feat_batch.features, feat_labels
                if len(labels) > CLUSTER_BATCH:
                    rs = np.random.RandomState(cfg.seed + it)
                    pick = rs.choice(len(labels), CLUSTER_BATCH, replace=False)
                    feats, labels = feats[pick], labels[pick]
                l_clu = clustering_loss_tensor(fmap, feats, labels,
                                               pair_seed=cfg.seed + it)
            if cfg.lambda3 > 0 and scene.objects:
                _, l_consis = consistency_loss(
                    scene, stream, frames, [frame.timestamp], decomposition,
                    cache=consis_cache)
        else:
            # phase separation: no clustering / consistency contribution
            assert float(l_clu) == 0.0 and float(l_consis) == 0.0

        value = total_loss(float(l_recon.detach()), float(l_clu.detach()),
                           float(l_consis.detach()), cfg)
        loss = cfg.lambda1 * l_recon + cfg.lambda2 * l_clu + cfg.lambda3 * l_consis

        optimizer.zero_grad()
        if loss.requires_grad:
            loss.backward()
            grad_accum.accumulate()
            optimizer.step()
        else:
            # nothing rendered (all gaussians culled): no graph to descend,
            # but the divergence guard below still sees the loss value
            logger.warning("loss has no gradient path at iteration %d", it)
        optimizer.decay_mu(cfg.mu_lr_decay)
        scene.normalize_quaternions()
        scene.assert_finite()

        if initial_loss is None:
            initial_loss = value
        if value > 10.0 * initial_loss:
            diverged_streak += 1
            if diverged_streak >= 100:
                raise NumericalAbort(
                    f"loss {value:.4g} exceeded 10x initial {initial_loss:.4g} "
                    f"for 100 consecutive iterations")
        else:
            diverged_streak = 0

        if cfg.log_every and it % cfg.log_every == 0:
            report.log(iter=it, phase=phase, loss=value,
                       recon=float(l_recon.detach()), clu=float(l_clu.detach()),
                       consis=float(l_consis.detach()),
                       gaussians=_gaussian_count(scene))
        if cfg.eval_every and held_idx and it % cfg.eval_every == cfg.eval_every - 1:
            m = evaluate(scene, field_, frames, held_idx, mode=render_mode,
                         renormalize=cfg.renormalize)
            report.log(iter=it, **m)

        if (phase == 1 and cfg.densify_every
                and (it + 1) % cfg.densify_every == 0
                and it + 1 < cfg.phase1_iters):
            stats = grad_accum.means()
            changed = densify_prune(scene, stats, cfg)
            if changed:
                optimizer = _Optimizer(_scene_groups(scene, field_, fmap), cfg.lrs)
            grad_accum = _GradAccumulator(scene)

        if out_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_scene(os.path.join(out_dir, f"checkpoint_{it + 1:06d}.json"),
                       scene, overlap_field=field_)

    report.wall_clock = time.time() - t_start
    return scene, field_, report


def _config_dict(cfg: TrainConfig) -> dict:
    return {
        "lambda1": cfg.lambda1, "lambda2": cfg.lambda2, "lambda3": cfg.lambda3,
        "phase1_iters": cfg.phase1_iters, "phase2_iters": cfg.phase2_iters,
        "lrs": dict(cfg.lrs), "seed": cfg.seed, "mode": cfg.mode,
        "renormalize": cfg.renormalize,
    }


def _gaussian_count(scene: GaussianScene) -> int:
    return len(scene.background) + sum(len(o) for o in scene.objects.values())


def _all_background(decomposition, frames: FrameSequence):
    from .disentangle import SceneDecomposition
    masks = [np.zeros((frames.height, frames.width), dtype=np.int32)
             for _ in range(len(frames))]
    return SceneDecomposition(
        masks=masks, num_objects=0, cluster_assignment={},
        cluster_centers=np.zeros((1, 1)), cluster_to_object={0: 0})


def _build_clustering_state(frames, stream, cfg: TrainConfig, train_idx):
    windows = frame_windows(frames, stream)
    sps, grids = [], []
    dcfg = cfg.disentangle
    for i in train_idx:
        sps.append(slic_superpixels(frames[i].image, dcfg.superpixels,
                                    dcfg.compactness))
        grids.append(voxelize_events(stream, windows[i], dcfg.bins))
    sub = [frames[i] for i in train_idx]
    batch = build_features(sub, sps, grids)
    model = kmeans(batch.features, min(dcfg.clusters, len(batch)), seed=dcfg.seed)
    fmap = FeatureMap(batch.features.shape[1], seed=dcfg.seed)
    return batch, model.labels, fmap


class _GradAccumulator:
    """Mean positional gradient norm per Gaussian between densifications."""

    def __init__(self, scene: GaussianScene):
        self.scene = scene
        self.sums = {}
        self.counts = {}
        for key, s in self._sets():
            self.sums[key] = np.zeros(len(s))
            self.counts[key] = 0

    def _sets(self):
        yield "background", self.scene.background
        for oid in sorted(self.scene.objects):
            yield f"object_{oid}", self.scene.objects[oid]

    def accumulate(self):
        for key, s in self._sets():
            if s.mu.grad is not None and len(s):
                self.sums[key] += np.linalg.norm(s.mu.grad.numpy(), axis=1)
                self.counts[key] += 1

    def means(self) -> dict:
        return {k: (self.sums[k] / max(self.counts[k], 1)) for k in self.sums}


def densify_prune(scene: GaussianScene, grad_stats: dict, cfg: TrainConfig) -> bool:
    """Clone small / split large high-gradient Gaussians; prune transparent
    ones. Returns True when any set changed."""
    rng = np.random.RandomState(cfg.seed)
    changed = False
    new_bg = _densify_set(scene.background, grad_stats.get("background"),
                          cfg, rng, is_object=False)
    if new_bg is not None:
        scene.background = new_bg
        changed = True
    for oid in sorted(scene.objects):
        new_obj = _densify_set(scene.objects[oid], grad_stats.get(f"object_{oid}"),
                               cfg, rng, is_object=True)
        if new_obj is not None:
            scene.objects[oid] = new_obj
            changed = True
    return changed


def _densify_set(s, grads, cfg: TrainConfig, rng, is_object: bool):
    n = len(s)
    if n == 0:
        return None
    if grads is None or len(grads) != n:
        grads = np.zeros(n)
    with torch.no_grad():
        opacity = torch.sigmoid(s.opacity).numpy()
        scales = np.exp(s.log_scales.numpy()).max(axis=1)
    keep = opacity >= cfg.prune_opacity
    high = grads > cfg.densify_grad_threshold
    clone = keep & high & (scales <= cfg.densify_scale_threshold)
    split = keep & high & (scales > cfg.densify_scale_threshold)
    if keep.all() and not high.any():
        return None

    def np_(t):
        return t.detach().numpy()

    fields = {
        "mu": np_(s.mu), "quat": np_(s.quat), "log_scales": np_(s.log_scales),
        "opacity": np_(s.opacity), "color": np_(s.color),
    }
    if is_object:
        fields.update(t_center=np_(s.t_center), t_log_scale=np_(s.t_log_scale),
                      knots=np_(s.knots))

    parts = {k: [v[keep]] for k, v in fields.items()}

    if clone.any():
        for k, v in fields.items():
            parts[k].append(v[clone])

    if split.any():
        # split: scale down by 1.6, jitter positions within the old extent
        for k, v in fields.items():
            dup = v[split].copy()
            if k == "log_scales":
                dup = dup - np.log(1.6)
            if k == "mu":
                sigma = np.exp(fields["log_scales"][split])
                dup = dup + rng.normal(0, 1, size=dup.shape) * sigma
            parts[k].append(dup)

    merged = {k: np.concatenate(v, axis=0) for k, v in parts.items()}
    if is_object:
        return ObjectGaussians(
            mu=merged["mu"], quat=merged["quat"], log_scales=merged["log_scales"],
            opacity=merged["opacity"], color=merged["color"],
            t_center=merged["t_center"], t_log_scale=merged["t_log_scale"],
            knots=merged["knots"], depth=float(s.depth.detach()),
            trajectory=s.trajectory,
        )
    return GaussianSet(
        mu=merged["mu"], quat=merged["quat"], log_scales=merged["log_scales"],
        opacity=merged["opacity"], color=merged["color"],
    )


def evaluate(scene: GaussianScene, field_: OverlapField | None,
             frames: FrameSequence, indices=None, mode: str = "fused",
             renormalize: bool = True) -> dict:
    """Mean PSNR/SSIM over the given (held-out) frame indices."""
    if indices is None:
        indices = list(range(len(frames)))
    if not indices:
        raise ValidationError("empty held-out set")
    psnrs, ssims = [], []
    with torch.no_grad():
        for i in indices:
            f = frames[i]
            out = render(scene, f.camera, f.timestamp, field_,
                         frames.width, frames.height, mode=mode,
                         renormalize=renormalize)
            img = out.image_numpy()
            psnrs.append(psnr(img, f.image))
            ssims.append(ssim(img, f.image))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)),
            "views": len(indices)}
