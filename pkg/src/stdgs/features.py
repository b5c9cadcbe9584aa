"""Spatiotemporal features: event voxel grids, correlation volumes, and the
per-superpixel appearance + motion descriptors fed to clustering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import EventStream, ValidationError
from .superpixel import SuperpixelMap

US = 1_000_000

HIST_BINS = 8
DEFAULT_TEMPORAL_BINS = 8


@dataclass
class EventVoxelGrid:
    grid: np.ndarray  # B x H x W signed polarity accumulation
    t0: int
    t1: int

    @property
    def B(self):
        return self.grid.shape[0]

    def count_image(self) -> np.ndarray:
        """Unsigned per-pixel activity (sum of |polarity| over bins)."""
        return np.abs(self.grid).sum(axis=0)


@dataclass
class CorrelationVolume:
    matrix: np.ndarray  # B x B normalized inner products
    origin: tuple  # (y0, x0)
    size: tuple  # (h, w)


def voxelize_events(stream: EventStream, window: tuple[int, int], B: int) -> EventVoxelGrid:
    """Accumulate signed polarities into B temporal bins over (t0, t1]."""
    t0, t1 = window
    if t1 <= t0:
        raise ValidationError(f"empty voxel window ({t0}, {t1})")
    if B < 1:
        raise ValidationError("bin count must be >= 1")
    grid = np.zeros((B, stream.height, stream.width), dtype=np.float64)
    sub = stream.window(t0, t1)
    if len(sub):
        bins = np.clip((B * (sub.t - t0)) // (t1 - t0), 0, B - 1).astype(np.int64)
        np.add.at(grid, (bins, sub.y, sub.x), sub.p.astype(np.float64))
    return EventVoxelGrid(grid, int(t0), int(t1))


def correlation_volume(grid: EventVoxelGrid, patch: tuple[int, int, int, int]) -> CorrelationVolume:
    """Normalized inner products between temporal slices of a patch.

    `patch` is (y0, x0, h, w). Entries with a zero-norm slice are 0.
    """
    y0, x0, ph, pw = patch
    B, H, W = grid.grid.shape
    if B < 2:
        raise ValidationError("correlation volume needs at least 2 temporal bins")
    if y0 < 0 or x0 < 0 or y0 + ph > H or x0 + pw > W or ph < 1 or pw < 1:
        raise ValidationError(f"patch {patch} outside grid {H}x{W}")
    slices = grid.grid[:, y0:y0 + ph, x0:x0 + pw].reshape(B, -1)
    norms = np.linalg.norm(slices, axis=1)
    m = slices @ slices.T
    denom = norms[:, None] * norms[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        m = np.where(denom > 0, m / np.where(denom > 0, denom, 1.0), 0.0)
    return CorrelationVolume(m, (y0, x0), (ph, pw))


def _appearance_descriptor(image: np.ndarray, sp: SuperpixelMap, k: int) -> np.ndarray:
    h, w = image.shape[:2]
    mask = sp.labels == k
    pix = image[mask]
    mean_rgb = pix.mean(axis=0) if pix.size else np.zeros(3)
    hist = []
    for c in range(3):
        hc, _ = np.histogram(pix[:, c], bins=HIST_BINS, range=(0.0, 1.0))
        total = hc.sum()
        hist.append(hc / total if total else hc.astype(np.float64))
    cy, cx = sp.centroids[k]
    return np.concatenate([mean_rgb, *hist, [cy / h, cx / w]])


def _motion_descriptor(grid: EventVoxelGrid, sp: SuperpixelMap, k: int) -> np.ndarray:
    ys, xs = np.nonzero(sp.labels == k)
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    vol = correlation_volume(grid, (y0, x0, y1 - y0, x1 - x0))
    iu = np.triu_indices(grid.B, k=1)
    upper = vol.matrix[iu]
    mask = sp.labels == k
    duration_s = (grid.t1 - grid.t0) / US
    density = grid.count_image()[mask].sum() / (mask.sum() * duration_s)
    return np.concatenate([upper, [density]])


@dataclass
class FeatureBatch:
    """Per-superpixel feature vectors pooled over frame windows."""

    features: np.ndarray  # N x D, z-scored per dimension
    raw: np.ndarray  # N x D before normalization
    event_density: np.ndarray  # N, events per pixel per second
    frame_index: np.ndarray  # N, owning frame window
    superpixel_index: np.ndarray  # N, superpixel id within its frame
    appearance_dim: int

    def __len__(self):
        return self.features.shape[0]


def build_features(frames, superpixels: list[SuperpixelMap],
                   grids: list[EventVoxelGrid]) -> FeatureBatch:
    """One feature vector per superpixel per aligned frame window.

    Appearance and motion parts are z-score normalized over the whole batch;
    zero-variance dimensions pass through unscaled.
    """
    if len(superpixels) != len(grids):
        raise ValidationError("superpixels and grids must be aligned per frame window")
    rows, density, fidx, sidx = [], [], [], []
    for i, (sp, grid) in enumerate(zip(superpixels, grids)):
        image = frames[i].image
        for k in range(sp.K):
            if sp.counts[k] == 0:
                continue
            app = _appearance_descriptor(image, sp, k)
            mot = _motion_descriptor(grid, sp, k)
            rows.append(np.concatenate([app, mot]))
            density.append(mot[-1])
            fidx.append(i)
            sidx.append(k)
    raw = np.array(rows, dtype=np.float64)
    app_dim = 3 + 3 * HIST_BINS + 2
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    scale = np.where(std > 1e-12, std, 1.0)
    shift = np.where(std > 1e-12, mean, 0.0)
    feats = (raw - shift) / scale
    return FeatureBatch(
        features=feats, raw=raw,
        event_density=np.array(density), frame_index=np.array(fidx),
        superpixel_index=np.array(sidx), appearance_dim=app_dim,
    )
