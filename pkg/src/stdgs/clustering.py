"""K-Means pseudo-labeling and the trainable feature map refined by the
clustering consistency loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .types import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 1.0
MAX_PAIRS = 4096
_NORM_EPS = 1e-24  # keeps sqrt differentiable at coincident points


@dataclass
class ClusterModel:
    centers: np.ndarray  # K_c x D
    labels: np.ndarray  # N
    inertia: float
    feature_map: "FeatureMap | None" = None


def kmeans(features: np.ndarray, K_c: int, seed: int = 0,
           max_iters: int = 100, tol: float = 1e-6,
           n_init: int = 10) -> ClusterModel:
    """Deterministic k-means: greedy k-means++ seeding, Lloyd iterations,
    best of `n_init` restarts (all randomness drawn from the given seed)."""
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if K_c < 1:
        raise ValidationError("cluster count must be >= 1")
    if K_c > n:
        raise ValidationError(f"cluster count {K_c} exceeds sample count {n}")
    rng = np.random.RandomState(seed)
    best = None
    for _ in range(max(n_init, 1)):
        centers, labels, inertia = _kmeans_once(X, K_c, rng, max_iters, tol)
        if best is None or inertia < best[2]:
            best = (centers, labels, inertia)
    return ClusterModel(centers=best[0], labels=best[1], inertia=best[2])


def _kmeans_once(X, K_c, rng, max_iters, tol):
    n = X.shape[0]
    # greedy k-means++ seeding: sample a few d^2-weighted candidates per
    # step and keep the one that lowers the potential the most
    trials = 2 + int(np.log(K_c))
    centers = np.empty((K_c, X.shape[1]))
    centers[0] = X[rng.randint(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for k in range(1, K_c):
        total = d2.sum()
        if total <= 0:
            centers[k] = X[rng.randint(n)]
        else:
            cand = rng.choice(n, size=trials, p=d2 / total)
            best_idx, best_pot = cand[0], np.inf
            for c in cand:
                pot = np.minimum(d2, ((X - X[c]) ** 2).sum(axis=1)).sum()
                if pot < best_pot:
                    best_idx, best_pot = c, pot
            centers[k] = X[best_idx]
        d2 = np.minimum(d2, ((X - centers[k]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(dists, axis=1)
        new_centers = centers.copy()
        for k in range(K_c):
            m = labels == k
            if np.any(m):
                new_centers[k] = X[m].mean(axis=0)
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < tol:
            break
    dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(dists, axis=1)
    inertia = float(dists[np.arange(n), labels].sum())
    return centers, labels, inertia


class FeatureMap:
    """Single trainable affine map plus tanh, D -> D_out."""

    def __init__(self, dim_in: int, dim_out: int | None = None, seed: int = 0):
        dim_out = dim_out or dim_in
        g = torch.Generator().manual_seed(seed)
        scale = 1.0 / np.sqrt(dim_in)
        self.weight = (torch.rand((dim_out, dim_in), generator=g, dtype=torch.float64)
                       * 2 - 1) * scale
        self.bias = torch.zeros(dim_out, dtype=torch.float64)
        self.weight.requires_grad_(True)
        self.bias.requires_grad_(True)

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(x @ self.weight.T + self.bias)

    def apply_numpy(self, x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self(torch.as_tensor(x, dtype=torch.float64)).numpy()


def _pair_indices(n: int, labels: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    all_pairs = n * (n - 1) // 2
    if all_pairs <= MAX_PAIRS:
        iu = np.triu_indices(n, k=1)
        return iu[0], iu[1]
    rng = np.random.RandomState(seed)
    i = rng.randint(0, n, size=MAX_PAIRS)
    j = rng.randint(0, n, size=MAX_PAIRS)
    keep = i != j
    return np.minimum(i, j)[keep], np.maximum(i, j)[keep]


def clustering_loss(fmap: FeatureMap, features: np.ndarray, labels: np.ndarray,
                    margin: float = DEFAULT_MARGIN, pair_seed: int = 0,
                    ) -> tuple[float, list[np.ndarray], torch.Tensor]:
    """Consistency loss over mapped features with recursively updated centers.

    loss = sum_i ||f(x_i) - c_{y_i}|| + sum over sampled pairs of
    ||f(x_i) - f(x_j)|| for same-label pairs, or the hinge
    max(0, margin - ||f(x_i) - f(x_j)||) otherwise. Centers are the label
    means of f(x), recomputed before each evaluation. Returns the scalar
    loss, gradients for the map parameters, and the differentiable tensor.
    """
    loss = clustering_loss_tensor(fmap, features, labels, margin, pair_seed)
    grads = torch.autograd.grad(loss, fmap.parameters(), retain_graph=False,
                                create_graph=False, allow_unused=True)
    grads = [g.detach().numpy() if g is not None else np.zeros(p.shape)
             for g, p in zip(grads, fmap.parameters())]
    return float(loss.detach()), grads, loss.detach()


def clustering_loss_tensor(fmap: FeatureMap, features: np.ndarray,
                           labels: np.ndarray, margin: float = DEFAULT_MARGIN,
                           pair_seed: int = 0) -> torch.Tensor:
    """Differentiable clustering consistency loss (see clustering_loss)."""
    if margin <= 0:
        raise ValidationError("margin must be > 0")
    labels = np.asarray(labels)
    n = labels.shape[0]
    x = torch.as_tensor(np.asarray(features, dtype=np.float64))
    fx = fmap(x)

    loss = fx.new_zeros(())
    for k in np.unique(labels):
        m = torch.as_tensor(labels == k)
        if not m.any():
            logger.warning("cluster %d is empty; center term skipped", int(k))
            continue
        center = fx[m].mean(dim=0)
        d2 = ((fx[m] - center) ** 2).sum(dim=1)
        loss = loss + torch.sqrt(d2 + _NORM_EPS).sum()

    ii, jj = _pair_indices(n, labels, pair_seed)
    if ii.size:
        diff = fx[ii] - fx[jj]
        dist = torch.sqrt((diff ** 2).sum(dim=1) + _NORM_EPS)
        same = torch.as_tensor(labels[ii] == labels[jj])
        attract = torch.where(same, dist, torch.zeros_like(dist)).sum()
        repel = torch.where(~same, torch.clamp(margin - dist, min=0.0),
                            torch.zeros_like(dist)).sum()
        loss = loss + attract + repel
    return loss


def refine_feature_map(fmap: FeatureMap, features: np.ndarray, labels: np.ndarray,
                       steps: int, lr: float = 1e-3, margin: float = DEFAULT_MARGIN,
                       pair_seed: int = 0) -> list[float]:
    """Plain gradient descent on the clustering loss; returns the loss trace."""
    trace = []
    for step in range(steps):
        value, grads, _ = clustering_loss(fmap, features, labels, margin,
                                          pair_seed=pair_seed)
        trace.append(value)
        with torch.no_grad():
            for p, g in zip(fmap.parameters(), grads):
                p -= lr * torch.as_tensor(g)
    return trace


def assign_by_nearest_center(fmap: FeatureMap, features: np.ndarray,
                             labels: np.ndarray) -> np.ndarray:
    """Final labels: nearest label-mean center in mapped feature space."""
    fx = fmap.apply_numpy(features)
    uniq = np.unique(labels)
    centers = np.stack([fx[labels == k].mean(axis=0) for k in uniq])
    d2 = ((fx[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return uniq[np.argmin(d2, axis=1)]
