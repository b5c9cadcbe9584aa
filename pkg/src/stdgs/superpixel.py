"""SLIC superpixel segmentation with connectivity enforcement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import ValidationError


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # H x W int32
    K: int
    mean_colors: np.ndarray  # K x 3
    centroids: np.ndarray  # K x 2 as (y, x)
    counts: np.ndarray  # K


def slic_superpixels(image: np.ndarray, K: int, compactness: float = 10.0,
                     max_iters: int = 10, tol: float = 1e-3) -> SuperpixelMap:
    """Segment an RGB image into ~K locally compact superpixels.

    Grid-seeded centers, assignment restricted to a 2S x 2S neighborhood with
    distance = color distance + compactness * spatial distance / S, iterated
    until center motion drops below `tol` or `max_iters` passes. Orphan
    components are merged into the largest adjacent superpixel afterwards.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if K < 1:
        raise ValidationError("superpixel count must be >= 1")
    if K > h * w:
        raise ValidationError(f"superpixel count {K} exceeds pixel count {h * w}")

    S = max(1, int(round(np.sqrt(h * w / K))))
    # grid seeding: as close to K seeds as the grid allows
    ny = max(1, int(round(h / S)))
    nx = max(1, int(round(K / ny)))
    while ny * nx < K:
        nx += 1
    cy = (np.arange(ny) + 0.5) * h / ny
    cx = (np.arange(nx) + 0.5) * w / nx
    seeds = np.array([(y, x) for y in cy for x in cx])[:K]
    centers_yx = seeds.copy()
    centers_rgb = np.array([
        image[int(np.clip(y, 0, h - 1)), int(np.clip(x, 0, w - 1))] for y, x in seeds
    ])

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int32)
    best = np.full((h, w), np.inf)

    for _ in range(max_iters):
        best.fill(np.inf)
        for k in range(K):
            y0 = max(0, int(centers_yx[k, 0] - S))
            y1 = min(h, int(centers_yx[k, 0] + S) + 1)
            x0 = max(0, int(centers_yx[k, 1] - S))
            x1 = min(w, int(centers_yx[k, 1] + S) + 1)
            patch = image[y0:y1, x0:x1]
            dc = np.sqrt(((patch - centers_rgb[k]) ** 2).sum(axis=2))
            ds = np.sqrt((yy[y0:y1, x0:x1] - centers_yx[k, 0]) ** 2 +
                         (xx[y0:y1, x0:x1] - centers_yx[k, 1]) ** 2)
            d = dc + compactness * ds / S
            win = best[y0:y1, x0:x1]
            m = d < win
            win[m] = d[m]
            labels[y0:y1, x0:x1][m] = k

        # pixels never reached by any 2Sx2S window fall back to nearest center
        unreached = ~np.isfinite(best)
        if np.any(unreached):
            ys, xs = np.nonzero(unreached)
            d2 = (ys[:, None] - centers_yx[None, :, 0]) ** 2 + \
                 (xs[:, None] - centers_yx[None, :, 1]) ** 2
            labels[ys, xs] = np.argmin(d2, axis=1)

        new_yx = centers_yx.copy()
        new_rgb = centers_rgb.copy()
        for k in range(K):
            m = labels == k
            if np.any(m):
                new_yx[k] = [yy[m].mean(), xx[m].mean()]
                new_rgb[k] = image[m].mean(axis=0)
        shift = np.abs(new_yx - centers_yx).max()
        centers_yx, centers_rgb = new_yx, new_rgb
        if shift < tol:
            break

    labels = _enforce_connectivity(labels, K)

    mean_colors = np.zeros((K, 3))
    centroids = np.zeros((K, 2))
    counts = np.zeros(K, dtype=np.int64)
    for k in range(K):
        m = labels == k
        counts[k] = m.sum()
        if counts[k]:
            mean_colors[k] = image[m].mean(axis=0)
            centroids[k] = [yy[m].mean(), xx[m].mean()]
    return SuperpixelMap(labels, K, mean_colors, centroids, counts)


def _connected_components(labels: np.ndarray):
    """4-connected components of a label map; returns comp map and count."""
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int32)
    n = 0
    for sy in range(h):
        for sx in range(w):
            if comp[sy, sx] != -1:
                continue
            lab = labels[sy, sx]
            stack = [(sy, sx)]
            comp[sy, sx] = n
            while stack:
                y, x = stack.pop()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and comp[ny, nx] == -1 \
                            and labels[ny, nx] == lab:
                        comp[ny, nx] = n
                        stack.append((ny, nx))
            n += 1
    return comp, n


def _enforce_connectivity(labels: np.ndarray, K: int, max_passes: int = 20) -> np.ndarray:
    """Merge orphan components into the largest 4-adjacent superpixel until
    every label forms a single 4-connected region."""
    out = labels.copy()
    for _ in range(max_passes):
        comp, n = _connected_components(out)
        sizes = np.bincount(comp.ravel(), minlength=n)
        first = {}
        for c, lab in _component_labels(out, comp, n):
            if lab not in first or sizes[c] > sizes[first[lab]]:
                first[lab] = c
        orphans = [c for c in range(n)
                   if first[_comp_label(out, comp, c)] != c]
        if not orphans:
            break
        label_sizes = np.bincount(out.ravel(), minlength=K)
        merged = False
        for c in orphans:
            m = comp == c
            own = _comp_label(out, comp, c)
            neigh = {lab for lab in _adjacent_labels(out, m) if lab != own}
            if neigh:
                target = max(neigh, key=lambda lab: (label_sizes[lab], -lab))
                out[m] = target
                merged = True
        if not merged:
            break
    return out


def _comp_label(labels: np.ndarray, comp: np.ndarray, c: int) -> int:
    ys, xs = np.nonzero(comp == c)
    return int(labels[ys[0], xs[0]])


def _component_labels(labels: np.ndarray, comp: np.ndarray, n: int):
    flat_comp = comp.ravel()
    flat_lab = labels.ravel()
    seen = np.full(n, -1, dtype=np.int64)
    order = np.argsort(flat_comp, kind="stable")
    firsts = np.searchsorted(flat_comp[order], np.arange(n))
    for c in range(n):
        seen[c] = flat_lab[order[firsts[c]]]
    return [(c, int(seen[c])) for c in range(n)]


def _adjacent_labels(labels: np.ndarray, mask: np.ndarray) -> set:
    h, w = labels.shape
    neigh = set()
    ys, xs = np.nonzero(mask)
    for y, x in zip(ys, xs):
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and not mask[ny, nx]:
                neigh.add(int(labels[ny, nx]))
    return neigh
