import numpy as np
import pytest

from stdgs.types import ValidationError
from stdgs.superpixel import (
    SuperpixelMap,
    _connected_components,
    _enforce_connectivity,
    slic_superpixels,
)


def quadrant_image(h=32, w=32):
    img = np.zeros((h, w, 3))
    img[: h // 2, : w // 2] = [1.0, 0.0, 0.0]
    img[: h // 2, w // 2:] = [0.0, 1.0, 0.0]
    img[h // 2:, : w // 2] = [0.0, 0.0, 1.0]
    img[h // 2:, w // 2:] = [1.0, 1.0, 0.0]
    return img


def test_quadrant_purity():
    # with strong color contrast every superpixel should stay inside one quadrant
    img = quadrant_image()
    sp = slic_superpixels(img, 16, compactness=1.0)
    for k in range(sp.K):
        m = sp.labels == k
        if not m.any():
            continue
        colors = img[m]
        assert np.abs(colors - colors[0]).max() < 1e-12


def test_labels_cover_image_and_counts_match():
    rng = np.random.RandomState(0)
    img = rng.uniform(0, 1, size=(24, 20, 3))
    sp = slic_superpixels(img, 12)
    assert sp.labels.shape == (24, 20)
    assert sp.labels.min() >= 0 and sp.labels.max() < sp.K
    assert sp.counts.sum() == 24 * 20
    for k in range(sp.K):
        assert sp.counts[k] == (sp.labels == k).sum()


def test_every_superpixel_is_4_connected():
    rng = np.random.RandomState(1)
    img = rng.uniform(0, 1, size=(32, 32, 3))
    sp = slic_superpixels(img, 20)
    # flood fill: each present label must be one component
    comp, _ = _connected_components(sp.labels)
    for k in np.unique(sp.labels):
        assert len(np.unique(comp[sp.labels == k])) == 1


def test_enforce_connectivity_merges_orphan():
    labels = np.zeros((6, 6), dtype=np.int32)
    labels[:, 3:] = 1
    labels[5, 0] = 1  # orphan island of label 1 inside label 0 territory
    fixed = _enforce_connectivity(labels, 2)
    comp, _ = _connected_components(fixed)
    for k in np.unique(fixed):
        assert len(np.unique(comp[fixed == k])) == 1
    assert fixed[5, 0] == 0


def test_mean_colors_and_centroids_consistent():
    rng = np.random.RandomState(2)
    img = rng.uniform(0, 1, size=(16, 16, 3))
    sp = slic_superpixels(img, 6)
    yy, xx = np.mgrid[0:16, 0:16].astype(np.float64)
    for k in range(sp.K):
        m = sp.labels == k
        if not m.any():
            continue
        assert np.allclose(sp.mean_colors[k], img[m].mean(axis=0))
        assert np.allclose(sp.centroids[k], [yy[m].mean(), xx[m].mean()])


def test_compactness_controls_boundary_regularity():
    rng = np.random.RandomState(3)
    img = rng.uniform(0, 1, size=(32, 32, 3))

    def boundary_len(labels):
        return int((labels[:, 1:] != labels[:, :-1]).sum()
                   + (labels[1:, :] != labels[:-1, :]).sum())

    loose = slic_superpixels(img, 16, compactness=0.1)
    tight = slic_superpixels(img, 16, compactness=50.0)
    assert boundary_len(tight.labels) < boundary_len(loose.labels)


def test_bad_k_rejected():
    img = np.zeros((4, 4, 3))
    with pytest.raises(ValidationError):
        slic_superpixels(img, 0)
    with pytest.raises(ValidationError):
        slic_superpixels(img, 17)


def test_grayscale_input_promoted():
    img = np.linspace(0, 1, 64).reshape(8, 8)
    sp = slic_superpixels(img, 4)
    assert sp.mean_colors.shape == (4, 3)
