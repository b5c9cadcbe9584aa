import time

import numpy as np
import pytest
import torch

from stdgs.types import CameraModel, ValidationError
from stdgs.scene import GaussianScene, GaussianSet, ObjectGaussians, inverse_sigmoid
from stdgs.track import Trajectory
from stdgs.render import (
    ALPHA_MAX,
    ELLIPSE_CUTOFF,
    TRANSMITTANCE_EPS,
    LayerRender,
    OverlapField,
    ProjectedBatch,
    fuse_and_blend,
    project_batch,
    project_gaussian,
    project_points,
    quat_to_rotmat,
    rasterize_layer,
    recon_loss,
    recon_loss_with_grad,
    render,
)


# ---------------------------------------------------------------------------
# shared builders (also used by the acceptance suite)

def random_projected_batch(rng, n, width, height):
    """Random screen-space Gaussians with valid positive-definite covariances."""
    mean = np.column_stack([rng.uniform(0, width, n), rng.uniform(0, height, n)])
    a = np.exp(rng.uniform(-0.5, 2.0, n))
    c = np.exp(rng.uniform(-0.5, 2.0, n))
    b = rng.uniform(-0.9, 0.9, n) * np.sqrt(a * c)
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    return ProjectedBatch(
        mean2d=torch.tensor(mean),
        cov2d=torch.tensor(np.column_stack([a, b, c])),
        depth=torch.tensor(rng.uniform(1.0, 10.0, n)),
        color=torch.tensor(rng.uniform(0, 1, (n, 3))),
        opacity=torch.tensor(rng.uniform(0.05, 0.95, n)),
        radius=np.ceil(3.0 * np.sqrt(lam_max)) + 1.0,
    )


def reference_transmittance(batch, width, height):
    """Scalar per-pixel loop reproducing the blending recurrence."""
    order = torch.argsort(batch.depth, stable=True).numpy()
    mean = batch.mean2d.detach().numpy()[order]
    cov = batch.cov2d.detach().numpy()[order]
    cols = batch.color.detach().numpy()[order]
    ops = batch.opacity.detach().numpy()[order]
    T = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            t = 1.0
            for m, (a, b, c), op in zip(mean, cov, ops):
                if t < TRANSMITTANCE_EPS:
                    break
                dx = m[0] - px
                dy = m[1] - py
                det = a * c - b * b
                q = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
                if q > ELLIPSE_CUTOFF:
                    continue
                alpha = min(op * np.exp(-0.5 * q), ALPHA_MAX)
                t *= 1.0 - alpha
            T[py, px] = t
    return T


def conservation_max_error(n_scenes, width=8, height=8, n_gaussians=12, seed=0):
    """Max per-pixel deviation of contribution + transmittance from one."""
    rng = np.random.RandomState(seed)
    worst = 0.0
    for _ in range(n_scenes):
        batch = random_projected_batch(rng, n_gaussians, width, height)
        layer = rasterize_layer(batch, width, height)
        T = reference_transmittance(batch, width, height)
        err = np.abs(layer.density.detach().numpy() + T - 1.0).max()
        worst = max(worst, float(err))
    return worst


def _traj(points, step_us=10_000, oid=1):
    t = Trajectory(object_id=oid, step_us=step_us)
    for tt, x, y in points:
        t.points.append((tt, x, y, np.eye(4)))
    return t


def build_fd_scene(seed=0, n_bg=12, n_obj=8, size=32):
    """Random two-layer scene plus overlap field for gradient checking.

    Opacity logits stay below 1.5 so the ALPHA_MAX clamp never engages and
    the loss is smooth in every parameter.
    """
    rng = np.random.RandomState(seed)
    cam = CameraModel(fx=float(size), fy=float(size), cx=size / 2.0,
                      cy=size / 2.0, R=np.eye(3), T=np.zeros(3))
    depth = rng.uniform(2.5, 5.0, n_bg)
    uv = np.column_stack([rng.uniform(4, size - 4, n_bg),
                          rng.uniform(4, size - 4, n_bg)])
    mu = cam.backproject(uv, depth)
    quat = rng.normal(size=(n_bg, 4))
    background = GaussianSet(
        mu=mu, quat=quat,
        log_scales=rng.uniform(-3.2, -2.4, (n_bg, 3)),
        opacity=rng.uniform(-1.0, 1.5, n_bg),
        color=rng.uniform(0.1, 0.9, (n_bg, 3)),
    )
    traj = _traj([(0, 10.0, 12.0), (50_000, 16.0, 16.0), (100_000, 22.0, 20.0)])
    obj = ObjectGaussians(
        mu=rng.normal(0, 0.08, (n_obj, 3)),
        quat=rng.normal(size=(n_obj, 4)),
        log_scales=rng.uniform(-3.2, -2.4, (n_obj, 3)),
        opacity=rng.uniform(-1.0, 1.5, n_obj),
        color=rng.uniform(0.1, 0.9, (n_obj, 3)),
        t_center=rng.uniform(0, 100_000, n_obj),
        t_log_scale=rng.uniform(np.log(0.02), np.log(0.08), n_obj),
        knots=rng.normal(0, 0.02, (n_obj, 3, 3)),
        depth=3.0,
        trajectory=traj,
    )
    scene = GaussianScene(background=background, objects={1: obj},
                          reference_camera=cam)
    field = OverlapField(t_span=(0, 100_000), seed=seed)
    with torch.no_grad():
        for p in field.parameters():
            p += (torch.rand(p.shape, dtype=torch.float64,
                             generator=torch.Generator().manual_seed(seed)) - 0.5) * 0.2
    gt = torch.tensor(rng.uniform(0, 1, (size, size, 3)))
    return scene, field, cam, 47_000, gt


FD_STEP = {"t_center": 1.0}  # microsecond-scale parameter gets a larger step


def run_gradient_suite(seed=0, samples_per_class=6, tol=1e-3, size=32):
    """Central finite differences vs autodiff over every parameter class.

    Returns (max relative error, number of coordinates checked, seconds).
    """
    t_start = time.time()
    scene, field, cam, t_us, gt = build_fd_scene(seed=seed, size=size)
    params = {name: ps for name, ps in scene.parameters().items()}
    for i, p in enumerate(field.parameters()):
        params[f"field_{i}"] = [p]

    def loss_value():
        out = render(scene, cam, t_us, field, size, size, mode="fused")
        return float(recon_loss(out.image, gt).detach())

    out = render(scene, cam, t_us, field, size, size, mode="fused")
    loss = recon_loss(out.image, gt)
    loss.backward()

    rng = np.random.RandomState(seed + 1)
    worst = 0.0
    checked = 0
    for name, tensors in params.items():
        h = FD_STEP.get(name, 1e-6)
        for p in tensors:
            grad = (p.grad if p.grad is not None
                    else torch.zeros_like(p)).reshape(-1).numpy()
            flat_n = grad.size
            idxs = rng.choice(flat_n, size=min(samples_per_class, flat_n),
                              replace=False)
            for i in idxs:
                with torch.no_grad():
                    orig = float(p.reshape(-1)[i])
                    p.reshape(-1)[i] = orig + h
                up = loss_value()
                with torch.no_grad():
                    p.reshape(-1)[i] = orig - h
                dn = loss_value()
                with torch.no_grad():
                    p.reshape(-1)[i] = orig
                fd = (up - dn) / (2.0 * h)
                denom = max(abs(fd), abs(grad[i]), 1e-6)
                worst = max(worst, abs(fd - grad[i]) / denom)
                checked += 1
    return worst, checked, time.time() - t_start


# ---------------------------------------------------------------------------
# projection

def _cam(f=24.0, size=24):
    return CameraModel(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0,
                       R=np.eye(3), T=np.zeros(3))


def test_quat_to_rotmat_oracles():
    eye = quat_to_rotmat(torch.tensor([[1.0, 0, 0, 0]], dtype=torch.float64))
    assert torch.allclose(eye[0], torch.eye(3, dtype=torch.float64))
    s = np.sin(np.pi / 4)
    rz = quat_to_rotmat(torch.tensor([[np.cos(np.pi / 4), 0, 0, s]]))
    want = torch.tensor([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
                        dtype=torch.float64)
    assert torch.allclose(rz[0], want, atol=1e-12)
    # non-unit input is normalized first
    two = quat_to_rotmat(torch.tensor([[2.0, 0, 0, 0]], dtype=torch.float64))
    assert torch.allclose(two[0], torch.eye(3, dtype=torch.float64))


def test_project_points_pinhole_oracle():
    cam = CameraModel(fx=50.0, fy=40.0, cx=10.0, cy=20.0,
                      R=np.eye(3), T=np.array([0.0, 0.0, 1.0]))
    pts = torch.tensor([[0.2, -0.1, 1.0]], dtype=torch.float64)
    uv = project_points(pts, cam)
    # z_cam = 2: u = 50 * 0.2 / 2 + 10, v = 40 * -0.1 / 2 + 20
    assert torch.allclose(uv[0], torch.tensor([15.0, 18.0], dtype=torch.float64))


def test_project_batch_centered_isotropic_oracle():
    cam = _cam()
    z, s = 3.0, 0.05
    batch = project_batch(
        torch.tensor([[0.0, 0.0, z]], dtype=torch.float64),
        torch.tensor([[1.0, 0, 0, 0]], dtype=torch.float64),
        torch.full((1, 3), np.log(s), dtype=torch.float64),
        torch.tensor([0.3], dtype=torch.float64),
        torch.tensor([[0.2, 0.4, 0.6]], dtype=torch.float64), cam)
    assert len(batch) == 1
    assert torch.allclose(batch.mean2d[0],
                          torch.tensor([12.0, 12.0], dtype=torch.float64))
    var = (cam.fx * s / z) ** 2  # on-axis EWA: J = diag(fx/z, fy/z)
    a, b, d = batch.cov2d[0].detach().numpy()
    assert np.isclose(a, var) and np.isclose(d, var)
    assert np.isclose(b, 0.0, atol=1e-15)
    assert np.isclose(float(batch.opacity[0]), 1.0 / (1.0 + np.exp(-0.3)))
    assert np.isclose(float(batch.depth[0]), z)


def test_project_batch_general_matches_manual_ewa():
    rng = np.random.RandomState(5)
    cam = CameraModel(fx=30.0, fy=28.0, cx=16.0, cy=15.0,
                      R=np.eye(3), T=np.array([0.05, -0.02, 0.0]))
    mu = np.array([[0.4, -0.3, 4.0]])
    quat = rng.normal(size=(1, 4))
    log_s = np.array([[-2.0, -2.5, -3.0]])
    batch = project_batch(
        torch.tensor(mu), torch.tensor(quat), torch.tensor(log_s),
        torch.tensor([0.0]), torch.tensor([[1.0, 1.0, 1.0]]), cam)
    # manual reference in numpy
    q = quat[0] / np.linalg.norm(quat[0])
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
    S = np.diag(np.exp(log_s[0]))
    sigma = R @ S @ S @ R.T
    c = mu[0] + cam.T
    J = np.array([[cam.fx / c[2], 0, -cam.fx * c[0] / c[2] ** 2],
                  [0, cam.fy / c[2], -cam.fy * c[1] / c[2] ** 2]])
    cov_ref = J @ sigma @ J.T
    a, b, d = batch.cov2d[0].detach().numpy()
    assert np.allclose([a, b, d],
                       [cov_ref[0, 0], cov_ref[0, 1], cov_ref[1, 1]], atol=1e-12)
    u_ref = cam.fx * c[0] / c[2] + cam.cx
    v_ref = cam.fy * c[1] / c[2] + cam.cy
    assert np.allclose(batch.mean2d[0].detach().numpy(), [u_ref, v_ref])


def test_near_plane_culling():
    cam = _cam()
    batch = project_batch(
        torch.tensor([[0.0, 0.0, -1.0], [0.0, 0.0, 2.0]], dtype=torch.float64),
        torch.tensor([[1.0, 0, 0, 0], [1.0, 0, 0, 0]], dtype=torch.float64),
        torch.full((2, 3), -3.0, dtype=torch.float64),
        torch.zeros(2, dtype=torch.float64),
        torch.rand((2, 3), dtype=torch.float64), cam)
    assert len(batch) == 1
    assert project_gaussian([0, 0, -1.0], [1, 0, 0, 0], [-3, -3, -3],
                            0.0, [1, 1, 1], cam) is None


# ---------------------------------------------------------------------------
# rasterization

def test_rasterize_single_gaussian_pixel_oracle():
    cam = _cam()
    g = project_batch(
        torch.tensor([[0.0, 0.0, 3.0]], dtype=torch.float64),
        torch.tensor([[1.0, 0, 0, 0]], dtype=torch.float64),
        torch.full((1, 3), np.log(0.25), dtype=torch.float64),
        torch.tensor([0.5], dtype=torch.float64),
        torch.tensor([[0.3, 0.6, 0.9]], dtype=torch.float64), cam)
    layer = rasterize_layer(g, 24, 24)
    var = (24.0 * 0.25 / 3.0) ** 2  # = 4 px^2
    op = 1.0 / (1.0 + np.exp(-0.5))
    # alpha at the center pixel (12, 12) where q = 0
    assert np.isclose(float(layer.density[12, 12]), op)
    assert np.allclose(layer.color[12, 12].detach().numpy(),
                       op * np.array([0.3, 0.6, 0.9]))
    # two pixels right: q = 4 / var = 1
    a2 = op * np.exp(-0.5)
    assert np.isclose(float(layer.density[12, 14]), a2)
    # beyond the 3-sigma cutoff: exactly zero
    assert float(layer.density[12, 23]) == 0.0


def test_rasterize_two_gaussian_front_to_back_oracle():
    mk = lambda z: project_batch(
        torch.tensor([[0.0, 0.0, z]], dtype=torch.float64),
        torch.tensor([[1.0, 0, 0, 0]], dtype=torch.float64),
        torch.full((1, 3), np.log(0.2 * z / 3.0), dtype=torch.float64),
        torch.tensor([0.0], dtype=torch.float64),
        torch.tensor([[1.0, 0.0, 0.0]] if z < 4 else [[0.0, 0.0, 1.0]],
                     dtype=torch.float64), _cam())
    both = ProjectedBatch.concat([mk(5.0), mk(3.0)])  # given rear first
    layer = rasterize_layer(both, 24, 24)
    a = 0.5  # sigmoid(0), q = 0 at center for both
    want = a * np.array([1.0, 0, 0]) + (1 - a) * a * np.array([0, 0, 1.0])
    assert np.allclose(layer.color[12, 12].detach().numpy(), want)
    assert np.isclose(float(layer.density[12, 12]), a + (1 - a) * a)


def test_rasterize_empty_batch():
    layer = rasterize_layer(ProjectedBatch.empty(), 6, 5)
    assert layer.color.shape == (5, 6, 3)
    assert float(layer.density.abs().sum()) == 0.0


def test_conservation_contribution_plus_transmittance():
    assert conservation_max_error(15, seed=0) <= 1e-9


def test_rasterize_tile_size_invariant():
    rng = np.random.RandomState(3)
    batch = random_projected_batch(rng, 10, 20, 20)
    a = rasterize_layer(batch, 20, 20, tile=4)
    b = rasterize_layer(batch, 20, 20, tile=64)
    assert torch.allclose(a.color, b.color, atol=1e-14)
    assert torch.allclose(a.density, b.density, atol=1e-14)


# ---------------------------------------------------------------------------
# fusion

def _layers(seed=0, w=8, h=8):
    rng = np.random.RandomState(seed)
    bg = LayerRender(torch.tensor(rng.rand(h, w, 3)), torch.tensor(rng.rand(h, w)))
    obj = LayerRender(torch.tensor(rng.rand(h, w, 3)), torch.tensor(rng.rand(h, w)))
    return bg, obj


def test_fusion_endpoints_bitwise():
    bg, obj = _layers(0)
    zero = torch.zeros_like(bg.density)
    one = torch.ones_like(bg.density)
    assert torch.equal(fuse_and_blend(bg, obj, zero), bg.color)
    assert torch.equal(fuse_and_blend(bg, obj, one), obj.color)


def test_fusion_weight_oracle():
    bg, obj = _layers(1)
    rho = torch.full_like(bg.density, 0.3)
    fused = fuse_and_blend(bg, obj, rho)
    ws = bg.density / (bg.density + obj.density) * 0.7
    wd = obj.density / (bg.density + obj.density) * 0.3
    want = (ws[..., None] * bg.color + wd[..., None] * obj.color) / (ws + wd)[..., None]
    assert torch.allclose(fused, want)
    raw = fuse_and_blend(bg, obj, rho, renormalize=False)
    want_raw = ws[..., None] * bg.color + wd[..., None] * obj.color
    assert torch.allclose(raw, want_raw)


def test_fusion_zero_density_pixels_use_half_ratio():
    h, w = 4, 4
    bg = LayerRender(torch.full((h, w, 3), 0.8, dtype=torch.float64),
                     torch.zeros((h, w), dtype=torch.float64))
    obj = LayerRender(torch.full((h, w, 3), 0.2, dtype=torch.float64),
                      torch.zeros((h, w), dtype=torch.float64))
    rho = torch.full((h, w), 0.5, dtype=torch.float64)
    fused = fuse_and_blend(bg, obj, rho)
    assert torch.allclose(fused, torch.full((h, w, 3), 0.5, dtype=torch.float64))
    with pytest.raises(ValidationError):
        fuse_and_blend(bg, LayerRender(torch.zeros((2, 2, 3)), torch.zeros((2, 2))), rho)


def test_overlap_field_initial_rho_is_half():
    field = OverlapField()
    cam = _cam()
    rho = field.rho(cam, 500_000, 10, 8)
    assert rho.shape == (8, 10)
    assert torch.equal(rho, torch.full((8, 10), 0.5, dtype=torch.float64))


def test_overlap_field_roundtrip_and_gradients():
    field = OverlapField(t_span=(100, 900), seed=2)
    with torch.no_grad():
        for p in field.parameters():
            p += torch.rand(p.shape, dtype=torch.float64)
    back = OverlapField.from_state_dict_json(field.state_dict_json())
    cam = _cam()
    r1 = field.rho(cam, 300, 6, 6)
    r2 = back.rho(cam, 300, 6, 6)
    assert torch.equal(r1.detach(), r2.detach())
    assert ((r1 > 0) & (r1 < 1)).all()
    r1.sum().backward()
    assert all(p.grad is not None for p in field.parameters())


# ---------------------------------------------------------------------------
# full renders

def test_render_modes():
    scene, field, cam, t_us, _ = build_fd_scene(seed=4)
    fused = render(scene, cam, t_us, field, 32, 32, mode="fused")
    joint = render(scene, cam, t_us, None, 32, 32, mode="joint")
    bg = render(scene, cam, t_us, None, 32, 32, mode="background_only")
    assert fused.rho is not None
    assert joint.rho is None and bg.rho is None
    # background_only ignores the object layer entirely
    assert float(bg.objects.density.abs().sum()) == 0.0
    assert not torch.allclose(fused.image, bg.image)
    assert not torch.allclose(joint.image, bg.image)
    with pytest.raises(ValidationError, match="mode"):
        render(scene, cam, t_us, None, 32, 32, mode="bogus")
    img = fused.image_numpy()
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_render_fused_without_field_uses_half_rho():
    scene, _, cam, t_us, _ = build_fd_scene(seed=6)
    out = render(scene, cam, t_us, None, 32, 32, mode="fused")
    assert torch.equal(out.rho, torch.full((32, 32), 0.5, dtype=torch.float64))
    ref = fuse_and_blend(out.background, out.objects, out.rho)
    assert torch.equal(out.image, ref)


def test_render_empty_scene_black():
    cam = _cam()
    scene = GaussianScene(background=GaussianSet.empty(), objects={},
                          reference_camera=cam)
    out = render(scene, cam, 0, None, 8, 8)
    assert float(out.image.abs().sum()) == 0.0


# ---------------------------------------------------------------------------
# loss and gradients

def test_recon_loss_zero_on_identical():
    img = torch.tensor(np.random.RandomState(0).rand(16, 16, 3))
    assert float(recon_loss(img, img.clone())) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValidationError, match="mismatch"):
        recon_loss(img, img[:8])


def test_recon_loss_grad_matches_finite_differences():
    rng = np.random.RandomState(1)
    img = rng.rand(12, 12, 3)
    gt = rng.rand(12, 12, 3)
    val, grad = recon_loss_with_grad(img, gt)
    h = 1e-6
    for y, x, ch in [(0, 0, 0), (5, 7, 1), (11, 11, 2), (3, 2, 0)]:
        up = img.copy(); up[y, x, ch] += h
        dn = img.copy(); dn[y, x, ch] -= h
        vu, _ = recon_loss_with_grad(up, gt)
        vd, _ = recon_loss_with_grad(dn, gt)
        fd = (vu - vd) / (2 * h)
        assert abs(fd - grad[y, x, ch]) <= 1e-4 * max(1.0, abs(fd))


def test_gradient_suite_all_parameter_classes():
    worst, checked, elapsed = run_gradient_suite(seed=0, samples_per_class=4)
    assert checked >= 40
    assert worst <= 1e-3, f"max relative gradient error {worst:.2e}"
    assert elapsed < 60.0
