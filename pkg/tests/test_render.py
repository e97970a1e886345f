import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gsmark.cloud import Gaussian, GaussianCloud
from gsmark.render import (ALPHA_MAX, LOWPASS_FLOOR, CULLED, Camera, GaussianTensors, Splat2D,
                           alpha_at, composite, load_cameras, project, render, render_tensors,
                           save_cameras, sh_to_color, pixel_centers, splat_alpha, blend,
                           project_tensors, sorted_visible)
from gsmark.validation import InvalidParameterError

from helpers import front_camera, random_cloud


def _gauss(pos, sigma=0.1, rgb=(1.0, 0.0, 0.0), logit=8.0):
    sh = ((np.asarray(rgb) - 0.5) / 0.28209479177387814)[None]
    return Gaussian(np.asarray(pos, float), np.array([1.0, 0, 0, 0]), np.full(3, np.log(sigma)), sh, logit)


def test_project_on_axis():
    f, z, sigma = 40.0, 2.0, 0.1
    cam = Camera(f, f, 16, 16, 32, 32)
    s = project(_gauss([0, 0, z], sigma), cam)
    np.testing.assert_allclose(s.mean2d, [16, 16], atol=1e-12)
    # J = diag(f/z, f/z) on the axis
    np.testing.assert_allclose(s.cov2d, (f * sigma / z) ** 2 * np.eye(2) + LOWPASS_FLOOR * np.eye(2),
                               atol=1e-10)
    assert s.depth == pytest.approx(z)


def test_project_behind_camera_is_culled():
    assert project(_gauss([0, 0, -1]), Camera(10, 10, 4, 4, 8, 8)) is CULLED


def test_project_far_outside_is_culled():
    assert project(_gauss([50, 0, 2]), Camera(10, 10, 4, 4, 8, 8)) is CULLED


def test_focal_doubling_doubles_offset():
    g = _gauss([0.1, 0.05, 2.0])
    a = project(g, Camera(20, 20, 16, 16, 32, 32))
    b = project(g, Camera(40, 20, 16, 16, 32, 32))
    assert b.mean2d[0] - 16 == pytest.approx(2 * (a.mean2d[0] - 16), rel=1e-12)


def _splat(mean=(0.0, 0.0), cov=np.eye(2), alpha=0.5, color=(1.0, 0, 0), depth=1.0):
    return Splat2D(np.asarray(mean, float), np.asarray(cov, float), depth, np.asarray(color, float), alpha)


def test_alpha_at():
    s = _splat(alpha=0.6)
    assert alpha_at(s, (0, 0)) == pytest.approx(0.6)
    # d^T cov^-1 d = 2 with identity covariance
    assert alpha_at(s, (1.0, 1.0)) == pytest.approx(0.6 * np.exp(-1))
    assert alpha_at(_splat(alpha=0.995), (0, 0)) == ALPHA_MAX
    assert alpha_at(_splat(alpha=0.5), (10, 0)) == 0.0


def test_composite_examples():
    np.testing.assert_array_equal(composite([], (0, 0)), [0, 0, 0])
    np.testing.assert_allclose(composite([_splat(alpha=0.99, color=(1, 0, 0))], (0, 0)), [0.99, 0, 0])
    two = [_splat(alpha=0.5, color=(1, 0, 0), depth=1), _splat(alpha=0.5, color=(0, 1, 0), depth=2)]
    np.testing.assert_allclose(composite(two, (0, 0)), [0.5, 0.25, 0.0], atol=1e-15)


def test_composite_rejects_unsorted():
    with pytest.raises(InvalidParameterError):
        composite([_splat(depth=2), _splat(depth=1)], (0, 0))


def test_occlusion_approaches_front_color():
    back = _splat(alpha=0.9, color=(0, 0, 1), depth=2)
    out = composite([_splat(alpha=0.99, color=(1, 0, 0), depth=1), back], (0, 0))
    np.testing.assert_allclose(out, [0.99, 0, 0.01 * 0.9], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 1.2)),
                min_size=0, max_size=8),
       st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)))
def test_composite_stays_in_unit_range(items, bg):
    splats = [_splat(alpha=a, color=(r, g, 0.3), depth=i) for i, (r, g, _, a) in enumerate(items)]
    out = composite(splats, (0, 0), bg)
    assert np.all(out >= -1e-12) and np.all(out <= 1 + 1e-12)


def test_sh_to_color():
    np.testing.assert_allclose(sh_to_color(np.zeros((1, 3))), [0.5, 0.5, 0.5])
    c = sh_to_color(np.array([[1.77245, 0, 0]]))
    assert c[0] == pytest.approx(1.0, abs=1e-4)
    sh = np.random.default_rng(0).normal(size=(1, 3))
    np.testing.assert_array_equal(sh_to_color(sh, [1, 0, 0]), sh_to_color(sh, [0, 0, 1]))


def test_render_empty_is_background():
    img = render(GaussianCloud.empty(), front_camera(8), (0.2, 0.4, 0.6))
    np.testing.assert_allclose(img, np.broadcast_to([0.2, 0.4, 0.6], (8, 8, 3)), atol=1e-7)


def test_render_single_opaque():
    cloud = GaussianCloud.from_gaussians([_gauss([0, 0, 0], sigma=0.3, rgb=(1, 0, 0))])
    img = render(cloud, front_camera(16, focal=1.5), (1.0, 1.0, 1.0))
    np.testing.assert_allclose(img[8, 8], [ALPHA_MAX + (1 - ALPHA_MAX), 1 - ALPHA_MAX, 1 - ALPHA_MAX],
                               atol=0.05)
    np.testing.assert_allclose(img[0, 0], [1, 1, 1], atol=1e-6)


def test_render_is_pure():
    cloud, cam = random_cloud(20, seed=3), front_camera(24)
    assert np.array_equal(render(cloud, cam), render(cloud, cam))


def test_tiled_render_equals_dense():
    cloud, cam = random_cloud(40, seed=5, spread=1.0, scale=(0.02, 0.4)), front_camera(40)
    g = GaussianTensors.from_cloud(cloud, dtype=torch.float64)
    tiled = render_tensors(g, cam, (0.1, 0.2, 0.3))
    proj = project_tensors(g, cam)
    order = sorted_visible(proj)
    alpha, _, _ = splat_alpha(pixel_centers(cam, torch.float64), proj["mean2d"][order],
                              proj["conic"][order], proj["opacity"][order])
    dense, *_ = blend(alpha, proj["color"][order], torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
    np.testing.assert_allclose(tiled.detach().numpy().reshape(-1, 3), dense.numpy(), atol=1e-12)


def test_render_gradients_exist_for_every_group():
    cloud, cam = random_cloud(5, seed=1), front_camera(8)
    g = GaussianTensors.from_cloud(cloud, dtype=torch.float64, requires_grad=True)
    render_tensors(g, cam).mean().backward()
    for t in g:
        assert t.grad is not None and torch.isfinite(t.grad).all() and t.grad.abs().sum() > 0


def test_camera_file_round_trip(tmp_path):
    cams = [front_camera(8), Camera.look_at((3, 1, 1), (0, 0, 0), (0, 0, -1), 9, 9, 8, 8)]
    save_cameras(cams, tmp_path / "c.json")
    assert load_cameras(tmp_path / "c.json") == cams


def test_camera_validation():
    with pytest.raises(InvalidParameterError):
        Camera(0, 1, 0, 0, 4, 4)
    with pytest.raises(InvalidParameterError):
        Camera(1, 1, 0, 0, 0, 4)
