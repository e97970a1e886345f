import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from gsmark.fisher import (ParamFisher, UncertaintyEstimator, UncertaintyMap, per_view_fisher,
                           select_high, threshold, total_uncertainty, uncertainty_heatmap)
from gsmark.render import Camera, GaussianTensors, blend, project_tensors, render_tensors, sorted_visible, \
    splat_alpha, pixel_centers
from gsmark.scenes import ring_cameras
from gsmark.validation import InvalidParameterError

from helpers import fd_fisher, front_camera, random_cloud


def test_matches_finite_differences():
    cloud, cam = random_cloud(3, seed=2, spread=0.4, scale=(0.1, 0.3)), front_camera(8)
    exact = per_view_fisher(cloud, cam).flat()
    oracle = fd_fisher(cloud, cam)
    scale = np.abs(oracle).max()
    np.testing.assert_allclose(exact, oracle, rtol=1e-2, atol=1e-2 * 1e-3 * scale)


def test_hutchinson_is_unbiased_ballpark():
    cloud, cam = random_cloud(3, seed=2, spread=0.4, scale=(0.1, 0.3)), front_camera(8)
    exact = per_view_fisher(cloud, cam).per_gaussian()
    approx = per_view_fisher(cloud, cam, method="hutchinson", n_probes=256, seed=0)
    assert approx.approximate
    np.testing.assert_allclose(approx.per_gaussian(), exact, rtol=0.5)


def test_culled_gaussian_is_zero():
    cloud = random_cloud(4, seed=1)
    far = cloud.replace(positions=np.vstack([cloud.positions[:3], [[0, 0, -10]]]))
    f = per_view_fisher(far, front_camera(8))
    assert np.all(f.flat()[3] == 0)
    assert total_uncertainty(far, [front_camera(8)]).u[3] == 0


def test_additive_over_views():
    cloud = random_cloud(12, seed=4, spread=0.8)
    cams = ring_cameras(4, 16, radius=3.0, height=0.5)
    a = total_uncertainty(cloud, cams[:2]).u
    b = total_uncertainty(cloud, cams[2:]).u
    np.testing.assert_allclose(total_uncertainty(cloud, cams).u, a + b, rtol=1e-12)


def test_entries_nonnegative():
    f = per_view_fisher(random_cloud(10, seed=7, spread=1.0), front_camera(16))
    assert np.all(f.flat() >= 0)


def test_doubling_resolution_never_decreases():
    cloud = random_cloud(3, seed=2, spread=0.3, scale=(0.08, 0.15))
    cam = front_camera(12)
    lo = per_view_fisher(cloud, cam).flat()
    hi = per_view_fisher(cloud, cam.scaled(2.0)).flat()
    assert np.all(hi >= lo * (1 - 1e-9))


def test_empty_view_set():
    with pytest.raises(InvalidParameterError):
        total_uncertainty(random_cloud(3), [])


def test_group_normalization():
    f = per_view_fisher(random_cloud(3, seed=2), front_camera(8))
    raw = f.per_gaussian(normalize=False)
    norm = f.per_gaussian(normalize=True)
    manual = sum(v.reshape(3, -1).sum(1) / v.reshape(3, -1).shape[1] for v in f.groups().values())
    np.testing.assert_allclose(norm, manual, rtol=1e-12)
    np.testing.assert_allclose(raw, f.flat().sum(1), rtol=1e-12)


def _footprint_energy(cloud, cams, bg):
    g = GaussianTensors.from_cloud(cloud, dtype=torch.float64)
    e = np.zeros(len(cloud))
    for cam in cams:
        proj = project_tensors(g, cam)
        order = sorted_visible(proj)
        alpha, _, _ = splat_alpha(pixel_centers(cam, torch.float64), proj["mean2d"][order],
                                  proj["conic"][order], proj["opacity"][order])
        _, w, _, _ = blend(alpha, proj["color"][order], torch.tensor(bg, dtype=torch.float64))
        e[order.numpy()] += (w ** 2).sum(0).numpy()
    return e


def test_ranking_follows_footprint_energy(toy_scene):
    cams = toy_scene.cameras[:4]
    u = total_uncertainty(toy_scene.gt_cloud, cams, toy_scene.background).u
    rho = spearmanr(u, _footprint_energy(toy_scene.gt_cloud, cams, toy_scene.background))[0]
    assert rho > 0.5


def test_threshold_and_selection():
    umap = UncertaintyMap(np.array([1.0, 2, 3, 6]))
    assert threshold(umap, 1.0) == 3.0
    assert list(select_high(umap, threshold(umap))) == [3]
    assert select_high(umap, 6.0).size == 0
    assert list(select_high(umap, 0.0)) == [0, 1, 2, 3]
    flat = UncertaintyMap(np.full(5, 2.0))
    assert threshold(flat, 0.5) == 1.0
    assert select_high(flat, threshold(flat, 0.5)).size == 5
    assert select_high(flat, threshold(flat, 1.0)).size == 0
    with pytest.raises(InvalidParameterError):
        threshold(umap, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=50), st.floats(0, 100), st.floats(0, 100))
def test_selection_monotone(u, t1, t2):
    umap = UncertaintyMap(np.array(u))
    lo, hi = sorted((t1, t2))
    assert set(select_high(umap, hi)) <= set(select_high(umap, lo))


def test_multiplier_counts_nondecreasing(toy_scene):
    est = UncertaintyEstimator().fit(toy_scene.gt_cloud, toy_scene.cameras[:3])
    counts = [len(est.select(m)) for m in (3.7, 1.0, 0.24, 0.13)]
    assert counts == sorted(counts)


def test_heatmap_range(toy_scene):
    cam = toy_scene.cameras[0]
    u = np.random.default_rng(0).uniform(size=len(toy_scene.gt_cloud))
    h = uncertainty_heatmap(toy_scene.gt_cloud, u, cam)
    assert h.shape == (cam.height, cam.width) and h.min() >= 0 and h.max() == pytest.approx(1.0)


def test_estimator_api(toy_scene):
    est = UncertaintyEstimator(multiplier=1.0)
    assert est.get_params()["multiplier"] == 1.0
    est.fit(toy_scene.gt_cloud, toy_scene.cameras[:2])
    assert est.transform(toy_scene.gt_cloud).shape == (len(toy_scene.gt_cloud),)
    assert np.array_equal(est.select(), est.selected_)
