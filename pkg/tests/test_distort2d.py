import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gsmark.distort2d import (BLUR_SIGMA_DIVISOR, DistortionSpec2D, diff_jpeg, distort2d, real_jpeg,
                              random_affine, sample_photometric_spec, sample_training_spec)
from gsmark.metrics import psnr
from gsmark.validation import InvalidParameterError

img = np.random.default_rng(0).uniform(size=(32, 32, 3)).astype(np.float32)


def test_parse():
    assert DistortionSpec2D.parse("noise2d:0.1") == DistortionSpec2D("noise", 0.1)
    assert DistortionSpec2D.parse("jpeg:50") == DistortionSpec2D("jpeg", 50)
    assert DistortionSpec2D.parse("rotate2d:pi/12").param == pytest.approx(np.pi / 12)
    assert DistortionSpec2D.parse("none") == DistortionSpec2D()


@pytest.mark.parametrize("kind,param", [("noise", -0.1), ("jpeg", 0), ("jpeg", 101), ("scale", 0),
                                        ("scale", 1.5), ("blur", -1), ("crop", 0), ("bogus", 1)])
def test_invalid(kind, param):
    with pytest.raises(InvalidParameterError):
        DistortionSpec2D(kind, param)


def test_identities():
    assert distort2d(img, DistortionSpec2D()) is img
    np.testing.assert_array_equal(distort2d(img, DistortionSpec2D("noise", 0.0)), img)


def test_jpeg_flat_gray():
    gray = np.full((32, 32, 3), 0.5, np.float32)
    assert psnr(distort2d(gray, DistortionSpec2D("jpeg", 50)), gray) >= 40


def test_noise_statistics():
    mid = np.full((64, 64, 3), 0.5, np.float32)
    out = distort2d(mid, DistortionSpec2D("noise", 0.1), seed=3)
    assert np.std(out - mid) == pytest.approx(0.1, rel=0.05)
    assert out.min() >= 0 and out.max() <= 1


def test_seeded():
    s = DistortionSpec2D("noise", 0.1)
    np.testing.assert_array_equal(distort2d(img, s, seed=1), distort2d(img, s, seed=1))
    assert not np.array_equal(distort2d(img, s, seed=1), distort2d(img, s, seed=2))


def test_scale_removes_detail():
    out = distort2d(img, DistortionSpec2D("scale", 0.25))
    assert out.shape == img.shape and np.std(out) < np.std(img)
    np.testing.assert_allclose(distort2d(img, DistortionSpec2D("scale", 1.0)), img, atol=1e-6)


def test_blur_sigma_mapping():
    impulse = np.zeros((61, 61, 3), np.float32)
    impulse[30, 30] = 1.0
    out = distort2d(impulse, DistortionSpec2D("blur", 0.5))[..., 0]
    ys, xs = np.mgrid[:61, :61]
    var = (out * (xs - 30) ** 2).sum() / out.sum()
    assert np.sqrt(var) == pytest.approx(0.5 * 61 / BLUR_SIGMA_DIVISOR, rel=0.05)


def test_crop_and_rotate_keep_shape():
    for spec in (DistortionSpec2D("crop", 0.5), DistortionSpec2D("rotate", 0.3)):
        out = distort2d(img, spec, seed=0)
        assert out.shape == img.shape and np.isfinite(out).all()


def test_diff_jpeg_tracks_real_jpeg():
    u, v = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0.2, 0.8, 32))
    smooth = np.stack([u, v, np.full((32, 32), 0.4)], -1)
    x = torch.tensor(smooth, dtype=torch.float32).permute(2, 0, 1)[None]
    d, r = diff_jpeg(x, 50), real_jpeg(x, 50)
    assert float((d - r).abs().mean()) < 0.02


def test_diff_jpeg_is_differentiable():
    x = torch.tensor(img).permute(2, 0, 1)[None].requires_grad_(True)
    diff_jpeg(x, 50).sum().backward()
    assert torch.isfinite(x.grad).all() and x.grad.abs().sum() > 0


def test_random_affine_shape():
    x = torch.tensor(img).permute(2, 0, 1)[None].repeat(2, 1, 1, 1)
    out = random_affine(x, torch.Generator().manual_seed(0))
    assert out.shape == x.shape


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_training_specs_valid(seed):
    rng = np.random.default_rng(seed)
    spec = sample_training_spec(rng)
    assert spec.kind in ("none", "noise", "jpeg", "scale", "blur", "crop", "rotate")
    assert sample_photometric_spec(rng).kind in ("noise", "jpeg", "scale", "blur")
