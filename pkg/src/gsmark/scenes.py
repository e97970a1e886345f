"""Procedural toy scenes and a fixed-count photometric fitter."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator

from gsmark.cloud import GaussianCloud, load_ply, save_ply
from gsmark.imageio import load_png, save_png
from gsmark.metrics import psnr
from gsmark.optim import exp_decay_lambda
from gsmark.render import Camera, GaussianTensors, load_cameras, render, render_tensors, save_cameras
from gsmark.validation import InvalidParameterError, check_is_fitted

log = logging.getLogger(__name__)

__all__ = ["ToyScene", "make_toy_scene", "ring_cameras", "heldout_cameras", "fit_cloud", "CloudFitter",
           "save_scene", "load_scene"]

SCENE_BACKGROUND = (1.0, 1.0, 1.0)
RING_RADIUS = 4.0
RING_HEIGHT = 1.2
FOCAL_FACTOR = 1.25  # focal length in units of image width
# held-out azimuth offset from the nearest training view, in view spacings
HELDOUT_OFFSET = 0.12


@dataclass
class ToyScene:
    gt_cloud: GaussianCloud
    cameras: list
    target_images: list
    heldout_cameras: list = field(default_factory=list)
    heldout_images: list = field(default_factory=list)
    background: tuple = SCENE_BACKGROUND


def ring_cameras(n_views: int, resolution: int, offset: float = 0.0,
                 radius: float = RING_RADIUS, height: float = RING_HEIGHT) -> list[Camera]:
    """Cameras evenly spaced on a horizontal ring, all looking at the origin."""
    f = FOCAL_FACTOR * resolution
    cams = []
    for k in range(n_views):
        phi = 2.0 * np.pi * (k + offset) / n_views
        eye = (radius * np.cos(phi), radius * np.sin(phi), height)
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, -1.0), f, f,
                                   resolution, resolution))
    return cams


def heldout_cameras(n_views: int, resolution: int, n_heldout: int,
                    offset: float = HELDOUT_OFFSET) -> list[Camera]:
    out = []
    for i in range(n_heldout):
        k = (i * n_views) // max(n_heldout, 1)
        sign = 1.0 if i % 2 == 0 else -1.0
        out.append(ring_cameras(n_views, resolution, offset=sign * offset)[k])
    return out


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_toy_scene(seed: int = 0, n_gaussians: int = 500, n_views: int = 8,
                   resolution: int = 64, n_heldout: int = 2, sh_degree: int = 0) -> ToyScene:
    """Sphere shell plus interior clutter, seen from a ring of cameras.

    Held-out cameras sit on the same ring, rotated ``HELDOUT_OFFSET`` view
    spacings (alternately clockwise and counter-clockwise) away from training
    views spread evenly around the ring.
    """
    if n_gaussians < 10:
        raise InvalidParameterError("n_gaussians must be >= 10")
    if n_views < 4:
        raise InvalidParameterError("n_views must be >= 4")
    rng = np.random.default_rng(seed)
    n_shell = int(round(0.7 * n_gaussians))
    n_inner = n_gaussians - n_shell
    shell = rng.normal(size=(n_shell, 3))
    shell /= np.linalg.norm(shell, axis=1, keepdims=True)
    # squash the shell a little so silhouettes differ between views
    shell *= np.array([1.0, 0.8, 0.9])
    inner = rng.uniform(-1, 1, size=(n_inner * 3, 3))
    inner = inner[np.linalg.norm(inner, axis=1) < 1][:n_inner] * 0.6
    positions = np.concatenate([shell, inner])

    # smooth colour field over direction plus per-Gaussian jitter
    unit = positions / np.maximum(np.linalg.norm(positions, axis=1, keepdims=True), 1e-6)
    base = 0.5 + 0.4 * np.stack([np.sin(2.5 * unit[:, 0] + 1.0),
                                 np.cos(3.0 * unit[:, 1]),
                                 np.sin(2.0 * unit[:, 2] - 0.5)], axis=1)
    rgb = np.clip(base + rng.normal(scale=0.12, size=base.shape), 0.05, 0.95)
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n_gaussians, k, 3))
    sh[:, 0, :] = (rgb - 0.5) / 0.28209479177387814
    if k > 1:
        sh[:, 1:, :] = rng.normal(scale=0.05, size=(n_gaussians, k - 1, 3))

    scale = rng.uniform(0.05, 0.14, size=(n_gaussians, 1)) * rng.uniform(0.5, 1.5, size=(n_gaussians, 3))
    cloud = GaussianCloud(positions, _random_quats(rng, n_gaussians), np.log(scale), sh,
                          rng.uniform(0.5, 3.0, size=n_gaussians), sh_degree=sh_degree)
    cams = ring_cameras(n_views, resolution)
    held = heldout_cameras(n_views, resolution, n_heldout)
    targets = [render(cloud, c, SCENE_BACKGROUND) for c in cams]
    held_imgs = [render(cloud, c, SCENE_BACKGROUND) for c in held]
    return ToyScene(cloud, cams, targets, held, held_imgs)


def save_scene(scene: ToyScene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_cameras(scene.cameras, d / "cameras.json")
    save_cameras(scene.heldout_cameras, d / "heldout_cameras.json")
    for i, img in enumerate(scene.target_images):
        save_png(img, d / f"target_{i:03d}.png")
    for i, img in enumerate(scene.heldout_images):
        save_png(img, d / f"heldout_{i:03d}.png")
    np.savez(d / "targets.npz", train=np.stack(scene.target_images),
             heldout=np.stack(scene.heldout_images) if scene.heldout_images else np.zeros((0,)))
    save_ply(scene.gt_cloud, d / "gt.ply")


def load_scene(directory) -> ToyScene:
    d = Path(directory)
    arrays = np.load(d / "targets.npz")
    held = list(arrays["heldout"]) if arrays["heldout"].ndim == 4 else []
    return ToyScene(load_ply(d / "gt.ply"), load_cameras(d / "cameras.json"),
                    list(arrays["train"]), load_cameras(d / "heldout_cameras.json"), held)


# ------------------------------------------------------------------ fitter

FIT_LR = {"means": 2e-3, "quats": 5e-3, "log_scales": 1e-2, "sh": 2e-2, "opacity_logits": 5e-2}


def fit_cloud(targets: Sequence[np.ndarray], cameras: Sequence[Camera], n_init: int = 500,
              steps: int = 2000, seed: int = 0, init: GaussianCloud | None = None,
              background=SCENE_BACKGROUND, init_radius: float = 1.1, sh_degree: int = 0,
              views_per_step: int = 1, lr_scale: float = 1.0):
    """Fit a fixed-size cloud to target images by photometric squared error.

    Returns ``(cloud, info)`` where ``info`` holds the per-step loss list
    and the final per-view PSNR.
    """
    if len(targets) != len(cameras) or not cameras:
        raise InvalidParameterError("targets and cameras must be non-empty and aligned")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    if init is None:
        pos = rng.uniform(-1, 1, size=(n_init * 3, 3))
        pos = pos[np.linalg.norm(pos, axis=1) < 1][:n_init] * init_radius
        k = (sh_degree + 1) ** 2
        sh = np.zeros((n_init, k, 3))
        sh[:, 0, :] = rng.normal(scale=0.3, size=(n_init, 3))
        init = GaussianCloud(pos, _random_quats(rng, n_init),
                             np.full((n_init, 3), np.log(0.08)), sh,
                             np.zeros(n_init), sh_degree=sh_degree)
    params = GaussianTensors.from_cloud(init, requires_grad=True)
    opt = torch.optim.Adam(
        [{"params": [t], "lr": FIT_LR[name] * lr_scale} for name, t in params._asdict().items()],
        betas=(0.9, 0.999), eps=1e-15)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, exp_decay_lambda(steps, 0.1))
    target_t = [torch.as_tensor(np.asarray(t, dtype=np.float32)) for t in targets]
    losses = []
    for step in range(steps):
        views = rng.choice(len(cameras), size=min(views_per_step, len(cameras)), replace=False)
        loss = sum(((render_tensors(params, cameras[v], background) - target_t[v]) ** 2).mean()
                   for v in views) / len(views)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"fit diverged at step {step}: loss={loss.item()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 500 == 0:
            log.info("fit step %d loss %.6f", step, loss.item())
    cloud = params.to_cloud(sh_degree)
    view_psnr = [psnr(render(cloud, c, background), t) for c, t in zip(cameras, targets)]
    return cloud, {"losses": losses, "psnr": view_psnr}


class CloudFitter(BaseEstimator):
    """Estimator wrapper around :func:`fit_cloud`."""

    def __init__(self, n_init=500, steps=2000, seed=0, background=SCENE_BACKGROUND,
                 views_per_step=1):
        self.n_init = n_init
        self.steps = steps
        self.seed = seed
        self.background = background
        self.views_per_step = views_per_step

    def fit(self, targets, cameras, init=None):
        self.cloud_, info = fit_cloud(targets, cameras, self.n_init, self.steps, self.seed,
                                      init=init, background=self.background,
                                      views_per_step=self.views_per_step)
        self.losses_ = info["losses"]
        self.psnr_ = info["psnr"]
        return self

    def predict(self, cameras) -> list[np.ndarray]:
        check_is_fitted(self, "cloud_")
        return [render(self.cloud_, c, self.background) for c in cameras]
