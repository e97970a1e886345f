"""End-to-end helpers shared by the command line and the experiments."""

from __future__ import annotations

import numpy as np

from gsmark.cloud import GaussianCloud, Origin, union
from gsmark.distort2d import DistortionSpec2D, distort2d
from gsmark.fisher import UncertaintyEstimator
from gsmark.marker import EmbedConfig, densify, embed
from gsmark.message import Message
from gsmark.metrics import MetricsReport, bit_accuracy, geometry_diff, psnr, ssim
from gsmark.render import render
from gsmark.wm2d import decode2d
from gsmark.wm3d import DistortionSpec3D, distort_cloud, evaluate3d

__all__ = ["ATTACKS_2D", "watermark", "evaluate_2d", "cross_domain_2d", "build_report"]

# image-table columns and the attack string behind each
ATTACKS_2D = {"None": "none", "Noise": "noise2d:0.1", "JPEG": "jpeg:50", "Scaling": "scale:0.25",
              "Blur": "blur:0.1"}


def watermark(cloud: GaussianCloud, cameras, decoder, message: Message, multiplier: float = 1.0,
              cfg: EmbedConfig | None = None, seed: int = 0, opacity_factor: float = 1.0,
              uncertainty: UncertaintyEstimator | None = None):
    """Uncertainty -> densify -> embed. Returns ``(watermarked, result, indices)``."""
    cfg = cfg or EmbedConfig(seed=seed)
    original = cloud.filter(Origin.ORIGINAL)
    if uncertainty is None:
        uncertainty = UncertaintyEstimator(multiplier=multiplier, background=cfg.background)
        uncertainty.fit(original, cameras)
    idx = uncertainty.select(multiplier)
    markers = densify(original, idx, seed=seed, opacity_factor=opacity_factor)
    result = embed(original, markers, decoder, message, cameras, cfg)
    return union(original, result.markers), result, idx


def evaluate_2d(decoder, images, message: Message, attacks=None, n_seeds: int = 3) -> dict:
    """Mean bit accuracy per attack column over images x seeds."""
    attacks = ATTACKS_2D if attacks is None else attacks
    out = {}
    for col, text in attacks.items():
        spec = DistortionSpec2D.parse(text)
        seeds = range(1 if spec.kind in ("none", "blur", "jpeg", "scale") else n_seeds)
        accs = [bit_accuracy(decode2d(decoder, distort2d(img, spec, seed=[i, s])), message.bits)
                for i, img in enumerate(images) for s in seeds]
        out[col] = float(np.mean(accs))
    return out


def cross_domain_2d(decoder, cloud: GaussianCloud, cameras, message: Message, attack: str,
                    background, n_resamples: int = 5, seed: int = 0) -> float:
    """2D decoder accuracy on renders of a cloud after a 3D attack."""
    spec = DistortionSpec3D.parse(attack, cloud.bounding_diagonal())
    accs = []
    for r in range(n_resamples):
        attacked = distort_cloud(cloud, spec, np.random.default_rng([seed, r]))
        accs += [bit_accuracy(decode2d(decoder, render(attacked, c, background)), message.bits)
                 for c in cameras]
    return float(np.mean(accs))


def build_report(original: GaussianCloud, watermarked: GaussianCloud, cameras, decoder2d,
                 message: Message, background, decoder3d=None, n_resamples: int = 20,
                 k: int = 1024, seed: int = 0, attacks2d=None, attacks3d=None) -> MetricsReport:
    """Image-table and Gaussian-table metrics for one watermarked cloud.

    Quality and accuracy are averaged over ``cameras`` (normally held-out views).
    """
    clean = [render(original, c, background) for c in cameras]
    marked = [render(watermarked, c, background) for c in cameras]
    geo = geometry_diff(original, watermarked)
    report = MetricsReport(
        psnr=float(np.mean([psnr(a, b) for a, b in zip(marked, clean)])),
        ssim=float(np.mean([ssim(a, b) for a, b in zip(marked, clean)])),
        bit_accuracy=float(np.mean([bit_accuracy(decode2d(decoder2d, b), message.bits)
                                    for b in marked])),
        l1diff=geo["l1diff"], snr_geom=geo["snr_geom"],
        accuracy_2d=evaluate_2d(decoder2d, marked, message, attacks2d),
    )
    report.notes.append(f"geometry mode: {geo['mode']}")
    if decoder3d is not None:
        report.accuracy_3d = evaluate3d(decoder3d, watermarked, message, attacks3d,
                                        n_resamples=n_resamples, k=k, seed=seed,
                                        scene_diag=original.bounding_diagonal())
    return report
