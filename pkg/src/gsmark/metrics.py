"""Image quality, bit accuracy and geometry-difference metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity

from gsmark.validation import InvalidParameterError

__all__ = ["psnr", "ssim", "bit_accuracy", "geometry_diff", "MetricsReport", "PSNR_CAP", "SNR_CAP"]

PSNR_CAP = 99.0
SNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for [0, 1] images, capped at 99 dB."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ LUMA if img.ndim == 3 and img.shape[-1] == 3 else img


def ssim(a, b) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5) on the luma channel."""
    a, b = _same_shape(a, b)
    return float(structural_similarity(
        _gray(a), _gray(b), data_range=1.0, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, K1=0.01, K2=0.03))


def bit_accuracy(p, m) -> float:
    """Fraction of bits where ``p >= 0.5`` matches ``m``."""
    p = np.asarray(p, dtype=np.float64)
    m = np.asarray(m).astype(bool)
    if p.shape != m.shape:
        raise InvalidParameterError(f"shape mismatch: {p.shape} vs {m.shape}")
    return float(np.mean((p >= 0.5) == m))


def _snr(ref: np.ndarray, delta: np.ndarray) -> float:
    noise = float(np.sum(delta ** 2))
    if noise == 0.0:
        return SNR_CAP
    return float(min(SNR_CAP, 10.0 * np.log10(float(np.sum(ref ** 2)) / noise)))


def geometry_diff(original, watermarked) -> dict:
    """Position difference between a source cloud and its watermarked version.

    If ``watermarked`` carries origin flags, its ORIGINAL subset is compared
    row-by-row with ``original`` (``mode="flagged"``). Otherwise every
    watermarked point is matched to its nearest source point
    (``mode="nearest", approximate=True``).

    ``l1diff`` is the mean absolute difference over all coordinates.
    """
    from gsmark.cloud import Origin

    src = original.positions.astype(np.float64)
    flagged = watermarked.n_markers > 0 or len(watermarked) == len(original)
    if flagged:
        kept = watermarked.positions[watermarked.origin == Origin.ORIGINAL].astype(np.float64)
        if kept.shape != src.shape:
            raise InvalidParameterError(
                f"ORIGINAL subset has {len(kept)} Gaussians, source has {len(src)}")
        delta = kept - src
        return {"l1diff": float(np.mean(np.abs(delta))), "snr_geom": _snr(src, delta),
                "mode": "flagged", "approximate": False}
    wm = watermarked.positions.astype(np.float64)
    _, nn = cKDTree(src).query(wm)
    delta = wm - src[nn]
    return {"l1diff": float(np.mean(np.abs(delta))), "snr_geom": _snr(src[nn], delta),
            "mode": "nearest", "approximate": True}


@dataclass
class MetricsReport:
    """Evaluation summary laid out like the image and Gaussian result tables."""

    psnr: float | None = None
    ssim: float | None = None
    bit_accuracy: float | None = None
    l1diff: float | None = None
    snr_geom: float | None = None
    accuracy_2d: dict = field(default_factory=dict)
    accuracy_3d: dict = field(default_factory=dict)
    notes: list = field(default_factory=lambda: [
        "l1diff: mean |delta position| over all coordinates",
        "LPIPS not computed",
    ])

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["table", "column", "value"])
        for name in ("psnr", "ssim", "bit_accuracy", "l1diff", "snr_geom"):
            w.writerow(["summary", name, getattr(self, name)])
        for table, accs in (("images", self.accuracy_2d), ("gaussians", self.accuracy_3d)):
            for col, val in accs.items():
                w.writerow([table, col, val])
        return buf.getvalue()
