"""Laplace-style uncertainty from the diagonal Fisher information of renders.

With unit RGB covariance the Fisher block for parameter k of a view is
``sum over pixels and channels of (dI/dtheta_k)^2``. Per pixel, a Gaussian
enters the image only through its screen-space quantities (opacity logit,
2D mean, conic, colour), so the exact diagonal is assembled as
``diag(J^T G J)`` where ``G`` is a 9x9 per-Gaussian Gram matrix of the
per-pixel derivatives and ``J`` the Jacobian of those 9 quantities with
respect to the raw parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator

from gsmark.cloud import GaussianCloud
from gsmark.render import (
    ALPHA_MAX, ALPHA_MIN, TRANSMITTANCE_MIN, Camera, GaussianTensors, blend,
    project_tensors, render_tensors, sorted_visible, splat_alpha, tile_pixels, tiles,
)
from gsmark.validation import InvalidParameterError, as_generator, check_is_fitted, check_range

__all__ = [
    "GROUPS",
    "ParamFisher",
    "UncertaintyMap",
    "UncertaintyEstimator",
    "per_view_fisher",
    "total_uncertainty",
    "threshold",
    "select_high",
    "uncertainty_heatmap",
]

GROUPS = ("position", "rotation", "log_scale", "sh", "opacity")
N_LOCAL = 9  # opacity logit, mean2d (2), conic (3), rgb (3)


@dataclass
class ParamFisher:
    """Diagonal Fisher entries per Gaussian, split by parameter group."""

    position: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 4)
    log_scale: np.ndarray  # (N, 3)
    sh: np.ndarray  # (N, K, 3)
    opacity: np.ndarray  # (N,)
    approximate: bool = False

    def groups(self) -> dict:
        return {name: getattr(self, name) for name in GROUPS}

    def __add__(self, other: "ParamFisher") -> "ParamFisher":
        return ParamFisher(*(getattr(self, k) + getattr(other, k) for k in GROUPS),
                           approximate=self.approximate or other.approximate)

    def flat(self) -> np.ndarray:
        """(N, D) in the raw parameter order position, rotation, log_scale, sh, opacity."""
        n = self.position.shape[0]
        return np.concatenate([self.position, self.rotation, self.log_scale,
                               self.sh.reshape(n, -1), self.opacity[:, None]], axis=1)

    @classmethod
    def from_flat(cls, flat: np.ndarray, n_sh: int, approximate=False) -> "ParamFisher":
        n = flat.shape[0]
        return cls(flat[:, 0:3], flat[:, 3:7], flat[:, 7:10],
                   flat[:, 10:10 + 3 * n_sh].reshape(n, n_sh, 3), flat[:, -1],
                   approximate=approximate)

    def per_gaussian(self, normalize: bool = True) -> np.ndarray:
        """Sum of the group blocks per Gaussian.

        With ``normalize`` each group is divided by its parameter count so
        that no group dominates merely by size or unit choice.
        """
        n = self.position.shape[0]
        u = np.zeros(n, dtype=np.float64)
        for block in self.groups().values():
            block = block.reshape(n, -1)
            total = block.sum(axis=1)
            u += total / block.shape[1] if normalize else total
        return u


@dataclass
class UncertaintyMap:
    u: np.ndarray
    tau: float | None = None


def _local_coords(proj: dict, logits: torch.Tensor) -> torch.Tensor:
    return torch.cat([logits[:, None], proj["mean2d"], proj["conic"], proj["color"]], dim=1)


def local_jacobian(g: GaussianTensors, cam: Camera):
    """Per-Gaussian Jacobian (N, 9, D) of screen quantities w.r.t. raw params.

    Gaussians are independent, so one backward pass per local coordinate
    (summed over Gaussians) recovers every block of the block-diagonal
    Jacobian.
    """
    leaves = GaussianTensors(*(t.detach().clone().requires_grad_(True) for t in g))
    proj = project_tensors(leaves, cam)
    z = _local_coords(proj, leaves.opacity_logits)
    n = z.shape[0]
    rows = []
    for j in range(N_LOCAL):
        grads = torch.autograd.grad(z[:, j].sum(), list(leaves), retain_graph=True,
                                    allow_unused=True)
        grads = [torch.zeros_like(t) if gr is None else gr for gr, t in zip(grads, leaves)]
        rows.append(torch.cat([gr.reshape(n, -1) for gr in grads], dim=1))
    J = torch.stack(rows, dim=1)
    return J.detach(), {k: v.detach() for k, v in proj.items()}


def _accumulate_gram(proj: dict, cam: Camera, logits: torch.Tensor, background) -> torch.Tensor:
    dtype = logits.dtype
    n = logits.shape[0]
    gram = torch.zeros(n, N_LOCAL, N_LOCAL, dtype=dtype)
    bg = torch.as_tensor(np.asarray(background), dtype=dtype)
    order = sorted_visible(proj)
    sig = torch.sigmoid(logits)
    for rows, cols, idx in tiles(cam, proj, order):
        if idx.numel() == 0:
            continue
        pixels = tile_pixels(rows, cols, dtype)
        conic = proj["conic"][idx]
        alpha, raw, d = splat_alpha(pixels, proj["mean2d"][idx], conic, proj["opacity"][idx])
        keep = torch.cumprod(1.0 - alpha, dim=-1) >= TRANSMITTANCE_MIN
        alpha = alpha * keep
        colors = proj["color"][idx]
        _, weights, T_excl, T_final = blend(alpha, colors, bg)
        # colour accumulated strictly behind each splat, plus the background
        wc = weights[..., None] * colors
        behind = torch.flip(torch.cumsum(torch.flip(wc, [1]), dim=1), [1]) - wc
        behind = behind + T_final[:, None, None] * bg
        dC_dalpha = T_excl[..., None] * colors - behind / (1.0 - alpha)[..., None]
        active = keep & (raw >= ALPHA_MIN) & (raw <= ALPHA_MAX)
        a = dC_dalpha * (alpha * active)[..., None]  # (P, n, 3), times dlog(alpha)/dz below
        dx, dy = d[..., 0], d[..., 1]
        geo = torch.stack([
            (1.0 - sig[idx]).expand_as(dx),
            conic[:, 0] * dx + conic[:, 1] * dy,
            conic[:, 1] * dx + conic[:, 2] * dy,
            -0.5 * dx * dx,
            -dx * dy,
            -0.5 * dy * dy,
        ], dim=-1)
        block = torch.zeros(idx.numel(), N_LOCAL, N_LOCAL, dtype=dtype)
        block[:, :6, :6] = torch.einsum("pn,pnj,pnk->njk", (a * a).sum(-1), geo, geo)
        cross = torch.einsum("pnc,pn,pnj->njc", a, weights, geo)
        block[:, :6, 6:] = cross
        block[:, 6:, :6] = cross.transpose(1, 2)
        wsq = (weights * weights).sum(0)
        block[:, 6:, 6:] = wsq[:, None, None] * torch.eye(3, dtype=dtype)
        gram.index_add_(0, idx, block)
    return gram


def per_view_fisher(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0),
                    method: str = "exact", n_probes: int = 64, seed=0) -> ParamFisher:
    """Diagonal Fisher of one view's render for every parameter of ``cloud``.

    ``method="exact"`` sums squared per-pixel gradients through the Gram
    construction; ``method="hutchinson"`` averages squared gradients of
    ``n_probes`` random-sign pixel weightings (unbiased, approximate).
    """
    g = GaussianTensors.from_cloud(cloud, dtype=torch.float64)
    n_sh = cloud.sh.shape[1]
    if len(cloud) == 0:
        return ParamFisher.from_flat(np.zeros((0, 11 + 3 * n_sh)), n_sh)
    if method == "exact":
        J, proj = local_jacobian(g, cam)
        with torch.no_grad():
            gram = _accumulate_gram(proj, cam, g.opacity_logits, background)
            flat = torch.einsum("nad,nab,nbd->nd", J, gram, J)
        return ParamFisher.from_flat(flat.clamp_min(0.0).numpy(), n_sh)
    if method == "hutchinson":
        gen = torch.Generator().manual_seed(int(as_generator(seed).integers(2**31)))
        leaves = GaussianTensors(*(t.requires_grad_(True) for t in g))
        img = render_tensors(leaves, cam, background)
        acc = torch.zeros(len(cloud), 11 + 3 * n_sh, dtype=torch.float64)
        for _ in range(n_probes):
            r = torch.randint(0, 2, img.shape, generator=gen, dtype=torch.float64) * 2 - 1
            grads = torch.autograd.grad((img * r).sum(), list(leaves), retain_graph=True)
            acc += torch.cat([gr.reshape(len(cloud), -1) for gr in grads], dim=1) ** 2
        return ParamFisher.from_flat((acc / n_probes).numpy(), n_sh, approximate=True)
    raise InvalidParameterError(f"unknown Fisher method {method!r}")


def total_uncertainty(cloud: GaussianCloud, cams: Sequence[Camera], background=(0.0, 0.0, 0.0),
                      normalize: bool = True, method: str = "exact") -> UncertaintyMap:
    """Per-Gaussian uncertainty summed over views and parameter groups."""
    cams = list(cams)
    if not cams:
        raise InvalidParameterError("total_uncertainty needs at least one view")
    u = np.zeros(len(cloud), dtype=np.float64)
    for cam in cams:
        u += per_view_fisher(cloud, cam, background, method=method).per_gaussian(normalize)
    return UncertaintyMap(u)


def threshold(umap: UncertaintyMap, multiplier: float = 1.0) -> float:
    """Multiple of the mean uncertainty; 1.0 gives the default threshold."""
    check_range(multiplier, "multiplier", low=0.0, low_open=True)
    return float(multiplier * np.mean(umap.u)) if len(umap.u) else 0.0


def select_high(umap: UncertaintyMap, tau: float) -> np.ndarray:
    """Indices with uncertainty strictly above ``tau``, ascending."""
    return np.flatnonzero(np.asarray(umap.u) > tau)


def uncertainty_heatmap(cloud: GaussianCloud, u: np.ndarray, cam: Camera) -> np.ndarray:
    """Per-pixel blend-weighted uncertainty, scaled to [0, 1] (H, W)."""
    g = GaussianTensors.from_cloud(cloud, dtype=torch.float64)
    values = torch.as_tensor(np.asarray(u, dtype=np.float64))
    heat = torch.zeros(cam.height, cam.width, dtype=torch.float64)
    with torch.no_grad():
        proj = project_tensors(g, cam)
        order = sorted_visible(proj)
        for rows, cols, idx in tiles(cam, proj, order):
            if idx.numel() == 0:
                continue
            pixels = tile_pixels(rows, cols, torch.float64)
            alpha, _, _ = splat_alpha(pixels, proj["mean2d"][idx], proj["conic"][idx],
                                      proj["opacity"][idx])
            _, weights, _, _ = blend(alpha, proj["color"][idx], torch.zeros(3, dtype=torch.float64))
            heat[rows[0]:rows[1], cols[0]:cols[1]] = (weights @ values[idx]).reshape(
                rows[1] - rows[0], cols[1] - cols[0])
    peak = float(heat.max())
    return (heat / peak).numpy() if peak > 0 else heat.numpy()


class UncertaintyEstimator(BaseEstimator):
    """Estimate per-Gaussian uncertainty and pick the densification set.

    Parameters
    ----------
    multiplier : float
        Threshold as a multiple of the mean uncertainty.
    normalize_groups : bool
        Divide each parameter group by its size before summing.
    method : {"exact", "hutchinson"}
    background : tuple of float
    """

    def __init__(self, multiplier=1.0, normalize_groups=True, method="exact",
                 background=(1.0, 1.0, 1.0)):
        self.multiplier = multiplier
        self.normalize_groups = normalize_groups
        self.method = method
        self.background = background

    def fit(self, cloud: GaussianCloud, cameras: Sequence[Camera]):
        umap = total_uncertainty(cloud, cameras, self.background,
                                 normalize=self.normalize_groups, method=self.method)
        umap.tau = threshold(umap, self.multiplier)
        self.uncertainty_ = umap.u
        self.threshold_ = umap.tau
        self.selected_ = select_high(umap, umap.tau)
        self.n_gaussians_ = len(cloud)
        return self

    def transform(self, cloud: GaussianCloud) -> np.ndarray:
        check_is_fitted(self, "uncertainty_")
        if len(cloud) != self.n_gaussians_:
            raise InvalidParameterError("cloud size differs from the fitted cloud")
        return self.uncertainty_

    def select(self, multiplier: float | None = None) -> np.ndarray:
        check_is_fitted(self, "uncertainty_")
        if multiplier is None:
            return self.selected_
        umap = UncertaintyMap(self.uncertainty_)
        return select_high(umap, threshold(umap, multiplier))
