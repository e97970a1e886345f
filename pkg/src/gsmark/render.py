"""Differentiable pinhole splatting renderer.

Pixels are grouped into 16x16 tiles, and a tile skips only those splats whose
alpha is provably below the 1/255 cutoff everywhere inside it. The output is
therefore identical to evaluating every pixel against every visible splat.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from gsmark.cloud import GaussianCloud, Gaussian
from gsmark.validation import InvalidParameterError

__all__ = [
    "Camera",
    "Splat2D",
    "GaussianTensors",
    "CULLED",
    "project",
    "project_tensors",
    "alpha_at",
    "composite",
    "sh_to_color",
    "eval_sh",
    "render",
    "render_tensors",
    "save_cameras",
    "load_cameras",
]

NEAR_PLANE = 0.2
LOWPASS_FLOOR = 0.3  # px^2 added to the projected covariance diagonal
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
FOOTPRINT_SIGMAS = 3.0
TILE = 16

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

CULLED = None


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera.

    Camera axes follow the OpenCV convention (x right, y down, z forward).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise InvalidParameterError("image size must be positive")
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", tuple(map(tuple, R.tolist())))
        object.__setattr__(self, "translation", tuple(t.tolist()))

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   width, height, R, -R @ eye)

    def scaled(self, factor: float) -> "Camera":
        """Same pose at ``factor`` times the resolution."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      int(round(self.width * factor)), int(round(self.height * factor)),
                      self.rotation, self.translation)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": [v for row in self.rotation for v in row],
            "translation": list(self.translation),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]),
                   np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                   np.asarray(d["translation"], dtype=np.float64))


def save_cameras(cameras: Sequence[Camera], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path) -> list[Camera]:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha_base: float


class GaussianTensors(NamedTuple):
    """Torch view of a cloud's raw parameters (the optimizable leaves)."""

    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    sh: torch.Tensor
    opacity_logits: torch.Tensor

    @classmethod
    def from_cloud(cls, cloud: GaussianCloud, dtype=torch.float32, requires_grad=False):
        def leaf(a):
            t = torch.tensor(np.asarray(a), dtype=dtype)
            return t.requires_grad_(requires_grad)
        return cls(leaf(cloud.positions), leaf(cloud.rotations), leaf(cloud.log_scales),
                   leaf(cloud.sh), leaf(cloud.opacity_logits))

    @staticmethod
    def cat(parts: Sequence["GaussianTensors"]) -> "GaussianTensors":
        return GaussianTensors(*(torch.cat(ts, dim=0) for ts in zip(*parts)))

    def to_cloud(self, sh_degree: int, origin=None) -> GaussianCloud:
        arr = [t.detach().cpu().numpy().astype(np.float32) for t in self]
        return GaussianCloud(*arr, origin=origin, sh_degree=sh_degree)


# ----------------------------------------------------------------- colour

def eval_sh(sh: torch.Tensor, dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Evaluate real spherical harmonics; ``sh`` is (..., K, 3), ``dirs`` (..., 3)."""
    result = SH_C0 * sh[..., 0, :]
    if degree < 1:
        return result
    x, y, z = dirs[..., 0:1], dirs[..., 1:2], dirs[..., 2:3]
    result = result - SH_C1 * y * sh[..., 1, :] + SH_C1 * z * sh[..., 2, :] - SH_C1 * x * sh[..., 3, :]
    if degree < 2:
        return result
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result = (result
              + SH_C2[0] * xy * sh[..., 4, :]
              + SH_C2[1] * yz * sh[..., 5, :]
              + SH_C2[2] * (2.0 * zz - xx - yy) * sh[..., 6, :]
              + SH_C2[3] * xz * sh[..., 7, :]
              + SH_C2[4] * (xx - yy) * sh[..., 8, :])
    if degree < 3:
        return result
    return (result
            + SH_C3[0] * y * (3.0 * xx - yy) * sh[..., 9, :]
            + SH_C3[1] * xy * z * sh[..., 10, :]
            + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[..., 11, :]
            + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[..., 12, :]
            + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[..., 13, :]
            + SH_C3[5] * z * (xx - yy) * sh[..., 14, :]
            + SH_C3[6] * x * (xx - 3.0 * yy) * sh[..., 15, :])


def _sh_degree_of(sh) -> int:
    return int(round(np.sqrt(sh.shape[-2]))) - 1


def sh_to_color(sh, view_dir=None) -> np.ndarray:
    """RGB in [0, 1] from one Gaussian's SH coefficients ``(K, 3)``."""
    sh_t = torch.as_tensor(np.asarray(sh, dtype=np.float64))
    degree = _sh_degree_of(sh_t)
    d = torch.zeros(3, dtype=torch.float64) if view_dir is None else \
        torch.as_tensor(np.asarray(view_dir, dtype=np.float64))
    return torch.clamp(eval_sh(sh_t, d, degree) + 0.5, 0.0, 1.0).numpy()


# ------------------------------------------------------------- projection

def _quat_to_rot(q: torch.Tensor) -> torch.Tensor:
    q = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    R = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def project_tensors(g: GaussianTensors, cam: Camera) -> dict:
    """Project every Gaussian to its screen-space splat.

    Returns a dict of per-Gaussian tensors: ``mean2d`` (N, 2), ``cov2d``
    (N, 2, 2), ``conic`` (N, 3) holding the inverse covariance entries
    (a, b, c) for ``[[a, b], [b, c]]``, ``depth``, ``color`` (clamped RGB),
    ``opacity`` and the boolean ``visible`` mask.
    """
    dtype = g.means.dtype
    W = torch.as_tensor(cam.R, dtype=dtype)
    t = torch.as_tensor(cam.t, dtype=dtype)
    p_cam = g.means @ W.T + t
    tz_raw = p_cam[..., 2]
    tz = torch.where(tz_raw > NEAR_PLANE, tz_raw, torch.full_like(tz_raw, NEAR_PLANE))
    tx, ty = p_cam[..., 0], p_cam[..., 1]
    u = cam.fx * tx / tz + cam.cx
    v = cam.fy * ty / tz + cam.cy
    mean2d = torch.stack([u, v], dim=-1)

    zero = torch.zeros_like(tz)
    J = torch.stack([
        torch.stack([cam.fx / tz, zero, -cam.fx * tx / (tz * tz)], dim=-1),
        torch.stack([zero, cam.fy / tz, -cam.fy * ty / (tz * tz)], dim=-1),
    ], dim=-2)
    R = _quat_to_rot(g.quats)
    s2 = torch.exp(2.0 * g.log_scales)
    cov3d = (R * s2[..., None, :]) @ R.transpose(-1, -2)
    T = J @ W
    cov2d = T @ cov3d @ T.transpose(-1, -2)
    eye = torch.eye(2, dtype=dtype)
    cov2d = cov2d + LOWPASS_FLOOR * eye
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)

    cam_center = torch.as_tensor(cam.center, dtype=dtype)
    dirs = g.means - cam_center
    dirs = dirs / torch.linalg.vector_norm(dirs, dim=-1, keepdim=True).clamp_min(1e-12)
    degree = _sh_degree_of(g.sh)
    color = torch.clamp(eval_sh(g.sh, dirs, degree) + 0.5, 0.0, 1.0)
    opacity = torch.sigmoid(g.opacity_logits)

    with torch.no_grad():
        lam_max = 0.5 * (a + c) + torch.sqrt((0.25 * (a - c) ** 2 + b * b).clamp_min(0.0))
        radius = FOOTPRINT_SIGMAS * torch.sqrt(lam_max)
        visible = (
            (tz_raw > NEAR_PLANE)
            & (u + radius > 0) & (u - radius < cam.width)
            & (v + radius > 0) & (v - radius < cam.height)
        )
    return dict(mean2d=mean2d, cov2d=cov2d, conic=conic, depth=tz_raw,
                color=color, opacity=opacity, visible=visible)


def project(g: Gaussian, cam: Camera):
    """Project a single Gaussian; returns :class:`Splat2D` or ``CULLED``."""
    gt = GaussianTensors(*(torch.as_tensor(np.asarray(a, dtype=np.float64))[None] for a in
                           (g.position, g.rotation, g.log_scale, g.sh, [g.opacity_logit])))
    out = project_tensors(gt, cam)
    if not bool(out["visible"][0]):
        return CULLED
    return Splat2D(out["mean2d"][0].numpy(), out["cov2d"][0].numpy(), float(out["depth"][0]),
                   out["color"][0].numpy(), float(out["opacity"][0]))


# ------------------------------------------------------------ compositing

def pixel_centers(cam: Camera, dtype=torch.float32) -> torch.Tensor:
    """(H*W, 2) pixel-centre coordinates in row-major order."""
    ys, xs = torch.meshgrid(torch.arange(cam.height, dtype=dtype) + 0.5,
                            torch.arange(cam.width, dtype=dtype) + 0.5, indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def splat_alpha(pixels, mean2d, conic, opacity):
    """Per-pixel, per-splat alpha with clamp and cutoff; returns (alpha, raw, d)."""
    d = pixels[:, None, :] - mean2d[None, :, :]
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (conic[:, 0] * dx * dx + 2.0 * conic[:, 1] * dx * dy + conic[:, 2] * dy * dy)
    raw = opacity * torch.exp(power)
    alpha = torch.clamp(raw, max=ALPHA_MAX)
    alpha = torch.where(alpha < ALPHA_MIN, torch.zeros_like(alpha), alpha)
    return alpha, raw, d


def blend(alpha: torch.Tensor, colors: torch.Tensor, background: torch.Tensor):
    """Front-to-back compositing of depth-sorted alphas (P, N).

    Returns ``(rgb (P, 3), weights (P, N), T_excl (P, N), T_final (P,))``.
    A splat contributes only while the transmittance after it stays at or
    above ``TRANSMITTANCE_MIN``; since transmittance never increases the
    surviving set is a prefix of the sorted list.
    """
    with torch.no_grad():
        keep = torch.cumprod(1.0 - alpha, dim=-1) >= TRANSMITTANCE_MIN
    alpha = alpha * keep
    one_minus = 1.0 - alpha
    ones = torch.ones_like(alpha[..., :1])
    T_excl = torch.cumprod(torch.cat([ones, one_minus[..., :-1]], dim=-1), dim=-1)
    T_final = T_excl[..., -1] * one_minus[..., -1] if alpha.shape[-1] else ones[..., 0]
    weights = alpha * T_excl
    rgb = weights @ colors + T_final[..., None] * background
    return rgb, weights, T_excl, T_final


def alpha_at(s: Splat2D, pixel) -> float:
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(s.mean2d, dtype=np.float64)
    q = float(d @ np.linalg.solve(np.asarray(s.cov2d, dtype=np.float64), d))
    a = min(ALPHA_MAX, s.alpha_base * np.exp(-0.5 * q))
    return 0.0 if a < ALPHA_MIN else a


def composite(splats: Sequence[Splat2D], pixel, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Colour of one pixel from depth-ascending splats."""
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64))
    if not splats:
        return bg.numpy().copy()
    depths = [s.depth for s in splats]
    if __debug__ and any(b < a for a, b in zip(depths, depths[1:])):
        raise InvalidParameterError("splats must be sorted by ascending depth")
    alpha = torch.tensor([[alpha_at(s, pixel) for s in splats]], dtype=torch.float64)
    colors = torch.tensor(np.array([s.color for s in splats]), dtype=torch.float64)
    return blend(alpha, colors, bg)[0][0].numpy()


# ----------------------------------------------------------------- render

def sorted_visible(proj: dict) -> torch.Tensor:
    """Indices of visible splats ordered by depth, ties broken by index."""
    idx = torch.nonzero(proj["visible"], as_tuple=False).reshape(-1)
    order = torch.sort(proj["depth"].detach()[idx], stable=True).indices
    return idx[order]


def cutoff_radius(proj: dict) -> torch.Tensor:
    """Screen radius beyond which a splat's alpha is certainly below ``ALPHA_MIN``.

    From ``d^T A d >= |d|^2 / lambda_max``: alpha < 1/255 whenever
    ``|d|^2 > 2 ln(255 opacity) lambda_max``.
    """
    with torch.no_grad():
        cov = proj["cov2d"]
        a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
        lam_max = 0.5 * (a + c) + torch.sqrt((0.25 * (a - c) ** 2 + b * b).clamp_min(0.0))
        log_ratio = torch.log(proj["opacity"].clamp_min(1e-30) / ALPHA_MIN).clamp_min(0.0)
        return torch.sqrt(2.0 * log_ratio * lam_max) * (1.0 + 1e-6) + 1e-6


def tiles(cam: Camera, proj: dict, order: torch.Tensor):
    """Yield ``(rows, cols, splat_idx)`` per image tile.

    ``splat_idx`` is the depth-ordered subset of ``order`` whose alpha can
    be non-zero somewhere in the tile; every other splat contributes an
    exact zero there, so per-tile evaluation equals the dense evaluation.
    """
    r = cutoff_radius(proj)[order]
    m = proj["mean2d"].detach()[order]
    for y0 in range(0, cam.height, TILE):
        y1 = min(y0 + TILE, cam.height)
        for x0 in range(0, cam.width, TILE):
            x1 = min(x0 + TILE, cam.width)
            hit = ((m[:, 0] + r >= x0 + 0.5) & (m[:, 0] - r <= x1 - 0.5)
                   & (m[:, 1] + r >= y0 + 0.5) & (m[:, 1] - r <= y1 - 0.5))
            yield (y0, y1), (x0, x1), order[hit]


def tile_pixels(rows, cols, dtype) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(rows[0], rows[1], dtype=dtype) + 0.5,
                            torch.arange(cols[0], cols[1], dtype=dtype) + 0.5, indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def render_tensors(g: GaussianTensors, cam: Camera, background=(0.0, 0.0, 0.0)) -> torch.Tensor:
    """Differentiable render; returns an (H, W, 3) tensor."""
    dtype = g.means.dtype
    bg = torch.as_tensor(np.asarray(background), dtype=dtype)
    proj = project_tensors(g, cam)
    order = sorted_visible(proj)
    # keeps the graph connected so backward() is valid even with no splats
    anchor = 0.0 * g.means.sum()
    rows_out, band = [], []
    for rows, cols, idx in tiles(cam, proj, order):
        h, w = rows[1] - rows[0], cols[1] - cols[0]
        if idx.numel() == 0:
            rgb = bg.expand(h * w, 3) + anchor
        else:
            pixels = tile_pixels(rows, cols, dtype)
            alpha, _, _ = splat_alpha(pixels, proj["mean2d"][idx], proj["conic"][idx],
                                      proj["opacity"][idx])
            rgb, *_ = blend(alpha, proj["color"][idx], bg)
        band.append(rgb.reshape(h, w, 3))
        if cols[1] == cam.width:
            rows_out.append(torch.cat(band, dim=1))
            band = []
    return torch.cat(rows_out, dim=0)


def render(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Render ``cloud`` to a float32 (H, W, 3) image in [0, 1]."""
    with torch.no_grad():
        img = render_tensors(GaussianTensors.from_cloud(cloud), cam, background)
    return np.clip(img.numpy(), 0.0, 1.0).astype(np.float32)
