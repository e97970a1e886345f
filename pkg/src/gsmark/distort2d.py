"""Image distortions used for robustness training and evaluation.

Tensors are ``(B, 3, H, W)`` in [0, 1]. In ``"train"`` mode JPEG is a
differentiable approximation; in ``"eval"`` mode it round-trips through a
real JPEG codec.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from gsmark.validation import InvalidParameterError, as_generator

__all__ = ["DistortionSpec2D", "distort2d", "distort2d_tensor", "diff_jpeg", "real_jpeg",
           "BLUR_SIGMA_DIVISOR", "sample_training_spec", "sample_photometric_spec", "random_affine"]

KINDS = ("none", "noise", "jpeg", "scale", "blur", "crop", "rotate")
# blur sigma in pixels = xi * min(H, W) / BLUR_SIGMA_DIVISOR
BLUR_SIGMA_DIVISOR = 30.0

_QT_Y = torch.tensor([
    [16, 11, 10, 16, 24, 40, 51, 61], [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56], [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77], [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101], [72, 92, 95, 98, 112, 100, 103, 99]],
    dtype=torch.float32)
_QT_C = torch.full((8, 8), 99.0)
_QT_C[:4, :4] = torch.tensor([[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]],
                             dtype=torch.float32)


@dataclass(frozen=True)
class DistortionSpec2D:
    """One image distortion. ``param`` meaning depends on ``kind``:

    noise: std on [0, 1] scale; jpeg: quality 1-100; scale: side factor in
    (0, 1]; blur: xi >= 0; crop: kept area fraction in (0, 1]; rotate:
    angle in radians.
    """

    kind: str = "none"
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown 2D distortion {self.kind!r}")
        p = self.param
        if not math.isfinite(p):
            raise InvalidParameterError("distortion parameter must be finite")
        bad = {
            "noise": p < 0, "jpeg": not 1 <= p <= 100, "scale": not 0 < p <= 1,
            "blur": p < 0, "crop": not 0 < p <= 1,
        }.get(self.kind, False)
        if bad:
            raise InvalidParameterError(f"{self.kind} parameter {p} out of range")

    @classmethod
    def parse(cls, text: str) -> "DistortionSpec2D":
        """Parse ``"noise2d:0.1"``, ``"jpeg:50"``, ``"scale:0.25"``, ``"blur:0.1"``,
        ``"crop:0.8"``, ``"rotate2d:pi/12"`` or ``"none"``."""
        name, _, arg = text.partition(":")
        name = {"noise2d": "noise", "rotate2d": "rotate"}.get(name, name)
        return cls(name, _parse_number(arg) if arg else 0.0)

    def label(self) -> str:
        return self.kind if self.kind == "none" else f"{self.kind}:{self.param:g}"


def _parse_number(text: str) -> float:
    """Float, optionally with a ``pi`` factor and a divisor (``"pi/6"``, ``"-2pi/3"``)."""
    text = text.strip().replace("π", "pi").replace("*", "")
    num, _, den = text.partition("/")
    if "pi" in num:
        coef = num.replace("pi", "")
        value = float(coef + "1" if coef in ("", "-", "+") else coef) * math.pi
    else:
        value = float(num)
    return value / float(den) if den else value


# ------------------------------------------------------------------- JPEG

def _quality_table(base: torch.Tensor, quality: float) -> torch.Tensor:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return torch.clamp(torch.floor((base * scale + 50.0) / 100.0), 1.0, 255.0)


def _dct_matrix(dtype) -> torch.Tensor:
    k = torch.arange(8, dtype=torch.float64)
    D = torch.cos((2 * k[None, :] + 1) * k[:, None] * math.pi / 16) * math.sqrt(2 / 8)
    D[0] /= math.sqrt(2)
    return D.to(dtype)


def _soft_round(x: torch.Tensor) -> torch.Tensor:
    r = torch.round(x)
    return r + (x - r) ** 3


def _blockwise(ch: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    B, H, W = ch.shape
    ph, pw = (-H) % 8, (-W) % 8
    if ph or pw:
        ch = F.pad(ch[:, None], (0, pw, 0, ph), mode="replicate")[:, 0]
    Hp, Wp = ch.shape[-2:]
    D = _dct_matrix(ch.dtype)
    blocks = ch.reshape(B, Hp // 8, 8, Wp // 8, 8).permute(0, 1, 3, 2, 4)
    coef = D @ blocks @ D.T
    q = table.to(ch.dtype)
    coef = _soft_round(coef / q) * q
    out = (D.T @ coef @ D).permute(0, 1, 3, 2, 4).reshape(B, Hp, Wp)
    return out[:, :H, :W]


def diff_jpeg(x: torch.Tensor, quality: float) -> torch.Tensor:
    """Differentiable JPEG: YCbCr, 4:2:0 chroma, 8x8 DCT, cubic soft rounding."""
    quality = float(quality)
    v = x * 255.0
    r, g, b = v[:, 0], v[:, 1], v[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b
    H, W = y.shape[-2:]
    y = _blockwise(y - 128.0, _quality_table(_QT_Y, quality)) + 128.0
    chroma = F.avg_pool2d(torch.stack([cb, cr], 1), 2, ceil_mode=True)
    table_c = _quality_table(_QT_C, quality)
    chroma = torch.stack([_blockwise(chroma[:, i], table_c) for i in range(2)], 1)
    chroma = F.interpolate(chroma, size=(H, W), mode="bilinear", align_corners=False)
    cb, cr = chroma[:, 0], chroma[:, 1]
    rgb = torch.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb], 1)
    return torch.clamp(rgb / 255.0, 0.0, 1.0)


def real_jpeg(x: torch.Tensor, quality: float) -> torch.Tensor:
    """Round trip through libjpeg via Pillow (not differentiable)."""
    out = []
    for img in x.detach().cpu():
        arr = (img.permute(1, 2, 0).clamp(0, 1).numpy() * 255.0 + 0.5).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="JPEG", quality=int(round(quality)))
        buf.seek(0)
        with Image.open(buf) as im:
            dec = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        out.append(torch.from_numpy(dec).permute(2, 0, 1))
    return torch.stack(out).to(x.dtype)


# ------------------------------------------------------------ geometric

def _gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return x
    radius = max(1, int(math.ceil(3.0 * sigma)))
    t = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k = k / k.sum()
    C = x.shape[1]
    x = F.pad(x, (radius, radius, radius, radius), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).repeat(C, 1, 1, 1), groups=C)
    return F.conv2d(x, k.view(1, 1, -1, 1).repeat(C, 1, 1, 1), groups=C)


def _resize(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False,
                         antialias=size[0] < x.shape[-2])


def _rotate(x: torch.Tensor, angle: float) -> torch.Tensor:
    c, s = math.cos(angle), math.sin(angle)
    theta = torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=x.dtype).expand(x.shape[0], 2, 3)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def random_affine(x: torch.Tensor, generator: torch.Generator | None = None, max_angle: float = math.radians(10),
                  max_scale: float = 0.08, max_shift: float = 0.1) -> torch.Tensor:
    """Per-image random rotation, zoom and shift (shift in half-widths), reflection padded."""
    b = x.shape[0]

    def u(*shape):
        return torch.rand(*shape, generator=generator, dtype=x.dtype) * 2.0 - 1.0

    ang, zoom, shift = u(b) * max_angle, 1.0 + u(b) * max_scale, u(b, 2) * max_shift
    c, s = torch.cos(ang) / zoom, torch.sin(ang) / zoom
    theta = torch.stack([torch.stack([c, -s, shift[:, 0]], 1), torch.stack([s, c, shift[:, 1]], 1)], 1)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def distort2d_tensor(x: torch.Tensor, spec: DistortionSpec2D, generator: torch.Generator | None = None,
                     mode: str = "train") -> torch.Tensor:
    """Apply ``spec`` to a batch ``(B, 3, H, W)``."""
    kind, p = spec.kind, spec.param
    H, W = x.shape[-2:]
    if kind == "none" or (kind == "noise" and p == 0):
        return x
    if kind == "noise":
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        return torch.clamp(x + p * noise, 0.0, 1.0)
    if kind == "jpeg":
        return diff_jpeg(x, p) if mode == "train" else real_jpeg(x, p)
    if kind == "scale":
        if p == 1.0:
            return x
        small = (max(1, int(round(H * p))), max(1, int(round(W * p))))
        return _resize(_resize(x, small), (H, W))
    if kind == "blur":
        return _gaussian_blur(x, p * min(H, W) / BLUR_SIGMA_DIVISOR)
    if kind == "crop":
        if p == 1.0:
            return x
        side = math.sqrt(p)
        h, w = max(1, int(round(H * side))), max(1, int(round(W * side)))
        top = int(torch.randint(0, H - h + 1, (1,), generator=generator))
        left = int(torch.randint(0, W - w + 1, (1,), generator=generator))
        return _resize(x[..., top:top + h, left:left + w], (H, W))
    if kind == "rotate":
        return _rotate(x, p)
    raise InvalidParameterError(kind)  # pragma: no cover


def distort2d(img: np.ndarray, spec: DistortionSpec2D, seed=0, mode: str = "eval") -> np.ndarray:
    """Distort one ``(H, W, 3)`` image; ``NONE`` returns it unchanged."""
    if spec.kind == "none":
        return img
    gen = torch.Generator().manual_seed(int(as_generator(seed).integers(2**31)))
    x = torch.as_tensor(np.asarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    with torch.no_grad():
        y = distort2d_tensor(x, spec, gen, mode)
    return y[0].permute(1, 2, 0).numpy()


def sample_training_spec(rng: np.random.Generator) -> DistortionSpec2D:
    """Random distortion for one training batch (includes the identity)."""
    kind = rng.choice(["none", "noise", "jpeg", "scale", "blur", "crop", "rotate"],
                      p=[0.1, 0.25, 0.2, 0.2, 0.1, 0.075, 0.075])
    if kind == "noise":
        return DistortionSpec2D("noise", float(rng.uniform(0.0, 0.12)))
    if kind == "jpeg":
        return DistortionSpec2D("jpeg", float(rng.uniform(40, 90)))
    if kind == "scale":
        return DistortionSpec2D("scale", float(rng.uniform(0.25, 1.0)))
    if kind == "blur":
        return DistortionSpec2D("blur", float(rng.uniform(0.0, 0.2)))
    if kind == "crop":
        return DistortionSpec2D("crop", float(rng.uniform(0.7, 1.0)))
    if kind == "rotate":
        return DistortionSpec2D("rotate", float(rng.uniform(-math.pi / 18, math.pi / 18)))
    return DistortionSpec2D()


def sample_photometric_spec(rng: np.random.Generator) -> DistortionSpec2D:
    """Random non-geometric distortion (noise, JPEG, rescale or blur).

    Noise is drawn most often and near the evaluation strength, since it is
    the attack rendered watermarks resist least.
    """
    kind = rng.choice(["noise", "jpeg", "scale", "blur"], p=[0.4, 0.25, 0.25, 0.1])
    if kind == "noise":
        return DistortionSpec2D("noise", float(rng.uniform(0.04, 0.14)))
    if kind == "jpeg":
        return DistortionSpec2D("jpeg", float(rng.uniform(40, 90)))
    if kind == "scale":
        return DistortionSpec2D("scale", float(rng.uniform(0.25, 1.0)))
    return DistortionSpec2D("blur", float(rng.uniform(0.0, 0.2)))
