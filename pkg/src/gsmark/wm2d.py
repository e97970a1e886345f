"""Image watermark codec: a residual encoder (pretraining only) and a bit decoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import nn

from gsmark.distort2d import DistortionSpec2D, distort2d_tensor, random_affine, sample_training_spec
from gsmark.message import N_BITS, Message, message_loss
from gsmark.optim import ADAM_BETAS, ADAM_EPS, exp_scheduler
from gsmark.validation import InvalidParameterError, check_image, check_is_fitted
from gsmark.weights import load_weights, save_weights

log = logging.getLogger(__name__)

__all__ = ["HiddenEncoder", "HiddenDecoder", "Pretrain2DConfig", "pretrain2d", "decode2d",
           "encode2d", "HiddenCodec", "make_corpus", "message_loss", "to_batch"]


def to_batch(images) -> torch.Tensor:
    """(H, W, 3) array or a list of them -> (B, 3, H, W) float32 tensor."""
    if isinstance(images, torch.Tensor):
        return images if images.ndim == 4 else images.permute(2, 0, 1)[None]
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)


def _block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.BatchNorm2d(cout), nn.ReLU())


class HiddenEncoder(nn.Module):
    """Message-conditioned residual generator.

    The message is expanded by a linear layer into a coarse spatial code so
    that flat image regions can still carry all bits. Features and the
    residual are computed at half resolution and upsampled, which keeps the
    residual smooth enough to survive rescaling and blur.
    """

    GRID = 8

    def __init__(self, n_bits: int = N_BITS, channels: int = 32, code_channels: int = 8):
        super().__init__()
        self.code_channels = code_channels
        self.code = nn.Linear(n_bits, code_channels * self.GRID * self.GRID)
        self.features = nn.Sequential(_block(3, channels), _block(channels, channels))
        self.fuse = nn.Sequential(_block(channels + code_channels + 3, channels), _block(channels, channels))
        self.out = nn.Conv2d(channels, 3, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def residual(self, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        H, W = x.shape[-2:]
        small = F.avg_pool2d(x * 2.0 - 1.0, 2)
        h = self.features(small)
        code = self.code(2.0 * m - 1.0).view(-1, self.code_channels, self.GRID, self.GRID)
        code = F.interpolate(code, size=h.shape[-2:], mode="bilinear", align_corners=False)
        r = self.out(self.fuse(torch.cat([h, code, small], dim=1)))
        return F.interpolate(r, size=(H, W), mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        return torch.clamp(x + self.residual(x, m), 0.0, 1.0)


class HiddenDecoder(nn.Module):
    """Strided conv stack to a (resolution/8)^2 map, then a linear head to bit logits."""

    def __init__(self, n_bits: int = N_BITS, channels: int = 32, resolution: int = 64):
        super().__init__()
        self.resolution = resolution
        c = channels
        self.body = nn.Sequential(
            _block(3, c), _block(c, c, 2), _block(c, 2 * c, 2), _block(2 * c, 2 * c, 2),
            nn.Conv2d(2 * c, 8, 1),
        )
        side = resolution // 8
        self.head = nn.Linear(8 * side * side, n_bits)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.resolution, self.resolution):
            x = F.interpolate(x, size=(self.resolution, self.resolution), mode="bilinear",
                              align_corners=False, antialias=x.shape[-1] > self.resolution)
        return self.head(self.body(x * 2.0 - 1.0).flatten(1))


@dataclass
class Pretrain2DConfig:
    n_bits: int = N_BITS
    channels: int = 32
    resolution: int = 64
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    image_weight: float = 80.0
    distortions: bool = True
    warmup: float = 0.1
    jitter: bool = True
    seed: int = 0


def pretrain2d(corpus, cfg: Pretrain2DConfig | None = None, callback=None):
    """Jointly train encoder and decoder under random distortions.

    The first ``warmup`` fraction of steps trains the message channel alone
    (no image loss, no distortions); over the next ``warmup`` fraction the
    image loss weight ramps up linearly while distortions are switched on.
    With ``jitter`` every post-warmup batch also gets a small random affine
    warp, which makes the decoder tolerate the image motion between nearby
    viewpoints.

    Returns ``(encoder, decoder, history)``; ``history`` holds per-step
    loss, message loss, image MSE and bit accuracy.
    """
    cfg = cfg or Pretrain2DConfig()
    images = to_batch(np.stack([check_image(im) for im in corpus]))
    if images.shape[-1] != cfg.resolution or images.shape[-2] != cfg.resolution:
        images = F.interpolate(images, size=(cfg.resolution, cfg.resolution), mode="bilinear",
                               align_corners=False, antialias=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    enc = HiddenEncoder(cfg.n_bits, cfg.channels)
    dec = HiddenDecoder(cfg.n_bits, cfg.channels, cfg.resolution)
    opt = torch.optim.Adam(list(enc.parameters()) + list(dec.parameters()), lr=cfg.lr,
                           betas=ADAM_BETAS, eps=ADAM_EPS)
    sched = exp_scheduler(opt, cfg.steps)
    history = {"loss": [], "msg": [], "mse": [], "acc": []}
    n_warm = max(1, int(cfg.warmup * cfg.steps))
    for step in range(cfg.steps):
        ramp = float(np.clip(step / n_warm - 1.0, 0.0, 1.0))
        idx = rng.integers(0, len(images), cfg.batch_size)
        x = images[idx]
        if rng.random() < 0.5:
            x = torch.flip(x, dims=[-1])
        m = torch.from_numpy(rng.integers(0, 2, (cfg.batch_size, cfg.n_bits)).astype(np.float32))
        w = enc(x, m)
        spec = sample_training_spec(rng) if cfg.distortions and step >= n_warm else DistortionSpec2D()
        seen = distort2d_tensor(w, spec, gen, mode="train")
        if cfg.jitter and step >= n_warm:
            seen = random_affine(seen, gen)
        logits = dec(seen)
        msg = F.binary_cross_entropy_with_logits(logits, m)
        mse = F.mse_loss(w, x)
        loss = msg + ramp * cfg.image_weight * mse
        if not torch.isfinite(loss):
            raise FloatingPointError(f"pretraining diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        acc = float(((logits > 0).float() == m).float().mean())
        for k, v in zip(history, (loss, msg, mse, acc)):
            history[k].append(float(v.detach()) if isinstance(v, torch.Tensor) else v)
        if step % 250 == 0:
            log.info("pretrain2d step %d loss %.4f msg %.4f mse %.2e acc %.3f spec %s",
                     step, loss.item(), msg.item(), mse.item(), acc, spec.label())
        if callback is not None:
            callback(step, history)
    enc.eval()
    dec.eval()
    for p in list(enc.parameters()) + list(dec.parameters()):
        p.requires_grad_(False)
    return enc, dec, history


def decode2d(decoder: HiddenDecoder, img) -> np.ndarray:
    """Bit probabilities for one image (or ``(B, N_BITS)`` for a batch)."""
    x = to_batch(img)
    with torch.no_grad():
        p = torch.sigmoid(decoder(x)).numpy().astype(np.float64)
    return p[0] if np.asarray(img).ndim == 3 else p


def encode2d(encoder: HiddenEncoder, img, msg: Message) -> np.ndarray:
    x = to_batch(check_image(img))
    with torch.no_grad():
        w = encoder(x, msg.tensor()[None])
    return w[0].permute(1, 2, 0).numpy()


# ------------------------------------------------------------------ corpus

def _procedural(rng: np.random.Generator, res: int) -> np.ndarray:
    kind = rng.integers(0, 4)
    yy, xx = np.mgrid[0:res, 0:res] / res
    if kind == 0:  # smooth random field
        coarse = rng.uniform(0, 1, (rng.integers(2, 9),) * 2 + (3,))
        t = torch.from_numpy(coarse).permute(2, 0, 1)[None].float()
        return F.interpolate(t, size=(res, res), mode="bicubic", align_corners=False)[0] \
            .permute(1, 2, 0).clamp(0, 1).numpy()
    if kind == 1:  # stripes
        f, th = rng.uniform(2, 10), rng.uniform(0, np.pi)
        s = 0.5 + 0.5 * np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)))
        c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        return s[..., None] * c0 + (1 - s[..., None]) * c1
    if kind == 2:  # checkerboard
        n = rng.integers(2, 8)
        s = ((np.floor(xx * n) + np.floor(yy * n)) % 2)[..., None]
        c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        return s * c0 + (1 - s) * c1
    img = np.broadcast_to(rng.uniform(0, 1, 3), (res, res, 3)).copy()  # blobs
    for _ in range(rng.integers(3, 12)):
        cx, cy, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.3)
        w = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))[..., None]
        img = img * (1 - w) + w * rng.uniform(0, 1, 3)
    return img


def make_corpus(n_images: int = 256, resolution: int = 64, seed: int = 0,
                render_fraction: float = 0.5) -> list[np.ndarray]:
    """Toy-scene renders from random viewpoints mixed with procedural textures."""
    from gsmark.render import render
    from gsmark.scenes import make_toy_scene, ring_cameras

    rng = np.random.default_rng(seed)
    n_render = int(round(n_images * render_fraction))
    out = []
    views_per_scene = 8
    n_scenes = -(-n_render // views_per_scene)
    for s in range(n_scenes):
        scene = make_toy_scene(seed=10_000 + seed * 100 + s, n_gaussians=int(rng.integers(150, 400)),
                               n_views=4, resolution=resolution, n_heldout=0)
        bg = (1.0, 1.0, 1.0) if rng.random() < 0.7 else tuple(rng.uniform(0, 1, 3))
        cams = ring_cameras(views_per_scene, resolution, offset=float(rng.uniform(0, 1)),
                            radius=float(rng.uniform(3.2, 5.0)), height=float(rng.uniform(-1.5, 2.0)))
        out.extend(render(scene.gt_cloud, c, bg) for c in cams)
    out = out[:n_render]
    out.extend(_procedural(rng, resolution).astype(np.float32) for _ in range(n_images - n_render))
    return [np.ascontiguousarray(im, dtype=np.float32) for im in out]


class HiddenCodec(BaseEstimator):
    """Estimator over :func:`pretrain2d`; ``predict`` returns hard bits."""

    def __init__(self, n_bits=N_BITS, channels=32, resolution=64, steps=5000, batch_size=16,
                 lr=1e-3, image_weight=80.0, distortions=True, warmup=0.1, jitter=True, seed=0):
        self.n_bits = n_bits
        self.channels = channels
        self.resolution = resolution
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.image_weight = image_weight
        self.distortions = distortions
        self.warmup = warmup
        self.jitter = jitter
        self.seed = seed

    def _config(self) -> Pretrain2DConfig:
        return Pretrain2DConfig(**self.get_params())

    def fit(self, corpus, y=None):
        self.encoder_, self.decoder_, self.history_ = pretrain2d(corpus, self._config())
        return self

    def predict_proba(self, images) -> np.ndarray:
        check_is_fitted(self, "decoder_")
        return decode2d(self.decoder_, images)

    def predict(self, images) -> np.ndarray:
        return (self.predict_proba(images) >= 0.5).astype(np.uint8)

    def encode(self, img, msg: Message) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        return encode2d(self.encoder_, img, msg)

    def save(self, path, encoder_path=None) -> None:
        check_is_fitted(self, "decoder_")
        meta = {"kind": "decoder2d", "config": asdict(self._config())}
        save_weights(path, self.decoder_.state_dict(), meta)
        if encoder_path is not None:
            save_weights(encoder_path, self.encoder_.state_dict(), {**meta, "kind": "encoder2d"})

    @classmethod
    def load(cls, path, encoder_path=None) -> "HiddenCodec":
        state, meta = load_weights(path)
        if meta.get("kind") != "decoder2d":
            raise InvalidParameterError(f"{path} does not hold 2D decoder weights")
        codec = cls(**meta["config"])
        codec.decoder_ = _frozen(HiddenDecoder(codec.n_bits, codec.channels, codec.resolution), state)
        codec.encoder_ = None
        if encoder_path is not None:
            enc_state, _ = load_weights(encoder_path)
            codec.encoder_ = _frozen(HiddenEncoder(codec.n_bits, codec.channels), enc_state)
        return codec


def _frozen(module: nn.Module, state: dict) -> nn.Module:
    module.load_state_dict(state)
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module
