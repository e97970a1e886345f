"""Marker Gaussians: densify uncertain parents, then optimize only the markers."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from gsmark.cloud import GaussianCloud, Origin, quaternion_to_rotation, save_ply, union
from gsmark.distort2d import distort2d_tensor, sample_photometric_spec
from gsmark.message import Message, message_loss
from gsmark.metrics import psnr
from gsmark.optim import ADAM_BETAS, ADAM_EPS, DECAY_GAMMA
from gsmark.render import Camera, GaussianTensors, render, render_tensors
from gsmark.scenes import SCENE_BACKGROUND
from gsmark.validation import InvalidParameterError, as_generator, check_is_fitted

log = logging.getLogger(__name__)

__all__ = ["densify", "EmbedConfig", "EmbedResult", "embed", "GaussianMarker", "MARKER_LR",
           "FIELDS", "save_checkpoint"]

FIELDS = ("means", "quats", "log_scales", "sh", "opacity_logits")

# Per-group learning rates of the reference 3DGS optimizer. The position rate
# is multiplied by the camera extent and decays by POSITION_DECAY over the run.
MARKER_LR = {"means": 1.6e-4, "quats": 1e-3, "log_scales": 5e-3, "sh": 2.5e-3,
             "opacity_logits": 5e-2}
POSITION_DECAY = 0.01


def densify(cloud: GaussianCloud, indices, seed=0, opacity_factor: float = 1.0) -> GaussianCloud:
    """One marker per index, with position drawn from the parent's own Gaussian.

    All other fields are cloned. ``opacity_factor < 1`` attenuates the cloned
    opacity (``alpha * factor``), for experiments only.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size == 0:
        warnings.warn("densify called with no indices; returning an empty marker cloud", stacklevel=2)
        return GaussianCloud.empty(cloud.sh_degree).with_origin(Origin.MARKER)
    if indices.min() < 0 or indices.max() >= len(cloud):
        raise InvalidParameterError("densify indices out of range")
    if not 0.0 < opacity_factor <= 1.0:
        raise InvalidParameterError("opacity_factor must be in (0, 1]")
    parents = cloud.subset(indices)
    rng = as_generator(seed)
    z = rng.standard_normal((len(indices), 3))
    # x = mu + R S z has covariance R S^2 R^T
    R = quaternion_to_rotation(parents.rotations.astype(np.float64))
    S = np.exp(parents.log_scales.astype(np.float64))
    pos = parents.positions.astype(np.float64) + np.einsum("nij,nj->ni", R, S * z)
    logits = parents.opacity_logits
    if opacity_factor < 1.0:
        a = 1.0 / (1.0 + np.exp(-logits.astype(np.float64))) * opacity_factor
        logits = np.log(a) - np.log1p(-a)
    return parents.replace(positions=pos, opacity_logits=logits).with_origin(Origin.MARKER)


@dataclass
class EmbedConfig:
    """Settings for marker optimization.

    ``trainable`` selects which marker fields are optimized. ``distort`` puts a
    random photometric distortion (noise, JPEG, rescale or blur, each step
    with probability ``distort_prob``) between render and decoder; off by
    default.
    """

    lambda1: float = 10.0
    lambda2: float = 1.0
    steps: int = 1000
    seed: int = 0
    views_per_step: int = 1
    lr_scale: float = 1.0
    trainable: tuple = FIELDS
    distort: bool = False
    distort_prob: float = 0.5
    background: tuple = SCENE_BACKGROUND
    rec_reduction: str = "sum"
    log_every: int = 1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidParameterError("loss weights must be >= 0")
        if int(self.steps) < 1:
            raise InvalidParameterError("steps must be >= 1")
        if int(self.views_per_step) < 1:
            raise InvalidParameterError("views_per_step must be >= 1")
        if self.rec_reduction not in ("sum", "mean"):
            raise InvalidParameterError("rec_reduction must be 'sum' or 'mean'")
        unknown = set(self.trainable) - set(FIELDS)
        if unknown:
            raise InvalidParameterError(f"unknown trainable fields {sorted(unknown)}")
        self.trainable = tuple(self.trainable)
        self.background = tuple(float(b) for b in self.background)

    @classmethod
    def desk(cls, **overrides) -> "EmbedConfig":
        """Settings tuned for 64 px toy scenes with 8 training views.

        The reconstruction term is a per-pixel mean weighted by 1000, eight
        views share each step, the 3DGS rates are scaled by 10 and every
        rendered view passes through a random photometric distortion before
        decoding. Pair with ``densify(..., opacity_factor=0.2)``.
        """
        base = dict(lambda2=1000.0, rec_reduction="mean", views_per_step=8, lr_scale=10.0,
                    distort=True, distort_prob=1.0)
        return cls(**{**base, **overrides})


@dataclass
class EmbedResult:
    markers: GaussianCloud
    log: list = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.log[-1] if self.log else {}


def camera_extent(cams) -> float:
    """1.1 x the largest camera-centre distance from their mean (3DGS convention)."""
    centers = np.stack([c.center for c in cams])
    return float(1.1 * np.linalg.norm(centers - centers.mean(0), axis=1).max())


def _decode(decoder, img: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(decoder(img.permute(2, 0, 1)[None]))[0]


def embed(original: GaussianCloud, markers: GaussianCloud, decoder, message: Message,
          cams, cfg: EmbedConfig | None = None) -> EmbedResult:
    """Optimize marker parameters so ``decoder`` reads ``message`` from renders.

    Loss per step: ``lambda1 * BCE(D(I_w), m) + lambda2 * ||I_w - I_o||^2`` with
    ``I_o`` the render of the original cloud alone. The originals enter the
    graph as constants and are never written.
    """
    cfg = cfg or EmbedConfig()
    cams = list(cams)
    if not cams:
        raise InvalidParameterError("embed needs at least one camera")
    if markers.sh_degree != original.sh_degree:
        raise InvalidParameterError("marker and original SH degrees differ")
    bg = cfg.background
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    fixed = GaussianTensors.from_cloud(original)
    versions = [t._version for t in fixed]
    refs = [torch.as_tensor(render(original, c, bg)) for c in cams]
    m = message.tensor()
    for p in decoder.parameters():
        p.requires_grad_(False)
    decoder.eval()

    params = GaussianTensors.from_cloud(markers)
    groups = []
    extent = camera_extent(cams)
    for name, t in params._asdict().items():
        if name in cfg.trainable and len(markers):
            t.requires_grad_(True)
            lr = MARKER_LR[name] * cfg.lr_scale * (extent if name == "means" else 1.0)
            groups.append({"params": [t], "lr": lr, "name": name})
    opt = torch.optim.Adam(groups, betas=ADAM_BETAS, eps=ADAM_EPS) if groups else None
    if opt is not None:
        steps = int(cfg.steps)
        decay = [POSITION_DECAY if g["name"] == "means" else DECAY_GAMMA for g in groups]
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, [lambda t, d=d: d ** (min(t, steps) / steps) for d in decay])

    history = []
    for step in range(int(cfg.steps)):
        views = rng.choice(len(cams), size=min(cfg.views_per_step, len(cams)), replace=False)
        g = GaussianTensors.cat([fixed, params])
        l_msg = l_rec = 0.0
        acc, quality = [], []
        for v in views:
            img = render_tensors(g, cams[v], bg)
            seen = img
            if cfg.distort and rng.random() < cfg.distort_prob:
                spec = sample_photometric_spec(rng)
                seen = distort2d_tensor(img.permute(2, 0, 1)[None], spec, gen)[0].permute(1, 2, 0)
            p = _decode(decoder, seen)
            l_msg = l_msg + message_loss(p, m)
            sq = (img - refs[v]) ** 2
            l_rec = l_rec + (sq.sum() if cfg.rec_reduction == "sum" else sq.mean())
            acc.append(float(((p.detach() >= 0.5).float() == m).float().mean()))
            quality.append(psnr(img.detach().numpy(), refs[v].numpy()))
        l_msg = l_msg / len(views)
        l_rec = l_rec / len(views)
        loss = cfg.lambda1 * l_msg + cfg.lambda2 * l_rec
        if not torch.isfinite(torch.as_tensor(loss)):
            raise FloatingPointError(
                f"embed diverged at step {step}: L_msg={float(l_msg)} L_rec={float(l_rec)}")
        if opt is not None:
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            with torch.no_grad():
                params.quats.div_(params.quats.norm(dim=1, keepdim=True).clamp_min(1e-12))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append({"step": step, "L_msg": float(l_msg.detach()), "L_rec": float(l_rec.detach()),
                            "bitacc": float(np.mean(acc)), "psnr": float(np.mean(quality))})
        if step % 100 == 0:
            log.info("embed step %d L_msg %.4f L_rec %.4f acc %.3f psnr %.2f", step, l_msg.item(),
                     l_rec.item(), np.mean(acc), np.mean(quality))
    assert [t._version for t in fixed] == versions, "original parameters were modified"
    out = params.to_cloud(markers.sh_degree, origin=np.full(len(markers), Origin.MARKER, np.uint8))
    return EmbedResult(out, history)


def save_checkpoint(directory, markers: GaussianCloud, cfg: EmbedConfig, history, message=None) -> None:
    """Write markers PLY (+ sidecar), config snapshot and the per-step CSV log."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_ply(markers, directory / "markers.ply")
    snap = asdict(cfg)
    if message is not None:
        snap["message"] = message.to_hex()
    (directory / "embed_config.json").write_text(json.dumps(snap, indent=2, sort_keys=True))
    with open(directory / "embed_log.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "L_msg", "L_rec", "bitacc", "psnr"])
        w.writeheader()
        w.writerows(history)


class GaussianMarker(BaseEstimator):
    """Densify + embed as an estimator.

    ``fit(cloud, cameras, decoder=..., message=..., indices=...)`` learns the
    markers; ``transform(cloud)`` returns the union with the learned markers.
    """

    def __init__(self, lambda1=10.0, lambda2=1.0, steps=1000, seed=0, views_per_step=1,
                 lr_scale=1.0, trainable=FIELDS, distort=False, distort_prob=0.5,
                 background=SCENE_BACKGROUND, rec_reduction="sum", opacity_factor=1.0):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.steps = steps
        self.seed = seed
        self.views_per_step = views_per_step
        self.lr_scale = lr_scale
        self.trainable = trainable
        self.distort = distort
        self.distort_prob = distort_prob
        self.background = background
        self.rec_reduction = rec_reduction
        self.opacity_factor = opacity_factor

    def config(self) -> EmbedConfig:
        p = self.get_params()
        p.pop("opacity_factor")
        return EmbedConfig(**p)

    def fit(self, cloud: GaussianCloud, cameras, decoder=None, message: Message | None = None,
            indices=None):
        if decoder is None or message is None or indices is None:
            raise InvalidParameterError("fit needs decoder, message and indices")
        original = cloud.filter(Origin.ORIGINAL)
        seeds = np.random.SeedSequence(self.seed).spawn(1)[0]
        init = densify(original, indices, seed=np.random.default_rng(seeds),
                       opacity_factor=self.opacity_factor)
        result = embed(original, init, decoder, message, cameras, self.config())
        self.markers_ = result.markers
        self.log_ = result.log
        self.message_ = message
        self.original_digest_ = original.digest()
        return self

    def transform(self, cloud: GaussianCloud) -> GaussianCloud:
        check_is_fitted(self, "markers_")
        original = cloud.filter(Origin.ORIGINAL)
        if original.digest() != self.original_digest_:
            raise InvalidParameterError("cloud differs from the one the markers were fitted on")
        return union(original, self.markers_)

    def render(self, cloud: GaussianCloud, cam: Camera) -> np.ndarray:
        return render(self.transform(cloud), cam, self.background)
