"""Point-set message decoder and discriminator over sampled Gaussians."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator
from torch import nn

from gsmark.cloud import GaussianCloud
from gsmark.message import N_BITS, PROB_CLAMP, Message, message_loss
from gsmark.metrics import bit_accuracy
from gsmark.optim import ADAM_BETAS, ADAM_EPS, exp_scheduler
from gsmark.validation import InvalidParameterError, as_generator, check_is_fitted
from gsmark.weights import load_weights, save_weights

log = logging.getLogger(__name__)

__all__ = ["PointSample", "sample_points", "DistortionSpec3D", "distort3d", "normalize_points",
           "PointNetDecoder", "PointNetDiscriminator", "decode3d", "discriminate", "adv_loss",
           "Train3DConfig", "train3d", "evaluate3d", "distort_cloud", "PointMessageDecoder", "N_FEATURES",
           "NOISE_UNIT"]

N_FEATURES = 14  # position 3 + opacity 1 + log_scale 3 + quaternion 4 + DC colour 3
# noise3d:x means sigma = x * scene diagonal * NOISE_UNIT
NOISE_UNIT = 1e-3
KINDS = ("none", "noise", "translate", "rotate", "cropout")


@dataclass(frozen=True)
class PointSample:
    """``positions`` (k, 3) and per-point ``features`` (k, 11): opacity,
    log_scale (3), quaternion (4), DC colour (3)."""

    positions: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        feat = np.asarray(self.features, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) < 1:
            raise InvalidParameterError("positions must be (k >= 1, 3)")
        if feat.shape != (len(pos), N_FEATURES - 3):
            raise InvalidParameterError(f"features must be ({len(pos)}, {N_FEATURES - 3})")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)

    @property
    def k(self) -> int:
        return len(self.positions)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        """(k, 14) decoder input."""
        return torch.as_tensor(np.concatenate([self.positions, self.features], 1), dtype=dtype)


def cloud_features(cloud: GaussianCloud) -> np.ndarray:
    return np.concatenate([
        1.0 / (1.0 + np.exp(-cloud.opacity_logits.astype(np.float64)))[:, None],
        cloud.log_scales, cloud.rotations, cloud.sh[:, 0, :],
    ], axis=1).astype(np.float64)


def sample_points(cloud: GaussianCloud, k: int = 1024, seed=0) -> PointSample:
    """Uniform subset of ``min(k, |cloud|)`` Gaussians without replacement."""
    if len(cloud) == 0:
        raise InvalidParameterError("cannot sample from an empty cloud")
    if k < 1:
        raise InvalidParameterError("k must be >= 1")
    rng = as_generator(seed)
    idx = rng.permutation(len(cloud))[:min(k, len(cloud))]
    sub = cloud.subset(idx)
    return PointSample(sub.positions, cloud_features(sub))


@dataclass(frozen=True)
class DistortionSpec3D:
    """``param``: noise std (scene units), translation box side, max rotation
    angle (radians) or cropout fraction."""

    kind: str = "none"
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown 3D distortion {self.kind!r}")
        p = float(self.param)
        if not math.isfinite(p):
            raise InvalidParameterError("distortion parameter must be finite")
        if self.kind in ("noise", "translate", "rotate") and p < 0:
            raise InvalidParameterError(f"{self.kind} parameter must be >= 0")
        if self.kind == "cropout" and not 0.0 <= p < 1.0:
            raise InvalidParameterError("cropout fraction must be in [0, 1)")

    @classmethod
    def parse(cls, text: str, scene_diag: float = 1.0) -> "DistortionSpec3D":
        """``"noise3d:0.1"`` (x diag/1000), ``"translate"`` (box = 1 diag),
        ``"translate:5"``, ``"rotate:pi/6"``, ``"cropout:0.1"``."""
        from gsmark.distort2d import _parse_number

        name, _, arg = text.partition(":")
        name = {"noise3d": "noise", "rotate3d": "rotate"}.get(name, name)
        value = _parse_number(arg) if arg else None
        if name == "noise":
            return cls("noise", (0.1 if value is None else value) * scene_diag * NOISE_UNIT)
        if name == "translate":
            return cls("translate", scene_diag if value is None else value)
        if name == "rotate":
            return cls("rotate", math.pi / 6 if value is None else value)
        return cls(name, 0.0 if value is None else value)

    def label(self) -> str:
        return self.kind if self.kind == "none" else f"{self.kind}:{self.param:g}"


def _cropout(ps: PointSample, fraction: float, rng) -> PointSample:
    # Ball around a random member point whose radius just covers round(fraction * k)
    # points; sorting the distances gives the same set a radius bisection would.
    n_remove = int(round(fraction * ps.k))
    if n_remove == 0:
        return ps
    if n_remove >= ps.k:
        raise InvalidParameterError("cropout would remove every point")
    center = ps.positions[rng.integers(ps.k)]
    d = np.linalg.norm(ps.positions - center, axis=1)
    keep = np.sort(np.argsort(d, kind="stable")[n_remove:])
    return PointSample(ps.positions[keep], ps.features[keep])


def distort3d(ps: PointSample, spec: DistortionSpec3D, seed=0) -> PointSample:
    rng = as_generator(seed)
    kind, p = spec.kind, spec.param
    if kind == "none" or (kind in ("noise", "translate", "cropout") and p == 0):
        return ps
    if kind == "noise":
        return PointSample(ps.positions + rng.normal(scale=p, size=ps.positions.shape), ps.features)
    if kind == "translate":
        return PointSample(ps.positions + rng.uniform(0.0, p, size=3), ps.features)
    if kind == "rotate":
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = Rotation.from_rotvec(axis * rng.uniform(-p, p)).as_matrix()
        c = ps.positions.mean(0)
        return PointSample((ps.positions - c) @ R.T + c, ps.features)
    return _cropout(ps, p, rng)


def distort_cloud(cloud: GaussianCloud, spec: DistortionSpec3D, seed=0) -> GaussianCloud:
    """Apply a 3D attack to a whole cloud so it can still be rendered.

    ROTATE also turns every Gaussian's orientation; CROPOUT drops whole
    Gaussians (origin flags follow the survivors).
    """
    rng = as_generator(seed)
    kind, p = spec.kind, spec.param
    pos = cloud.positions.astype(np.float64)
    if kind == "none" or (kind in ("noise", "translate", "cropout") and p == 0):
        return cloud
    if kind == "noise":
        return cloud.replace(positions=pos + rng.normal(scale=p, size=pos.shape))
    if kind == "translate":
        return cloud.replace(positions=pos + rng.uniform(0.0, p, size=3))
    if kind == "rotate":
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rot = Rotation.from_rotvec(axis * rng.uniform(-p, p))
        c = pos.mean(0)
        # cloud quaternions are (w, x, y, z); scipy uses (x, y, z, w)
        q = cloud.rotations.astype(np.float64)
        q = (rot * Rotation.from_quat(q[:, [1, 2, 3, 0]])).as_quat()[:, [3, 0, 1, 2]]
        return cloud.replace(positions=(pos - c) @ rot.as_matrix().T + c, rotations=q)
    n_remove = int(round(p * len(cloud)))
    if n_remove >= len(cloud):
        raise InvalidParameterError("cropout would remove every Gaussian")
    center = pos[rng.integers(len(cloud))]
    order = np.argsort(np.linalg.norm(pos - center, axis=1), kind="stable")
    return cloud.subset(np.sort(order[n_remove:]))


def normalize_points(ps: PointSample) -> PointSample:
    """Centre on the centroid and scale the farthest point to radius 1."""
    c = ps.positions.mean(0)
    x = ps.positions - c
    r = float(np.linalg.norm(x, axis=1).max())
    return PointSample(x / r if r > 0 else x, ps.features)


# ----------------------------------------------------------------- networks

class PointNetBackbone(nn.Module):
    """Shared per-point MLP followed by a symmetric max-pool."""

    def __init__(self, widths=(64, 128, 256)):
        super().__init__()
        layers, cin = [], N_FEATURES
        for w in widths:
            layers += [nn.Linear(cin, w), nn.ReLU()]
            cin = w
        self.mlp = nn.Sequential(*layers)
        self.out_dim = cin

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(x).max(dim=-2).values


def _head(cin, cout):
    return nn.Sequential(nn.Linear(cin, 128), nn.ReLU(), nn.Linear(128, cout))


class PointNetDecoder(nn.Module):
    def __init__(self, n_bits: int = N_BITS, widths=(64, 128, 256)):
        super().__init__()
        self.backbone = PointNetBackbone(widths)
        self.head = _head(self.backbone.out_dim, n_bits)

    def forward(self, x):
        return self.head(self.backbone(x))


class PointNetDiscriminator(nn.Module):
    def __init__(self, widths=(64, 128, 256), backbone: PointNetBackbone | None = None):
        super().__init__()
        self.backbone = backbone if backbone is not None else PointNetBackbone(widths)
        self.head = _head(self.backbone.out_dim, 1)

    def forward(self, x):
        return self.head(self.backbone(x))[..., 0]


def decode3d(decoder: PointNetDecoder, ps: PointSample, normalize: bool = True) -> np.ndarray:
    ps = normalize_points(ps) if normalize else ps
    with torch.no_grad():
        return torch.sigmoid(decoder(ps.tensor())).numpy().astype(np.float64)


def discriminate(disc: PointNetDiscriminator, ps: PointSample, normalize: bool = True) -> float:
    ps = normalize_points(ps) if normalize else ps
    with torch.no_grad():
        return float(torch.sigmoid(disc(ps.tensor())))


def adv_loss(d_o, d_w):
    """``log(1 - D(P_o)) + log(D(P_w))`` on clamped probabilities; D ascends it."""
    if isinstance(d_o, torch.Tensor) or isinstance(d_w, torch.Tensor):
        d_o = torch.as_tensor(d_o).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
        d_w = torch.as_tensor(d_w).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
        return (torch.log(1 - d_o) + torch.log(d_w)).mean()
    d_o = np.clip(np.asarray(d_o, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    d_w = np.clip(np.asarray(d_w, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    return float(np.mean(np.log(1 - d_o) + np.log(d_w)))


# ----------------------------------------------------------------- training

@dataclass
class Train3DConfig:
    """``adversarial_decoder`` shares the backbone between decoder and
    discriminator and adds ``-lambda2 * L_adv`` to the decoder objective.

    ``null_weight`` pulls the decoder's bit probabilities on the unwatermarked
    cloud toward 0.5, so it cannot pass by emitting the message for any input.
    """

    lambda1: float = 2.0
    lambda2: float = 1.0
    lr: float = 1e-4
    steps: int = 2000
    k: int = 1024
    batch_size: int = 4
    seed: int = 0
    widths: tuple = (64, 128, 256)
    max_rotation: float = math.pi / 6
    max_cropout: float = 0.3
    noise: float = 0.3  # in NOISE_UNIT x scene diagonal
    translate_box: float | None = None  # None: one scene diagonal
    distortions: bool = True
    adversarial_decoder: bool = False
    null_weight: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.null_weight < 0:
            raise InvalidParameterError("loss weights must be >= 0")
        if int(self.steps) < 1 or int(self.k) < 1 or int(self.batch_size) < 1:
            raise InvalidParameterError("steps, k and batch_size must be >= 1")
        self.widths = tuple(int(w) for w in self.widths)


def sample_training_spec3d(rng, cfg: Train3DConfig, diag: float) -> DistortionSpec3D:
    kind = rng.choice(KINDS)
    if kind == "noise":
        return DistortionSpec3D("noise", float(rng.uniform(0, cfg.noise)) * diag * NOISE_UNIT)
    if kind == "translate":
        return DistortionSpec3D("translate", diag if cfg.translate_box is None else cfg.translate_box)
    if kind == "rotate":
        return DistortionSpec3D("rotate", cfg.max_rotation)
    if kind == "cropout":
        return DistortionSpec3D("cropout", float(rng.uniform(0, cfg.max_cropout)))
    return DistortionSpec3D()


def _batch(cloud, cfg, spec, sample_rng, dist_rng):
    samples = [normalize_points(distort3d(sample_points(cloud, cfg.k, sample_rng), spec, dist_rng))
               for _ in range(cfg.batch_size)]
    n = min(s.k for s in samples)  # cropout counts agree, but guard anyway
    return torch.stack([s.tensor()[:n] for s in samples])


def train3d(watermarked: GaussianCloud, original: GaussianCloud, message: Message,
            cfg: Train3DConfig | None = None):
    """Alternate decoder and discriminator updates on sampled point sets.

    Returns ``(decoder, discriminator, log)``. Distortions and point samples
    come from separate seeded streams.
    """
    cfg = cfg or Train3DConfig()
    digests = (watermarked.digest(), original.digest())
    torch.manual_seed(cfg.seed)
    streams = np.random.SeedSequence(cfg.seed).spawn(3)
    dist_rng, wm_rng, og_rng = (np.random.default_rng(s) for s in streams)
    decoder = PointNetDecoder(N_BITS, cfg.widths)
    disc = PointNetDiscriminator(cfg.widths, decoder.backbone if cfg.adversarial_decoder else None)
    dec_params = list(decoder.parameters())
    disc_params = list(disc.head.parameters()) if cfg.adversarial_decoder else list(disc.parameters())
    opt_dec = torch.optim.Adam(dec_params, lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    opt_disc = torch.optim.Adam(disc_params, lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    sched = [exp_scheduler(opt_dec, cfg.steps), exp_scheduler(opt_disc, cfg.steps)]
    m = message.tensor()
    diag = original.bounding_diagonal()
    history = []
    for step in range(int(cfg.steps)):
        spec = sample_training_spec3d(dist_rng, cfg, diag) if cfg.distortions else DistortionSpec3D()
        xw = _batch(watermarked, cfg, spec, wm_rng, dist_rng)
        xo = _batch(original, cfg, spec, og_rng, dist_rng)

        d_adv = adv_loss(torch.sigmoid(disc(xo)), torch.sigmoid(disc(xw)))
        opt_disc.zero_grad(set_to_none=True)
        (-d_adv).backward()
        opt_disc.step()

        logits = decoder(xw)
        l_msg = message_loss(torch.sigmoid(logits), m.expand_as(logits))
        loss = cfg.lambda1 * l_msg
        if cfg.null_weight > 0:
            p_null = torch.sigmoid(decoder(xo))
            loss = loss + cfg.null_weight * message_loss(p_null, torch.full_like(p_null, 0.5))
        if cfg.adversarial_decoder:
            loss = loss - cfg.lambda2 * adv_loss(torch.sigmoid(disc(xo)), torch.sigmoid(disc(xw)))
        if not torch.isfinite(loss) or not torch.isfinite(d_adv):
            raise FloatingPointError(f"train3d diverged at step {step}")
        opt_dec.zero_grad(set_to_none=True)
        loss.backward()
        opt_dec.step()
        for s in sched:
            s.step()
        acc = float(((logits.detach() > 0).float() == m).float().mean())
        history.append({"step": step, "bce": float(l_msg.detach()), "adv": float(d_adv.detach()),
                        "acc": acc, "spec": spec.label()})
        if step % 250 == 0:
            log.info("train3d step %d bce %.4f adv %.4f acc %.3f", step, history[-1]["bce"],
                     history[-1]["adv"], acc)
    assert (watermarked.digest(), original.digest()) == digests, "training modified a cloud"
    for net in (decoder, disc):
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
    return decoder, disc, history


TABLE_COLUMNS = {"None": "none", "Noise": "noise3d:0.1", "Translation": "translate",
                 "Rotation": "rotate:pi/6", "Cropout": "cropout:0.1"}


def evaluate3d(decoder, cloud: GaussianCloud, message: Message, attacks=None, n_resamples: int = 20,
               k: int = 1024, seed=0, scene_diag: float | None = None) -> dict:
    """Mean bit accuracy per attack over seeded resamples (sample, attack, decode).

    ``attacks`` maps column names to attack strings; the default mirrors the
    Gaussian-level result table.
    """
    attacks = TABLE_COLUMNS if attacks is None else attacks
    diag = cloud.bounding_diagonal() if scene_diag is None else scene_diag
    out = {}
    for col, text in attacks.items():
        spec = DistortionSpec3D.parse(text, diag)
        accs = []
        for r in range(n_resamples):
            rng = np.random.default_rng([seed, r])
            ps = distort3d(sample_points(cloud, k, rng), spec, rng)
            accs.append(bit_accuracy(decode3d(decoder, ps), message.bits))
        out[col] = float(np.mean(accs))
    return out


class PointMessageDecoder(BaseEstimator):
    """Estimator over :func:`train3d`; ``predict`` returns hard bits."""

    def __init__(self, lambda1=2.0, lambda2=1.0, lr=1e-4, steps=2000, k=1024, batch_size=4,
                 seed=0, widths=(64, 128, 256), max_rotation=math.pi / 6, max_cropout=0.3,
                 noise=0.3, translate_box=None, distortions=True, adversarial_decoder=False,
                 null_weight=1.0):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lr = lr
        self.steps = steps
        self.k = k
        self.batch_size = batch_size
        self.seed = seed
        self.widths = widths
        self.max_rotation = max_rotation
        self.max_cropout = max_cropout
        self.noise = noise
        self.translate_box = translate_box
        self.distortions = distortions
        self.adversarial_decoder = adversarial_decoder
        self.null_weight = null_weight

    def config(self) -> Train3DConfig:
        return Train3DConfig(**self.get_params())

    def fit(self, watermarked: GaussianCloud, original: GaussianCloud, message: Message):
        self.decoder_, self.discriminator_, self.log_ = train3d(watermarked, original, message,
                                                                self.config())
        self.message_ = message
        return self

    def predict_proba(self, ps: PointSample) -> np.ndarray:
        check_is_fitted(self, "decoder_")
        return decode3d(self.decoder_, ps)

    def predict(self, ps: PointSample) -> np.ndarray:
        return (self.predict_proba(ps) >= 0.5).astype(np.uint8)

    def score(self, cloud: GaussianCloud, message: Message | None = None) -> float:
        check_is_fitted(self, "decoder_")
        msg = message or self.message_
        return evaluate3d(self.decoder_, cloud, msg, {"None": "none"}, k=self.k)["None"]

    def save(self, path, disc_path=None) -> None:
        check_is_fitted(self, "decoder_")
        meta = {"kind": "decoder3d", "config": json.loads(json.dumps(asdict(self.config())))}
        save_weights(path, self.decoder_.state_dict(), meta)
        if disc_path is not None:
            save_weights(disc_path, self.discriminator_.state_dict(), {**meta, "kind": "discriminator3d"})

    @classmethod
    def load(cls, path) -> "PointMessageDecoder":
        state, meta = load_weights(path)
        if meta.get("kind") != "decoder3d":
            raise InvalidParameterError(f"{path} does not hold 3D decoder weights")
        cfg = meta["config"]
        est = cls(**{**cfg, "widths": tuple(cfg["widths"])})
        est.decoder_ = PointNetDecoder(N_BITS, est.widths)
        est.decoder_.load_state_dict(state)
        est.decoder_.eval()
        for p in est.decoder_.parameters():
            p.requires_grad_(False)
        return est
