"""``gsmark`` command line: one subcommand per pipeline stage.

Every stage reads its predecessors from, and writes its own artifacts into,
one experiment directory given by ``--out``::

    codec/      decoder2d.gsmw encoder2d.gsmw
    scene/      cameras.json heldout_cameras.json targets.npz gt.ply
    fit/        fitted.ply
    uncertainty/ uncertainty.npy selection.json heatmap.png
    embed/      markers.ply watermarked.ply message.txt embed_log.csv
    train3d/    decoder3d.gsmw discriminator3d.gsmw train3d_log.csv
    eval/       report.json report.csv

Each stage directory also gets ``metrics.json`` (deterministic),
``manifest.json`` (config snapshot, input hashes, versions) and
``timing.json`` (wall clock, excluded from determinism checks).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from gsmark.cloud import GaussianCloud, Origin, load_ply, save_ply, union
from gsmark.message import Message
from gsmark.validation import InvalidParameterError

log = logging.getLogger("gsmark")

STAGES = ("pretrain2d", "make-scene", "fit", "uncertainty", "embed", "train3d", "eval",
          "render", "attack")

DEFAULTS = {
    "seed": 0,
    "message": None,
    "background": [1.0, 1.0, 1.0],
    "scene": {"seed": 0, "n_gaussians": 500, "n_views": 8, "resolution": 64, "n_heldout": 2},
    "fit": {"n_init": 500, "steps": 2000, "seed": 0, "views_per_step": 1},
    "pretrain2d": {"corpus_size": 256, "holdout": 32, "corpus_dir": None, "channels": 32,
                   "steps": 5000, "batch_size": 16, "lr": 1e-3, "image_weight": 80.0, "warmup": 0.1,
                   "distortions": True, "jitter": True, "seed": 0},
    "uncertainty": {"multiplier": 0.13, "normalize_groups": True, "method": "exact"},
    "embed": {"lambda1": 10.0, "lambda2": 1000.0, "steps": 1000, "views_per_step": 8,
              "lr_scale": 10.0, "opacity_factor": 0.2, "rec_reduction": "mean", "distort": True,
              "distort_prob": 1.0, "seed": 0},
    "train3d": {"lambda1": 2.0, "lambda2": 1.0, "lr": 1e-4, "steps": 2000, "k": 1024,
                "batch_size": 4, "seed": 0, "adversarial_decoder": False, "null_weight": 1.0},
    "eval": {"n_resamples": 20, "k": 1024, "views": "heldout", "cross_domain": "rotate:pi/6"},
    "render": {"cloud": "watermarked"},
    "attack": {"name": None, "input": None, "seed": 0},
}


class StageError(RuntimeError):
    """Raised for missing predecessors or invalid configuration; printed as one line."""

    def __init__(self, kind: str, **fields):
        self.kind = kind
        self.fields = fields
        super().__init__(self.line())

    def line(self) -> str:
        parts = " ".join(f"{k}={json.dumps(v) if not isinstance(v, str) else v}"
                         for k, v in self.fields.items())
        return f"gsmark: error: {self.kind} {parts}".rstrip()


# ------------------------------------------------------------------ config

def _coerce(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the config file, then ``--set a.b=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise StageError("invalid-config", violations=["config file must hold a mapping"])
        _merge(cfg, data)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise StageError("invalid-config", violations=[f"--set expects key=value, got {item!r}"])
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _coerce(value)
    validate_config(cfg)
    return cfg


def _merge(base: dict, extra: dict) -> None:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def validate_config(cfg: dict) -> None:
    """Collect every violation and raise once."""
    bad = []

    def unknown(section, ref):
        for k in cfg.get(section, {}) if isinstance(cfg.get(section), dict) else []:
            if k not in ref:
                bad.append(f"{section}.{k}: unknown key")

    for k in cfg:
        if k not in DEFAULTS:
            bad.append(f"{k}: unknown key")
    for section, ref in DEFAULTS.items():
        if isinstance(ref, dict):
            if not isinstance(cfg.get(section), dict):
                bad.append(f"{section}: must be a mapping")
            else:
                unknown(section, ref)

    def positive(path, integer=True):
        section, key = path.split(".")
        v = cfg.get(section, {}).get(key)
        ok = isinstance(v, int) and not isinstance(v, bool) if integer else isinstance(v, (int, float))
        if not ok or v <= 0:
            bad.append(f"{path}: must be a positive {'integer' if integer else 'number'}")

    for path in ("scene.n_gaussians", "scene.n_views", "scene.resolution", "fit.steps",
                 "fit.n_init", "pretrain2d.steps", "pretrain2d.corpus_size", "embed.steps",
                 "embed.views_per_step", "train3d.steps", "train3d.k", "eval.n_resamples"):
        positive(path)
    for path in ("uncertainty.multiplier", "embed.lr_scale", "train3d.lr", "pretrain2d.lr"):
        positive(path, integer=False)
    for path in ("embed.lambda1", "embed.lambda2", "train3d.lambda1", "train3d.lambda2",
                 "train3d.null_weight"):
        section, key = path.split(".")
        v = cfg.get(section, {}).get(key)
        if not isinstance(v, (int, float)) or v < 0:
            bad.append(f"{path}: must be a number >= 0")
    if cfg.get("message") is not None:
        try:
            Message.parse(str(cfg["message"]))
        except InvalidParameterError as exc:
            bad.append(f"message: {exc}")
    bg = cfg.get("background")
    if not (isinstance(bg, (list, tuple)) and len(bg) == 3
            and all(isinstance(b, (int, float)) and 0 <= b <= 1 for b in bg)):
        bad.append("background: must be three numbers in [0, 1]")
    if cfg.get("eval", {}).get("views") not in ("heldout", "train", "all"):
        bad.append("eval.views: must be heldout, train or all")
    if bad:
        raise StageError("invalid-config", violations=bad)


# ---------------------------------------------------------------- artifacts

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Experiment:
    """Paths and bookkeeping for one experiment directory."""

    def __init__(self, root, cfg: dict, command: str):
        self.root = Path(root)
        self.cfg = cfg
        self.command = command
        self.inputs: dict[str, str] = {}
        self.t0 = time.perf_counter()

    def stage(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def need(self, rel: str, producer: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise StageError("missing-input", command=self.command, artifact=str(p),
                             hint=f"run 'gsmark {producer} --out {self.root}' first")
        self.inputs[rel] = sha256(p)
        return p

    def finish(self, stage: str, metrics: dict) -> None:
        d = self.stage(stage)
        (d / "metrics.json").write_text(dumps(metrics))
        manifest = {
            "command": self.command,
            "config": self.cfg,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {p.name: sha256(p) for p in sorted(d.iterdir())
                        if p.is_file() and p.name not in ("manifest.json", "timing.json")},
            "versions": versions(),
        }
        (d / "manifest.json").write_text(dumps(manifest))
        (d / "timing.json").write_text(dumps({"seconds": time.perf_counter() - self.t0}))


def versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version

    try:
        pkg = version("artifact")
    except PackageNotFoundError:  # pragma: no cover
        pkg = "unknown"
    return {"gsmark": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__}


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _message(exp: Experiment, args) -> Message:
    text = args.message or exp.cfg.get("message")
    if text is None:
        saved = exp.root / "embed" / "message.txt"
        if saved.exists():
            return Message.load(saved)
        raise StageError("missing-input", command=exp.command, artifact="message",
                         hint="pass --message <12-hex> or set message in the config")
    return Message.parse(str(text))


def _bg(cfg) -> tuple:
    return tuple(float(b) for b in cfg["background"])


# ----------------------------------------------------------------- commands

def cmd_pretrain2d(exp: Experiment, args) -> dict:
    from gsmark.imageio import load_png_dir
    from gsmark.wm2d import HiddenCodec, make_corpus

    c = exp.cfg["pretrain2d"]
    if c["corpus_dir"]:
        corpus = load_png_dir(c["corpus_dir"])
    else:
        corpus = make_corpus(c["corpus_size"], exp.cfg["scene"]["resolution"], seed=c["seed"])
    n_hold = int(c["holdout"])
    train, held = corpus[:len(corpus) - n_hold], corpus[len(corpus) - n_hold:]
    if len(train) < 200:
        raise StageError("invalid-config",
                         violations=[f"corpus leaves {len(train)} training images, need >= 200"])
    codec = HiddenCodec(channels=c["channels"], resolution=exp.cfg["scene"]["resolution"],
                        steps=c["steps"], batch_size=c["batch_size"], lr=c["lr"],
                        image_weight=c["image_weight"], distortions=c["distortions"],
                        warmup=c["warmup"], jitter=c["jitter"], seed=c["seed"]).fit(train)
    d = exp.stage("codec")
    codec.save(d / "decoder2d.gsmw", d / "encoder2d.gsmw")
    h = codec.history_
    tail = slice(-min(100, len(h["loss"])), None)
    out = {"final_loss": float(np.mean(h["loss"][tail])), "train_bit_accuracy": float(np.mean(h["acc"][tail])),
           "image_mse": float(np.mean(h["mse"][tail])), "corpus_size": len(corpus), "n_train": len(train)}
    if held:
        from gsmark.metrics import bit_accuracy, psnr

        msgs = [Message.random([c["seed"], i]) for i in range(len(held))]
        marked = [codec.encode(img, m) for img, m in zip(held, msgs)]
        out["holdout_psnr"] = float(np.mean([psnr(a, b) for a, b in zip(held, marked)]))
        out["holdout_bit_accuracy"] = float(np.mean([bit_accuracy(codec.predict_proba(w), m.bits)
                                                     for w, m in zip(marked, msgs)]))
    return out


def cmd_make_scene(exp: Experiment, args) -> dict:
    from gsmark.scenes import make_toy_scene, save_scene

    c = exp.cfg["scene"]
    scene = make_toy_scene(seed=c["seed"], n_gaussians=c["n_gaussians"], n_views=c["n_views"],
                           resolution=c["resolution"], n_heldout=c["n_heldout"])
    save_scene(scene, exp.stage("scene"))
    return {"n_gaussians": len(scene.gt_cloud), "n_views": len(scene.cameras),
            "n_heldout": len(scene.heldout_cameras), "gt_digest": scene.gt_cloud.digest()}


def _scene(exp: Experiment):
    from gsmark.scenes import load_scene

    exp.need("scene/gt.ply", "make-scene")
    exp.need("scene/cameras.json", "make-scene")
    return load_scene(exp.root / "scene")


def cmd_fit(exp: Experiment, args) -> dict:
    from gsmark.metrics import psnr
    from gsmark.render import render
    from gsmark.scenes import fit_cloud

    scene = _scene(exp)
    c = exp.cfg["fit"]
    cloud, info = fit_cloud(scene.target_images, scene.cameras, n_init=c["n_init"], steps=c["steps"],
                            seed=c["seed"], background=_bg(exp.cfg),
                            views_per_step=c["views_per_step"])
    save_ply(cloud, exp.stage("fit") / "fitted.ply")
    held = [psnr(render(cloud, cam, _bg(exp.cfg)), img)
            for cam, img in zip(scene.heldout_cameras, scene.heldout_images)]
    return {"train_psnr": float(np.mean(info["psnr"])),
            "heldout_psnr": float(np.mean(held)) if held else None,
            "final_loss": float(np.mean(info["losses"][-50:])), "n_gaussians": len(cloud)}


def _fitted(exp: Experiment) -> GaussianCloud:
    return load_ply(exp.need("fit/fitted.ply", "fit"))


def cmd_uncertainty(exp: Experiment, args) -> dict:
    from gsmark.fisher import UncertaintyEstimator, uncertainty_heatmap
    from gsmark.imageio import save_png

    scene, cloud = _scene(exp), _fitted(exp)
    c = exp.cfg["uncertainty"]
    est = UncertaintyEstimator(multiplier=c["multiplier"], normalize_groups=c["normalize_groups"],
                               method=c["method"], background=_bg(exp.cfg)).fit(cloud, scene.cameras)
    d = exp.stage("uncertainty")
    np.save(d / "uncertainty.npy", est.uncertainty_)
    (d / "selection.json").write_text(dumps({"tau": est.threshold_, "multiplier": c["multiplier"],
                                             "selected": est.selected_.tolist()}))
    heat = uncertainty_heatmap(cloud, est.uncertainty_, scene.cameras[0])
    save_png(heat / max(float(heat.max()), 1e-30), d / "heatmap.png")
    return {"tau": float(est.threshold_), "n_selected": int(len(est.selected_)),
            "u_mean": float(np.mean(est.uncertainty_)), "u_max": float(np.max(est.uncertainty_))}


def _decoder2d(exp: Experiment):
    from gsmark.wm2d import HiddenCodec

    return HiddenCodec.load(exp.need("codec/decoder2d.gsmw", "pretrain2d")).decoder_


def cmd_embed(exp: Experiment, args) -> dict:
    from gsmark.marker import EmbedConfig, densify, embed, save_checkpoint

    decoder = _decoder2d(exp)
    scene, cloud = _scene(exp), _fitted(exp)
    sel = json.loads(exp.need("uncertainty/selection.json", "uncertainty").read_text())
    msg = _message(exp, args)
    c = dict(exp.cfg["embed"])
    factor = c.pop("opacity_factor")
    cfg = EmbedConfig(**c, background=_bg(exp.cfg))
    markers = densify(cloud, np.asarray(sel["selected"], dtype=np.int64), seed=c["seed"],
                      opacity_factor=factor)
    result = embed(cloud, markers, decoder, msg, scene.cameras, cfg)
    d = exp.stage("embed")
    save_checkpoint(d, result.markers, cfg, result.log, msg)
    save_ply(union(cloud, result.markers), d / "watermarked.ply")
    msg.save(d / "message.txt")
    fin = result.final
    return {"n_markers": len(result.markers), "final_bitacc": fin.get("bitacc"),
            "final_psnr": fin.get("psnr"), "final_L_msg": fin.get("L_msg"),
            "final_L_rec": fin.get("L_rec"), "message": msg.to_hex()}


def _watermarked(exp: Experiment) -> GaussianCloud:
    return load_ply(exp.need("embed/watermarked.ply", "embed"))


def cmd_train3d(exp: Experiment, args) -> dict:
    from gsmark.wm3d import PointMessageDecoder

    wm, cloud = _watermarked(exp), _fitted(exp)
    msg = _message(exp, args)
    est = PointMessageDecoder(**exp.cfg["train3d"]).fit(wm, cloud, msg)
    d = exp.stage("train3d")
    est.save(d / "decoder3d.gsmw", d / "discriminator3d.gsmw")
    with open(d / "train3d_log.csv", "w") as f:
        f.write("step,bce,adv,acc,spec\n")
        for r in est.log_:
            f.write(f"{r['step']},{r['bce']!r},{r['adv']!r},{r['acc']!r},{r['spec']}\n")
    tail = est.log_[-100:]
    return {"final_bce": float(np.mean([r["bce"] for r in tail])),
            "final_adv": float(np.mean([r["adv"] for r in tail])),
            "train_accuracy": float(np.mean([r["acc"] for r in tail]))}


def cmd_eval(exp: Experiment, args) -> dict:
    from gsmark.pipeline import build_report, cross_domain_2d
    from gsmark.wm3d import PointMessageDecoder

    decoder = _decoder2d(exp)
    scene = _scene(exp)
    original = _fitted(exp)
    wm = load_ply(args.input) if args.input else _watermarked(exp)
    if args.input:
        exp.inputs[str(args.input)] = sha256(Path(args.input))
    msg = _message(exp, args)
    c = exp.cfg["eval"]
    cams = {"heldout": scene.heldout_cameras, "train": scene.cameras,
            "all": scene.heldout_cameras + scene.cameras}[c["views"]] or scene.cameras
    dec3d = None
    if (exp.root / "train3d" / "decoder3d.gsmw").exists():
        dec3d = PointMessageDecoder.load(exp.need("train3d/decoder3d.gsmw", "train3d")).decoder_
    report = build_report(original, wm, cams, decoder, msg, _bg(exp.cfg), dec3d,
                          n_resamples=c["n_resamples"], k=c["k"], seed=exp.cfg["seed"])
    if dec3d is None:
        report.notes.append("no 3D decoder in the experiment: Gaussian table skipped")
    if c["cross_domain"]:
        report.accuracy_2d[f"3D {c['cross_domain']}"] = cross_domain_2d(
            decoder, wm, cams, msg, c["cross_domain"], _bg(exp.cfg), seed=exp.cfg["seed"])
    d = exp.stage("eval")
    (d / "report.json").write_text(report.to_json() + "\n")
    (d / "report.csv").write_text(report.to_csv())
    return report.to_dict()


def cmd_render(exp: Experiment, args) -> dict:
    from gsmark.imageio import save_png
    from gsmark.render import render

    scene = _scene(exp)
    if args.input:
        cloud = load_ply(args.input)
        exp.inputs[str(args.input)] = sha256(Path(args.input))
    else:
        which = exp.cfg["render"]["cloud"]
        rel = {"watermarked": ("embed/watermarked.ply", "embed"), "fitted": ("fit/fitted.ply", "fit"),
               "gt": ("scene/gt.ply", "make-scene")}.get(which)
        if rel is None:
            raise StageError("invalid-config", violations=["render.cloud: must be watermarked, fitted or gt"])
        cloud = load_ply(exp.need(*rel))
    d = exp.stage("render")
    digests = []
    for i, cam in enumerate(scene.cameras + scene.heldout_cameras):
        img = render(cloud, cam, _bg(exp.cfg))
        save_png(img, d / f"view_{i:03d}.png")
        digests.append(hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest())
    return {"n_views": len(digests), "image_sha256": digests}


def cmd_attack(exp: Experiment, args) -> dict:
    from gsmark.distort2d import DistortionSpec2D, distort2d
    from gsmark.imageio import load_png, save_png
    from gsmark.wm3d import DistortionSpec3D, distort_cloud

    c = exp.cfg["attack"]
    name = args.attack or c["name"]
    src = args.input or c["input"]
    if not name or not src:
        raise StageError("invalid-config", violations=["attack needs --attack <name> and --input <file>"])
    src = Path(src)
    if not src.exists():
        raise StageError("missing-input", command="attack", artifact=str(src), hint="check --input")
    exp.inputs[str(src)] = sha256(src)
    d = exp.stage("attack")
    tag = name.replace(":", "_").replace("/", "_")
    if src.suffix.lower() == ".ply":
        cloud = load_ply(src)
        out = distort_cloud(cloud, DistortionSpec3D.parse(name, cloud.bounding_diagonal()), c["seed"])
        dst = d / f"{src.stem}_{tag}.ply"
        save_ply(out, dst)
        return {"attack": name, "output": dst.name, "n_gaussians": len(out), "digest": out.digest()}
    img = distort2d(load_png(src), DistortionSpec2D.parse(name), seed=c["seed"])
    dst = d / f"{src.stem}_{tag}.png"
    save_png(img, dst)
    return {"attack": name, "output": dst.name, "sha256": sha256(dst)}


COMMANDS = {"pretrain2d": (cmd_pretrain2d, "codec"), "make-scene": (cmd_make_scene, "scene"),
            "fit": (cmd_fit, "fit"), "uncertainty": (cmd_uncertainty, "uncertainty"),
            "embed": (cmd_embed, "embed"), "train3d": (cmd_train3d, "train3d"),
            "eval": (cmd_eval, "eval"), "render": (cmd_render, "render"),
            "attack": (cmd_attack, "attack")}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsmark", description="Watermark 3D Gaussian splatting models.")
    p.add_argument("command", choices=STAGES)
    p.add_argument("--config", type=Path, help="YAML or JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set embed.steps=500")
    p.add_argument("--out", type=Path, required=True, help="experiment directory")
    p.add_argument("--message", help="48-bit message as 12 hex characters")
    p.add_argument("--input", type=Path, help="input file for eval, render or attack")
    p.add_argument("--attack", help="attack name for the attack command, e.g. jpeg:50")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    cfg = load_config(args.config, args.overrides)
    if args.message:
        try:
            cfg["message"] = Message.parse(args.message).to_hex()
        except InvalidParameterError as exc:
            raise StageError("invalid-config", violations=[f"--message: {exc}"]) from None
    torch.manual_seed(cfg["seed"])
    exp = Experiment(args.out, cfg, args.command)
    fn, stage = COMMANDS[args.command]
    metrics = fn(exp, args)
    exp.finish(stage, metrics)
    return metrics


def main(argv=None) -> int:
    try:
        run(argv)
    except StageError as exc:
        print(exc.line(), file=sys.stderr)
        return 2
    except (InvalidParameterError, FloatingPointError, ValueError, OSError) as exc:
        print(f"gsmark: error: {type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
