"""Session fixtures.

The trained artifacts (2D codec, fitted scene, watermarked clouds, 3D
decoder) take tens of minutes to build on one CPU core. Set
``GSMARK_CACHE=<dir>`` to pickle them between runs; each entry also keeps
the wall-clock seconds its build took so runtime checks stay meaningful.
"""

import os
import pickle
import time
from pathlib import Path

import pytest
import torch

from gsmark.cloud import union
from gsmark.fisher import UncertaintyEstimator
from gsmark.marker import EmbedConfig, densify, embed
from gsmark.message import Message
from gsmark.scenes import fit_cloud, make_toy_scene
from gsmark.wm2d import HiddenCodec, make_corpus
from gsmark.wm3d import Train3DConfig, train3d

CORPUS_SIZE, CORPUS_TRAIN = 256, 224
FIT_STEPS = 2000
OPACITY_FACTOR = 0.2
EMBED_MULTIPLIER = 0.13
ABLATION = (3.7, 0.24)


def _built(name, build):
    """``(value, seconds)``, read from GSMARK_CACHE when present."""
    root = os.environ.get("GSMARK_CACHE")
    path = Path(root) / f"{name}.pkl" if root else None
    if path is not None and path.exists():
        with open(path, "rb") as f:
            return pickle.load(f)
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    value = build()
    out = (value, time.perf_counter() - t0)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            pickle.dump(out, f)
    return out


@pytest.fixture(scope="session")
def toy_scene():
    return make_toy_scene(seed=0)


@pytest.fixture(scope="session")
def message():
    return Message.random(1)


@pytest.fixture(scope="session")
def codec_run():
    return _built("codec", lambda: HiddenCodec(seed=0).fit(make_corpus(CORPUS_SIZE, 64, seed=0)[:CORPUS_TRAIN]))


@pytest.fixture(scope="session")
def codec(codec_run):
    return codec_run[0]


@pytest.fixture(scope="session")
def fitted_run(toy_scene):
    def build():
        cloud, info = fit_cloud(toy_scene.target_images, toy_scene.cameras, steps=FIT_STEPS, seed=0)
        return cloud
    return _built("fit", build)


@pytest.fixture(scope="session")
def fitted(fitted_run):
    return fitted_run[0]


@pytest.fixture(scope="session")
def uncertainty(fitted, toy_scene):
    return UncertaintyEstimator(background=toy_scene.background).fit(fitted, toy_scene.cameras)


def _watermark(multiplier, fitted, scene, codec, message, uncertainty):
    idx = uncertainty.select(multiplier)
    markers = densify(fitted, idx, seed=0, opacity_factor=OPACITY_FACTOR)
    result = embed(fitted, markers, codec.decoder_, message, scene.cameras, EmbedConfig.desk(seed=0))
    return {"cloud": union(fitted, result.markers), "n_markers": len(idx), "final": result.final}


@pytest.fixture(scope="session")
def watermarked_run(fitted, toy_scene, codec, message, uncertainty):
    return _built(f"embed_{EMBED_MULTIPLIER}", lambda: _watermark(
        EMBED_MULTIPLIER, fitted, toy_scene, codec, message, uncertainty))


@pytest.fixture(scope="session")
def watermarked(watermarked_run):
    return watermarked_run[0]["cloud"]


@pytest.fixture(scope="session")
def ablation_runs(fitted, toy_scene, codec, message, uncertainty):
    """Embeddings at the threshold-ablation multipliers, keyed by multiplier."""
    return {m: _built(f"embed_{m}", lambda m=m: _watermark(m, fitted, toy_scene, codec, message, uncertainty))
            for m in ABLATION}


@pytest.fixture(scope="session")
def decoder3d_run(watermarked, fitted, message):
    return _built(f"train3d_{EMBED_MULTIPLIER}", lambda: train3d(watermarked, fitted, message, Train3DConfig()))


@pytest.fixture(scope="session")
def decoder3d(decoder3d_run):
    return decoder3d_run[0][0]


# ------------------------------------------------------------ acceptance lines

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(name, ok, detail)`` records one acceptance line and asserts ``ok``."""
    def record(name, ok, detail=""):
        ACCEPTANCE[name] = (bool(ok), detail)
        assert ok, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n[2:])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'} {detail}")
