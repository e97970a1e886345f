import json

import numpy as np
import pytest

from gsmark import cli
from gsmark.cloud import load_ply

TINY = ["--set", "scene.n_gaussians=40", "--set", "scene.resolution=32", "--set", "fit.n_init=40",
        "--set", "fit.steps=5"]


def test_defaults_validate():
    cfg = cli.load_config()
    assert cfg == cli.DEFAULTS and cfg is not cli.DEFAULTS


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("embed:\n  steps: 50\nfit:\n  steps: 7\n")
    cfg = cli.load_config(path, ["embed.steps=60", "background=[0, 0, 0]"])
    assert cfg["embed"]["steps"] == 60 and cfg["fit"]["steps"] == 7
    assert cfg["embed"]["lambda1"] == cli.DEFAULTS["embed"]["lambda1"]
    assert cfg["background"] == [0, 0, 0]


def test_every_violation_reported():
    with pytest.raises(cli.StageError) as err:
        cli.load_config(None, ["embed.steps=0", "fit.bogus=1", "background=[2, 0, 0]",
                               "message=xyz", "eval.views=none"])
    v = err.value.fields["violations"]
    assert len(v) == 5
    assert any(s.startswith("embed.steps") for s in v) and any("fit.bogus" in s for s in v)


def test_set_needs_equals():
    with pytest.raises(cli.StageError):
        cli.load_config(None, ["embed.steps"])


def test_missing_input_is_one_line(tmp_path, capsys):
    assert cli.main(["fit", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err.strip()
    assert "\n" not in err
    assert err.startswith("gsmark: error: missing-input") and "make-scene" in err


def test_invalid_config_exit_code(tmp_path, capsys):
    assert cli.main(["make-scene", "--out", str(tmp_path), "--set", "scene.n_views=0"]) == 2
    assert "invalid-config" in capsys.readouterr().err
    assert cli.main(["make-scene", "--out", str(tmp_path), "--message", "zz"]) == 2


def test_scene_fit_render_attack(tmp_path):
    out = str(tmp_path)
    assert cli.main(["make-scene", "--out", out] + TINY) == 0
    assert cli.main(["fit", "--out", out] + TINY) == 0
    assert cli.main(["render", "--out", out, "--set", "render.cloud=fitted"] + TINY) == 0
    metrics = json.loads((tmp_path / "render" / "metrics.json").read_text())
    assert metrics["n_views"] == 10
    manifest = json.loads((tmp_path / "fit" / "manifest.json").read_text())
    assert set(manifest["inputs"]) == {"scene/gt.ply", "scene/cameras.json"}
    assert "fitted.ply" in manifest["outputs"] and manifest["command"] == "fit"
    assert json.loads((tmp_path / "fit" / "timing.json").read_text())["seconds"] > 0

    ply = tmp_path / "fit" / "fitted.ply"
    assert cli.main(["attack", "--out", out, "--attack", "translate:0.5", "--input", str(ply)]) == 0
    moved = load_ply(tmp_path / "attack" / "fitted_translate_0.5.ply")
    shift = moved.positions - load_ply(ply).positions
    np.testing.assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), atol=1e-5)
    png = tmp_path / "render" / "view_000.png"
    assert cli.main(["attack", "--out", out, "--attack", "jpeg:50", "--input", str(png)]) == 0
    assert (tmp_path / "attack" / "view_000_jpeg_50.png").exists()


def test_attack_needs_input(tmp_path, capsys):
    assert cli.main(["attack", "--out", str(tmp_path), "--attack", "jpeg:50"]) == 2
    assert cli.main(["attack", "--out", str(tmp_path), "--attack", "jpeg:50",
                     "--input", str(tmp_path / "nope.png")]) == 2
