import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import ndimage

from cmslf import io
from cmslf.cli import build_render_inputs, main

SCENES = Path(__file__).resolve().parents[1] / "scenes"


def _render_config(tmp_path, px=48, beta=0.3):
    rig = yaml.safe_load((SCENES / "rig_full.yaml").read_text())
    rig.update(image_width=px, image_height=px)
    cfg = {"rig": rig, "scene": {"objects": [{
        "type": "sphere", "center": [0, 0, 128], "radius": 20,
        "material": {"coefficients": [0.7, 0.1, -0.05], "specular": beta, "shininess": 8}}]},
        "seed": 0}
    p = tmp_path / "render.yaml"
    p.write_text(yaml.safe_dump(cfg))
    return p


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Render, reconstruct (twice) and evaluate a small specular sphere."""
    d = tmp_path_factory.mktemp("cli")
    cfg = _render_config(d)
    assert main(["render", "--config", str(cfg), "--out", str(d / "data")]) == 0
    for name in ("est", "est2"):
        assert main(["reconstruct", "--data", str(d / "data"), "--out", str(d / name)]) == 0
    assert main(["evaluate", "--estimate", str(d / "est"), "--data", str(d / "data"),
                 "--out", str(d / "eval")]) == 0
    return d


def test_render_writes_dataset(pipeline):
    lf = io.load_lightfield(pipeline / "data")
    assert lf.images.shape == (12, 12, 48, 48)
    assert {"depth", "normal", "mask", "coefficients"} <= set(lf.ground_truth)


def test_reconstruct_outputs(pipeline):
    est = io.load_estimate(pipeline / "est")
    doc = json.loads((pipeline / "est" / io.ESTIMATE).read_text())
    s = doc["summary"]
    assert s["pixels"] == int(est["mask"].sum())
    assert s["labels"]["specular"] > 0
    assert s["options"]["passes"] == 2
    for name in ("surface.ply", "normal.png", "depth.png", "reflectance.png"):
        assert (pipeline / "est" / name).exists()


def test_reconstruct_is_byte_identical(pipeline):
    a, b = pipeline / "est", pipeline / "est2"
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_mask_matches_silhouette(pipeline):
    gt = io.load_lightfield(pipeline / "data").ground_truth["mask"].astype(bool)
    est = io.load_estimate(pipeline / "est")["mask"].astype(bool)
    boundary = gt ^ ndimage.binary_erosion(gt)
    near = ndimage.binary_dilation(boundary)
    assert not np.any((gt ^ est) & ~near)


def test_evaluate_report(pipeline, capsys):
    rows = dict(line.split(",", 1) for line in
                (pipeline / "eval" / "metrics.csv").read_text().splitlines()[1:])
    assert float(rows["angular_mean"]) < 2.0
    main(["evaluate", "--estimate", str(pipeline / "est"), "--data", str(pipeline / "data"),
          "--out", str(pipeline / "eval2")])
    assert "angular_mean," in capsys.readouterr().out


def test_probe_object_and_background(pipeline, tmp_path):
    assert main(["probe", "--data", str(pipeline / "data"), "--u", "24", "--v", "24",
                 "--out", str(tmp_path / "p")]) == 0
    info = json.loads((tmp_path / "p" / "probe.json").read_text())
    assert info["label"] in ("diffuse", "specular")
    assert 108 <= info["depth"] <= 125
    lines = (tmp_path / "p" / "curves.csv").read_text().splitlines()
    assert lines[0] == "z,C,S" and len(lines) == 1 + 86
    for name in ("curves.png", "msscam_columns.png", "msscam.pfm"):
        assert (tmp_path / "p" / name).exists()
    assert io.read_pfm(tmp_path / "p" / "msscam.pfm").shape == (12, 12)
    assert main(["probe", "--data", str(pipeline / "data"), "--u", "0", "--v", "0",
                 "--out", str(tmp_path / "q")]) == 0
    assert "background" in json.loads((tmp_path / "q" / "probe.json").read_text())["note"]
    assert main(["probe", "--data", str(pipeline / "data"), "--u", "48", "--v", "0",
                 "--out", str(tmp_path / "r")]) == 2


def test_missing_view_exit_code(pipeline, tmp_path, capsys):
    shutil.copytree(pipeline / "data", tmp_path / "d")
    (tmp_path / "d" / io.view_name(2, 7)).unlink()
    assert main(["reconstruct", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o")]) == 2
    assert "i=2, j=7" in capsys.readouterr().err


def test_yaml_error_names_file_and_line(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("rig:\n  ring_radii: [29, 30\nscene: {}\n")
    assert main(["render", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert f"{p}:" in err and err.split(f"{p}:")[1].split(":")[0].isdigit()


def test_invalid_config_values(tmp_path, capsys):
    p = _render_config(tmp_path)
    cfg = yaml.safe_load(p.read_text())
    cfg["rig"]["no_such_field"] = 1
    p.write_text(yaml.safe_dump(cfg))
    assert main(["render", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert str(p) in capsys.readouterr().err
    assert main(["render", "--config", str(tmp_path / "none.yaml"), "--out", "x"]) == 2
    opts = tmp_path / "opts.yaml"
    opts.write_text("passes: 0\n")
    assert main(["reconstruct", "--data", str(tmp_path), "--out", "x",
                 "--config", str(opts)]) == 2


def test_runtime_failure_exit_code(tmp_path, capsys):
    # a valid config whose material is negative somewhere is a runtime failure
    p = _render_config(tmp_path)
    cfg = yaml.safe_load(p.read_text())
    cfg["scene"]["objects"][0]["material"]["coefficients"] = [0.1, 0.5, 0.0]
    p.write_text(yaml.safe_dump(cfg))
    assert main(["render", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "negative" in capsys.readouterr().err


def test_threads_option(tmp_path):
    p = _render_config(tmp_path, px=16, beta=0.0)
    assert main(["--threads", "1", "render", "--config", str(p), "--out",
                 str(tmp_path / "o")]) == 0
    assert main(["--threads", "0", "render", "--config", str(p), "--out",
                 str(tmp_path / "o")]) == 2


def test_shipped_scenes_load():
    rig, spectral, scene, noise, seed = build_render_inputs(SCENES / "sphere_diffuse.yaml")
    assert (rig.image_width, rig.image_height) == (320, 320)
    assert rig.cameras_per_ring * rig.num_rings == 144
    assert spectral.num_bands == 12 and noise == 0.0 and seed == 0
    for f in sorted(SCENES.glob("*.yaml")):
        if f.name.startswith(("rig_", "reconstruct_")):
            continue
        build_render_inputs(f)


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "cmslf.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for cmd in ("render", "reconstruct", "evaluate", "probe"):
        assert cmd in out
