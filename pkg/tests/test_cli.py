import argparse
import csv
import json

import numpy as np
import pytest
from filelock import FileLock

from sfmwarp import cli
from sfmwarp.geometry import CameraModel, PoseParams, pose_to_transform, project_grid
from sfmwarp.imagecore import to_grid, to_tensor
from sfmwarp.imageio import read_image, write_image
from sfmwarp.synthetic import save_spec, translating_pair_scene
from sfmwarp.warp import forward_warp

CAM = CameraModel(20.0, 20.0, 11.5, 7.5, 16, 24)


@pytest.fixture
def scene(tmp_path):
    p = tmp_path / "scene.yaml"
    save_spec(translating_pair_scene(CAM, 0.05, cell_px=4.0), p)
    return p


def _synth(scene, out, *extra):
    return cli.main(["synth", "--scene", str(scene), "--out", str(out), *extra])


def test_synth_is_byte_identical(scene, tmp_path):
    assert _synth(scene, tmp_path / "a") == 0
    assert _synth(scene, tmp_path / "b") == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if not p.name.startswith("."))
    assert "frame_t.pfm" in names and "manifest.json" in names
    for n in names:
        if n != "manifest.json":  # it records the output directory
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    ma, mb = (json.loads((tmp_path / d / "manifest.json").read_text()) for d in "ab")
    assert ma["outputs"] == mb["outputs"]


def test_synth_manifest_digests(scene, tmp_path):
    assert _synth(scene, tmp_path / "a") == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["command"] == "synth"
    import hashlib
    for name, digest in man["outputs"].items():
        assert hashlib.sha256((tmp_path / "a" / name).read_bytes()).hexdigest() == digest


def test_optimize_zero_iterations(scene, tmp_path):
    assert _synth(scene, tmp_path / "b") == 0
    out = tmp_path / "run"
    rc = cli.main(["optimize", "--bundle", str(tmp_path / "b"), "--iterations", "0", "--scales", "2",
                   "--out", str(out), "--dump-warps"])
    assert rc == 0
    with open(out / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["iteration"] == "0"
    depth = read_image(out / "depth.pfm")
    assert depth.shape == (16, 24, 1) and np.all(depth > 0)
    # a constant initial inverse depth gives a constant depth map
    assert np.ptp(depth) < 1e-12
    assert (out / "warp_prev.png").exists() and (out / "checkpoint.bin").exists()


def test_optimize_few_iterations_lowers_loss(scene, tmp_path):
    assert _synth(scene, tmp_path / "b") == 0
    out = tmp_path / "run"
    rc = cli.main(["optimize", "--bundle", str(tmp_path / "b"), "--iterations", "5", "--scales", "1",
                   "--lr", "0.01", "--motion", "off", "--out", str(out)])
    assert rc == 0
    with open(out / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert float(rows[-1]["total"]) < float(rows[0]["total"])


def test_eval_perfect_and_scaled(tmp_path):
    rng = np.random.default_rng(0)
    gt = rng.uniform(1.0, 5.0, (12, 10, 1))
    write_image(gt, tmp_path / "gt.pfm")
    write_image(gt, tmp_path / "same.pfm")
    write_image(2.0 * gt, tmp_path / "double.pfm")
    assert cli.main(["eval", "--pred", str(tmp_path / "same.pfm"), "--truth", str(tmp_path / "gt.pfm"),
                     "--out", str(tmp_path / "e1")]) == 0
    assert cli.main(["eval", "--pred", str(tmp_path / "double.pfm"), "--truth", str(tmp_path / "gt.pfm"),
                     "--out", str(tmp_path / "e2")]) == 0
    with open(tmp_path / "e1" / "metrics.csv") as fh:
        m1 = next(csv.DictReader(fh))
    with open(tmp_path / "e2" / "metrics.csv") as fh:
        m2 = next(csv.DictReader(fh))
    assert float(m1["AbsRel"]) == 0.0 and float(m1["RMSE"]) == 0.0
    assert m1 == m2
    heat = read_image(tmp_path / "e1" / "error_heatmap.png")
    assert heat.shape == (12, 10, 3)


def test_eval_shape_mismatch_is_usage_error(tmp_path):
    write_image(np.ones((4, 4, 1)), tmp_path / "a.pfm")
    write_image(np.ones((4, 5, 1)), tmp_path / "b.pfm")
    assert cli.main(["eval", "--pred", str(tmp_path / "a.pfm"), "--truth", str(tmp_path / "b.pfm"),
                     "--out", str(tmp_path / "e")]) == 1


@pytest.mark.parametrize("direction", ["inverse", "forward"])
def test_warp_identity(tmp_path, direction):
    rng = np.random.default_rng(1)
    img = rng.uniform(0.0, 1.0, (10, 14, 1))
    write_image(img, tmp_path / "img.pfm")
    write_image(np.full((10, 14, 1), 3.0), tmp_path / "depth.pfm")
    out = tmp_path / "w"
    rc = cli.main(["warp", "--image", str(tmp_path / "img.pfm"), "--depth", str(tmp_path / "depth.pfm"),
                   "--camera", "12,12,6.5,4.5", "--direction", direction, "--out", str(out)])
    assert rc == 0
    mask = read_image(out / "mask.pfm")
    assert np.all(mask == 1.0)
    warped = read_image(out / "warped.png")
    if direction == "inverse":
        expected = img
    else:
        # the splat kernel blurs even under the identity flow
        cam = CameraModel(12.0, 12.0, 6.5, 4.5, 10, 14)
        flow = project_grid(cam, pose_to_transform(PoseParams()), to_tensor(np.full((10, 14, 1), 1 / 3.0)))
        expected = to_grid(forward_warp(to_tensor(img), flow, 10, 14).image)
    # the PNG is 8-bit
    assert np.abs(warped - expected).max() <= 0.5 / 255 + 1e-9


def test_warp_bad_pose_and_camera(tmp_path):
    write_image(np.ones((4, 4, 1)), tmp_path / "img.pfm")
    base = ["warp", "--image", str(tmp_path / "img.pfm"), "--depth", str(tmp_path / "img.pfm"),
            "--out", str(tmp_path / "w")]
    assert cli.main(base + ["--camera", "1,1,1"]) == 1
    assert cli.main(base + ["--camera", "4,4,1.5,1.5", "--pose", "0,0,0"]) == 1


def test_missing_input_is_io_error(tmp_path):
    assert cli.main(["eval", "--pred", str(tmp_path / "nope.pfm"), "--truth", str(tmp_path / "nope.pfm"),
                     "--out", str(tmp_path / "e")]) == 3
    assert cli.main(["optimize", "--bundle", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3


def test_corrupt_input_is_io_error(tmp_path):
    (tmp_path / "bad.pfm").write_bytes(b"XX\n1 1\n-1\n")
    assert cli.main(["eval", "--pred", str(tmp_path / "bad.pfm"), "--truth", str(tmp_path / "bad.pfm"),
                     "--out", str(tmp_path / "e")]) == 3


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["optimize", "--variant", "median"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 1
    assert cli.main(["synth", "--out", str(tmp_path / "s")]) == 1
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("no_such_key: 3\n")
    assert cli.main(["synth", "--config", str(cfg)]) == 1


def test_bad_scene_spec(tmp_path):
    (tmp_path / "s.yaml").write_text("planes:\n  - bounds: full\n")
    assert cli.main(["synth", "--scene", str(tmp_path / "s.yaml"), "--out", str(tmp_path / "o")]) == 1


def test_nonfinite_run_is_numeric_error(scene, tmp_path):
    b = tmp_path / "b"
    assert _synth(scene, b) == 0
    assert cli.main(["optimize", "--bundle", str(b), "--iterations", "1", "--scales", "1",
                     "--lr", "nan", "--out", str(tmp_path / "o")]) == 1
    frame = read_image(b / "frame_t.pfm")
    frame[3, 4] = np.nan
    write_image(frame, b / "frame_t.pfm")
    assert cli.main(["optimize", "--bundle", str(b), "--iterations", "1", "--scales", "1",
                     "--out", str(tmp_path / "o")]) == 2


def test_locked_output_dir(scene, tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    with FileLock(str(out / ".sfmwarp.lock")):
        assert _synth(scene, out) == 3
    assert _synth(scene, out) == 0


def _ns(**kw):
    base = dict(config=None, variant=None, scales=None, motion=None, iterations=None, seed=None,
                threads=None, scene=None, bundle=None, out=None, lr=None)
    base.update(kw)
    return argparse.Namespace(**base)


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("variant: avg\nscales: 2\niterations: 7\noptimizer:\n  lr: 0.5\noutput_dir: fromfile\n")
    for k in ("VARIANT", "SCALES", "MOTION", "ITERATIONS", "SEED", "OUT", "THREADS", "LR"):
        monkeypatch.delenv("SFMWARP_" + k, raising=False)
    c = cli.resolve_config(_ns(config=str(cfg)))
    assert (c.variant, c.scales, c.iterations, c.optimizer.lr, c.output_dir) == ("avg", 2, 7, 0.5, "fromfile")
    assert c.optimizer.beta1 == cli.RunConfig().optimizer.beta1
    monkeypatch.setenv("SFMWARP_SCALES", "4")
    monkeypatch.setenv("SFMWARP_LR", "0.25")
    monkeypatch.setenv("SFMWARP_MOTION", "off")
    c = cli.resolve_config(_ns(config=str(cfg)))
    assert (c.scales, c.optimizer.lr, c.motion, c.variant) == (4, 0.25, False, "avg")
    c = cli.resolve_config(_ns(config=str(cfg), scales=1, lr=0.125, variant="min", out="flag"))
    assert (c.scales, c.optimizer.lr, c.variant, c.output_dir) == (1, 0.125, "min", "flag")
    assert c.motion is False


def test_config_digest_stable():
    a, b = cli.RunConfig(), cli.RunConfig()
    assert a.digest() == b.digest()
    assert a.digest() != cli.RunConfig(scales=2).digest()


def test_heatmap_endpoints():
    h = cli.heatmap(np.array([[0.0, 1.0, 2.0]]), vmax=1.0)
    assert np.allclose(h[0, 0], cli.HEATMAP_TABLE[0])
    assert np.allclose(h[0, 1], cli.HEATMAP_TABLE[-1])
    assert np.allclose(h[0, 2], cli.HEATMAP_TABLE[-1])
