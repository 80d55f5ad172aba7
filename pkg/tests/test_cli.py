import json
import os
import stat

import numpy as np
import pytest

from thinrecon.cli import main
from thinrecon.colmap import ImageRecord, SceneModel, load_scene
from thinrecon.colmap import save_scene
from thinrecon.dataprep import save_png
from thinrecon.errors import NumericalError
from thinrecon.meshkit import export_obj
from thinrecon.synthetic import (
    make_camera,
    make_disc_mesh,
    render_views,
    ring_poses,
)
from thinrecon.tetgrid import SdfField


# ---------------------------------------------------------------------------
# fixtures

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A tiny on-disk scene: frames, masks, scene.json, and the true mesh."""
    root = tmp_path_factory.mktemp("scene")
    disc = make_disc_mesh(radius=0.5, thickness=0.1, segments=48, axis=1)
    intr = make_camera(24, focal=21.6)
    poses = ring_poses(6, 3.0, elevation_deg=25.0)
    views = render_views(disc, poses, intr)

    frames = root / "frames"
    masks = root / "masks"
    frames.mkdir()
    masks.mkdir()
    for v in views:
        save_png(frames / v.name, v.image)
        save_png(masks / v.name, v.mask)

    scene = SceneModel(
        cameras={1: intr},
        images=[ImageRecord(i + 1, v.name, 1, v.pose)
                for i, v in enumerate(views)],
    )
    scene_path = root / "scene.json"
    save_scene(scene, scene_path)

    mesh_path = root / "true.obj"
    export_obj(disc, mesh_path)
    return {"root": root, "frames": frames, "masks": masks,
            "scene": scene_path, "mesh": mesh_path}


def read_json(capsys):
    return json.loads(capsys.readouterr().out)


# ---------------------------------------------------------------------------
# top-level parser

def test_version_exits_zero(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip()


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 2


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    assert main(["prep", "--frames", str(tmp_path), "--out",
                 str(tmp_path / "o"), "--bogus"]) == 2


# ---------------------------------------------------------------------------
# prep

def make_frames(path, count, size=8):
    path.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        img = np.zeros((size, size, 3), dtype=np.uint8)
        img[size // 4: 3 * size // 4, size // 4: 3 * size // 4] = 200 + i
        save_png(path / f"frame_{i:04d}.png", img)


def test_prep_samples_and_writes_manifest(tmp_path, capsys):
    src = tmp_path / "raw"
    make_frames(src, 10)
    out = tmp_path / "prepped"
    assert main(["prep", "--frames", str(src), "--out", str(out),
                 "--count", "5", "--size", "4"]) == 0
    manifest = read_json(capsys)
    assert manifest["count"] == 5
    assert manifest["masks"] == "luma-threshold"
    # floor(i*10/5): every other frame starting at 0
    assert manifest["names"] == [f"frame_{i:04d}.png" for i in (0, 2, 4, 6, 8)]
    for name in manifest["names"]:
        assert (out / "frames" / name).exists()
        assert (out / "masks" / name).exists()
    from thinrecon.dataprep import load_mask
    m = load_mask(out / "masks" / manifest["names"][0])
    assert m.shape == (4, 4)
    assert set(np.unique(m)) <= {0, 255}
    assert (m > 0).any()


def test_prep_uses_provided_masks(tmp_path, capsys):
    src = tmp_path / "raw"
    make_frames(src, 4)
    md = tmp_path / "m"
    md.mkdir()
    for i in range(4):
        save_png(md / f"frame_{i:04d}.png",
                 np.full((8, 8), 255, dtype=np.uint8))
    out = tmp_path / "prepped"
    assert main(["prep", "--frames", str(src), "--out", str(out),
                 "--count", "4", "--size", "8", "--masks", str(md)]) == 0
    manifest = read_json(capsys)
    assert manifest["masks"] == "provided"
    from thinrecon.dataprep import load_mask
    assert np.all(load_mask(out / "masks" / "frame_0000.png") == 255)


def test_prep_too_few_frames(tmp_path, capsys):
    src = tmp_path / "raw"
    make_frames(src, 3)
    out = tmp_path / "o"
    assert main(["prep", "--frames", str(src), "--out", str(out),
                 "--count", "5", "--size", "8"]) == 2
    assert main(["prep", "--frames", str(src), "--out", str(out),
                 "--count", "5", "--size", "8", "--allow-fewer"]) == 0
    capsys.readouterr()


def test_prep_empty_directory_is_data_error(tmp_path):
    src = tmp_path / "empty"
    src.mkdir()
    assert main(["prep", "--frames", str(src), "--out",
                 str(tmp_path / "o")]) == 3


# ---------------------------------------------------------------------------
# poses

def write_text_model(path, poses, res=64, focal=80.0):
    path.mkdir(parents=True, exist_ok=True)
    (path / "cameras.txt").write_text(
        f"# cameras\n1 PINHOLE {res} {res} {focal} {focal} {res/2} {res/2}\n")
    lines = []
    for i, p in enumerate(poses):
        q = [repr(float(x)) for x in p.qvec]
        t = [repr(float(x)) for x in p.tvec]
        lines.append(f"{i+1} {' '.join(q)} {' '.join(t)} 1 view_{i:03d}.png")
        lines.append("")  # no 2D feature observations
    (path / "images.txt").write_text("\n".join(lines) + "\n")
    rng = np.random.default_rng(0)
    pts = rng.normal(0.0, 0.4, (30, 3))
    plines = [f"{i+1} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
              "10 20 30 0.5 1 0" for i, p in enumerate(pts)]
    (path / "points3D.txt").write_text("\n".join(plines) + "\n")


def test_poses_normalizes_and_saves(tmp_path, capsys):
    model_dir = tmp_path / "sparse"
    write_text_model(model_dir, ring_poses(4, 3.0, elevation_deg=15.0))
    out = tmp_path / "scene.json"
    assert main(["poses", "--model", str(model_dir), "--out", str(out),
                 "--format", "txt"]) == 0
    info = read_json(capsys)
    assert info["cameras"] == 1
    assert info["images"] == 4
    assert info["points"] == 30
    assert info["scale"] > 0
    scene = load_scene(out)
    assert scene.norm is not None
    for rec in scene.images:
        R = rec.pose.rotation()
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)


def test_poses_missing_model_dir(tmp_path):
    assert main(["poses", "--model", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "s.json")]) == 3


# ---------------------------------------------------------------------------
# reconstruct

RECON_FLAGS = ["--grid-res", "8", "--train-res", "24", "--iters", "3",
               "--batch-views", "3"]


def test_reconstruct_end_to_end(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["reconstruct", "--scene", str(dataset["scene"]),
               "--frames", str(dataset["frames"]),
               "--masks", str(dataset["masks"]),
               "--out", str(out)] + RECON_FLAGS)
    assert rc == 0
    result = read_json(capsys)
    assert (out / "mesh.obj").exists()
    assert result["mesh"] == str(out / "mesh.obj")
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["grid_res"] == 8
    assert report["config"]["iters"] == 3
    assert len(report["loss_history"]) == 3
    assert report["quality"]["n_faces"] > 0
    assert not (out / "snapshots").exists()


def test_reconstruct_config_file_with_cli_override(dataset, tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(
        "# tiny smoke settings\n"
        "grid-res = 6\n"
        "train_res = 24\n"
        "iters = 2\n"
        "batch_views = 3  # per step\n")
    out = tmp_path / "run"
    rc = main(["reconstruct", "--scene", str(dataset["scene"]),
               "--frames", str(dataset["frames"]),
               "--masks", str(dataset["masks"]),
               "--out", str(out), "--config", str(cfg), "--iters", "4"])
    assert rc == 0
    capsys.readouterr()
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["grid_res"] == 6   # from the file
    assert report["config"]["iters"] == 4      # flag beats file
    assert report["config"]["train_res"] == 24
    assert report["config"]["lambda_lap"] == 0.5  # untouched default


def test_reconstruct_rejects_unknown_config_key(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("gamma = 1.0\nwarmup = 10\n")
    assert main(["reconstruct", "--scene", str(dataset["scene"]),
                 "--frames", str(dataset["frames"]),
                 "--masks", str(dataset["masks"]),
                 "--out", str(tmp_path / "x"), "--config", str(cfg)]) == 2
    assert "warmup" in capsys.readouterr().err


def test_reconstruct_snapshots(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["reconstruct", "--scene", str(dataset["scene"]),
               "--frames", str(dataset["frames"]),
               "--masks", str(dataset["masks"]),
               "--out", str(out), "--grid-res", "8", "--train-res", "24",
               "--iters", "4", "--batch-views", "3", "--snapshot-every", "2"])
    assert rc == 0
    capsys.readouterr()
    assert (out / "snapshots" / "iter_000002.obj").exists()
    assert (out / "snapshots" / "iter_000004.obj").exists()
    assert not (out / "snapshots" / "iter_000003.obj").exists()


def test_reconstruct_numerical_failure_dumps_field(dataset, tmp_path, capsys,
                                                   monkeypatch):
    def exploding_train(views, config, callback=None):
        raise NumericalError(
            "non-finite loss at iteration 2",
            field=SdfField(np.full(9 ** 3, 0.25)))
    import thinrecon.cli as cli_mod
    monkeypatch.setattr(cli_mod, "train", exploding_train)
    out = tmp_path / "run"
    rc = main(["reconstruct", "--scene", str(dataset["scene"]),
               "--frames", str(dataset["frames"]),
               "--masks", str(dataset["masks"]),
               "--out", str(out)] + RECON_FLAGS)
    assert rc == 4
    err = capsys.readouterr().err
    assert "field_dump.npz" in err
    dumped = np.load(out / "field_dump.npz")
    assert dumped["values"].shape == (9 ** 3,)


def test_reconstruct_missing_scene(dataset, tmp_path):
    assert main(["reconstruct", "--scene", str(tmp_path / "nope.json"),
                 "--frames", str(dataset["frames"]),
                 "--masks", str(dataset["masks"]),
                 "--out", str(tmp_path / "x")] + RECON_FLAGS) == 3


# ---------------------------------------------------------------------------
# evaluate

def test_evaluate_quality_chamfer_and_file_output(dataset, tmp_path, capsys):
    out = tmp_path / "eval.json"
    rc = main(["evaluate", "--mesh", str(dataset["mesh"]),
               "--ref", str(dataset["mesh"]), "--samples", "2000",
               "--out", str(out)])
    assert rc == 0
    doc = read_json(capsys)
    assert doc["quality"]["watertight"] is True
    assert doc["chamfer"] < 1e-3
    assert json.loads(out.read_text()) == doc


def test_evaluate_iou_against_own_masks(dataset, capsys):
    rc = main(["evaluate", "--mesh", str(dataset["mesh"]),
               "--scene", str(dataset["scene"]),
               "--frames", str(dataset["frames"]),
               "--masks", str(dataset["masks"]), "--res", "24"])
    assert rc == 0
    doc = read_json(capsys)
    assert doc["iou"]["mean"] == 1.0
    assert len(doc["iou"]["per_view"]) == 6


def test_evaluate_scene_requires_frames_and_masks(dataset):
    assert main(["evaluate", "--mesh", str(dataset["mesh"]),
                 "--scene", str(dataset["scene"])]) == 2


def test_evaluate_missing_mesh(tmp_path):
    assert main(["evaluate", "--mesh", str(tmp_path / "ghost.obj")]) == 3


# ---------------------------------------------------------------------------
# colmap-script

def test_colmap_script_contents_and_quoting(tmp_path, capsys):
    images = tmp_path / "my frames'dir"
    images.mkdir()
    script = tmp_path / "run_colmap.sh"
    rc = main(["colmap-script", "--images", str(images),
               "--out", str(script)])
    assert rc == 0
    info = read_json(capsys)
    assert info["work_dir"] == str(tmp_path / "colmap")
    text = script.read_text()
    assert "colmap feature_extractor" in text
    assert "colmap exhaustive_matcher" in text
    assert "colmap mapper" in text
    assert "colmap model_converter" in text
    assert "--output_type TXT" in text
    assert "--ImageReader.camera_model SIMPLE_RADIAL" in text
    # single quotes in the path survive shell quoting
    assert "'\\''" in text
    assert os.stat(script).st_mode & stat.S_IXUSR


def test_colmap_script_matcher_and_work_flags(tmp_path, capsys):
    images = tmp_path / "frames"
    images.mkdir()
    script = tmp_path / "s.sh"
    rc = main(["colmap-script", "--images", str(images), "--out", str(script),
               "--matcher", "sequential", "--work", str(tmp_path / "w"),
               "--camera-model", "PINHOLE"])
    assert rc == 0
    capsys.readouterr()
    text = script.read_text()
    assert "colmap sequential_matcher" in text
    assert "exhaustive" not in text
    assert "--ImageReader.camera_model PINHOLE" in text
    assert f"WORK={str(tmp_path / 'w')!r}" in text or str(tmp_path / "w") in text
