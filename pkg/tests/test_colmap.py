"""Sparse-model parsing tests.

The fixtures are written by hand with struct.pack / plain text formatting so
the parser is checked against an independent encoding of the file layouts,
not against its own output.
"""

import json
import struct

import numpy as np
import pytest

from thinrecon.colmap import (
    CameraIntrinsics,
    ImageRecord,
    Pose,
    SceneModel,
    SimTransform,
    load_scene,
    normalize_scene,
    parse_model,
    quat_to_rotmat,
    rotmat_to_quat,
    save_scene,
)
from thinrecon.errors import ModelParseError, SceneGeometryError


# ---------------------------------------------------------------------------
# toy model shared by the text and binary fixture writers

MODEL_IDS = {"SIMPLE_PINHOLE": 0, "PINHOLE": 1, "SIMPLE_RADIAL": 2}

CAMS = [
    # (camera_id, model, width, height, params)
    (1, "PINHOLE", 1920, 1080, [1600.5, 1590.25, 960.0, 540.0]),
    (2, "SIMPLE_PINHOLE", 640, 480, [525.125, 320.0, 240.0]),
]

IMGS = [
    # (image_id, qvec, tvec, camera_id, name, points2d)
    (1, (1.0, 0.0, 0.0, 0.0), (0.5, -1.25, 3.0), 1, "frame_0001.png",
     [(12.5, 8.25, 7), (100.0, 50.5, -1)]),
    (2, (0.5, 0.5, 0.5, 0.5), (-2.0, 0.0, 4.5), 1, "frame 0002.png", []),
    (3, (0.7071067811865476, 0.0, 0.7071067811865475, 0.0),
     (1.0, 2.0, -0.5), 2, "aux/frame_0003.png", [(3.0, 4.0, 9)]),
]

PTS = [
    # (point3d_id, xyz, rgb, error, track)
    (7, (0.1, 0.2, 0.3), (255, 0, 10), 0.5, [(1, 0), (3, 0)]),
    (9, (-1.5, 2.25, 0.0), (0, 128, 255), 1.125, [(3, 0)]),
    (12, (4.0, -4.0, 4.0), (10, 10, 10), 0.25, [(1, 1)]),
]


def write_text_model(d):
    with open(d / "cameras.txt", "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cid, model, w, h, params in CAMS:
            fh.write(f"{cid} {model} {w} {h} "
                     + " ".join(repr(p) for p in params) + "\n")
    with open(d / "images.txt", "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        for iid, q, t, cid, name, p2d in IMGS:
            nums = " ".join(repr(v) for v in (*q, *t))
            fh.write(f"{iid} {nums} {cid} {name}\n")
            fh.write(" ".join(f"{repr(x)} {repr(y)} {pid}"
                              for x, y, pid in p2d) + "\n")
    with open(d / "points3D.txt", "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        for pid, xyz, rgb, err, track in PTS:
            parts = [str(pid)] + [repr(v) for v in xyz] + [str(c) for c in rgb]
            parts.append(repr(err))
            for im, idx in track:
                parts += [str(im), str(idx)]
            fh.write(" ".join(parts) + "\n")


def write_binary_model(d):
    with open(d / "cameras.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(CAMS)))
        for cid, model, w, h, params in CAMS:
            fh.write(struct.pack("<iiQQ", cid, MODEL_IDS[model], w, h))
            fh.write(struct.pack(f"<{len(params)}d", *params))
    with open(d / "images.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(IMGS)))
        for iid, q, t, cid, name, p2d in IMGS:
            fh.write(struct.pack("<idddddddi", iid, *q, *t, cid))
            fh.write(name.encode("utf-8") + b"\x00")
            fh.write(struct.pack("<Q", len(p2d)))
            for x, y, pid in p2d:
                fh.write(struct.pack("<ddq", x, y, pid))
    with open(d / "points3D.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(PTS)))
        for pid, xyz, rgb, err, track in PTS:
            fh.write(struct.pack("<QdddBBBd", pid, *xyz, *rgb, err))
            fh.write(struct.pack("<Q", len(track)))
            for im, idx in track:
                fh.write(struct.pack("<ii", im, idx))


@pytest.fixture
def text_model(tmp_path):
    d = tmp_path / "txt"
    d.mkdir()
    write_text_model(d)
    return d


@pytest.fixture
def bin_model(tmp_path):
    d = tmp_path / "bin"
    d.mkdir()
    write_binary_model(d)
    return d


# ---------------------------------------------------------------------------
# parsing

def test_text_and_binary_parse_field_identical(text_model, bin_model):
    mt = parse_model(text_model, format="txt")
    mb = parse_model(bin_model, format="bin")
    assert mt == mb
    # and both match the toy model definition exactly
    assert sorted(mt.cameras) == [1, 2]
    for cid, model, w, h, params in CAMS:
        cam = mt.cameras[cid]
        assert (cam.model, cam.width, cam.height) == (model, w, h)
        assert np.array_equal(cam.params, np.array(params))
    assert [im.name for im in mt.images] == [i[4] for i in IMGS]
    for rec, (iid, q, t, cid, name, _) in zip(mt.images, IMGS):
        assert rec.image_id == iid and rec.camera_id == cid
        assert np.array_equal(rec.pose.qvec, np.array(q))
        assert np.array_equal(rec.pose.tvec, np.array(t))
    assert np.array_equal(mt.point_ids, np.array([p[0] for p in PTS]))
    assert np.array_equal(mt.points, np.array([p[1] for p in PTS]))


def test_parsed_rotations_orthonormal(bin_model):
    model = parse_model(bin_model)
    eye = np.eye(3)
    for im in model.images:
        R = im.pose.rotation()
        assert np.max(np.abs(R.T @ R - eye)) <= 1e-6
        assert abs(np.linalg.det(R) - 1.0) <= 1e-6


def test_auto_format_prefers_binary(text_model):
    # drop a binary cameras file with a different width next to the text one
    cams_bin = text_model / "cameras.bin"
    with open(cams_bin, "wb") as fh:
        fh.write(struct.pack("<Q", 1))
        fh.write(struct.pack("<iiQQ", 1, 1, 777, 555))
        fh.write(struct.pack("<4d", 100.0, 100.0, 388.5, 277.5))
    # remove the second camera's images so camera ids stay consistent
    write_single_camera_images(text_model)
    model = parse_model(text_model, format="auto")
    assert model.cameras[1].width == 777


def write_single_camera_images(d):
    with open(d / "images.txt", "w") as fh:
        fh.write("1 1.0 0.0 0.0 0.0 0.0 0.0 1.0 1 a.png\n\n")


def test_image_name_with_spaces_survives(text_model):
    model = parse_model(text_model, format="txt")
    assert model.images[1].name == "frame 0002.png"


def test_blank_points2d_line_accepted(tmp_path):
    d = tmp_path
    write_text_model(d)
    model = parse_model(d, format="txt")
    assert model.images[1].image_id == 2  # the image with zero 2D points


def test_missing_points_file_is_fine(tmp_path):
    write_text_model(tmp_path)
    (tmp_path / "points3D.txt").unlink()
    model = parse_model(tmp_path, format="txt")
    assert model.points is None and model.point_ids is None


def test_truncated_binary_reports_offset(bin_model):
    raw = (bin_model / "images.bin").read_bytes()
    (bin_model / "images.bin").write_bytes(raw[:-5])
    with pytest.raises(ModelParseError, match="byte"):
        parse_model(bin_model, format="bin")


def test_trailing_garbage_rejected(bin_model):
    with open(bin_model / "cameras.bin", "ab") as fh:
        fh.write(b"\x00" * 4)
    with pytest.raises(ModelParseError):
        parse_model(bin_model, format="bin")


def test_unknown_camera_model_id_rejected(tmp_path):
    with open(tmp_path / "cameras.bin", "wb") as fh:
        fh.write(struct.pack("<Q", 1))
        fh.write(struct.pack("<iiQQ", 1, 11, 64, 64))  # FOV camera: unsupported
        fh.write(struct.pack("<5d", *([1.0] * 5)))
    with open(tmp_path / "images.bin", "wb") as fh:
        fh.write(struct.pack("<Q", 0))
    with pytest.raises(ModelParseError, match="model"):
        parse_model(tmp_path, format="bin")


def test_dangling_camera_id_rejected(tmp_path):
    write_text_model(tmp_path)
    with open(tmp_path / "images.txt", "a") as fh:
        fh.write("4 1.0 0.0 0.0 0.0 0.0 0.0 1.0 99 ghost.png\n\n")
    with pytest.raises(ModelParseError, match="camera"):
        parse_model(tmp_path, format="txt")


def test_duplicate_image_name_rejected(tmp_path):
    write_text_model(tmp_path)
    with open(tmp_path / "images.txt", "a") as fh:
        fh.write("4 1.0 0.0 0.0 0.0 0.0 0.0 1.0 1 frame_0001.png\n\n")
    with pytest.raises(ModelParseError, match="duplicate"):
        parse_model(tmp_path, format="txt")


def test_bad_token_count_rejected(tmp_path):
    write_text_model(tmp_path)
    with open(tmp_path / "cameras.txt", "a") as fh:
        fh.write("3 PINHOLE 100 100 1.0 2.0 3.0\n")  # one param short
    with pytest.raises(ModelParseError):
        parse_model(tmp_path, format="txt")


def test_missing_model_dir(tmp_path):
    with pytest.raises(ModelParseError):
        parse_model(tmp_path / "nowhere")


# ---------------------------------------------------------------------------
# quaternions

def test_identity_quaternion():
    assert np.allclose(quat_to_rotmat([1, 0, 0, 0]), np.eye(3), atol=0)


def test_quaternion_rotations_orthonormal_random():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        q = rng.normal(size=4)
        R = quat_to_rotmat(q)
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12
        assert abs(np.linalg.det(R) - 1.0) < 1e-12


def test_quaternion_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(200):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        back = rotmat_to_quat(quat_to_rotmat(q))
        assert np.allclose(back, q, atol=1e-12)


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError):
        quat_to_rotmat([0, 0, 0, 0])


def test_pose_rejects_unnormalized_quaternion():
    with pytest.raises(ValueError):
        Pose(np.array([2.0, 0.0, 0.0, 0.0]), np.zeros(3))


def test_camera_center():
    # pure translation: center is -t
    p = Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, 2.0, 3.0]))
    assert np.allclose(p.camera_center(), [-1, -2, -3])


# ---------------------------------------------------------------------------
# normalization

def make_point_scene(points, n_images=3):
    cams = {1: CameraIntrinsics(1, "PINHOLE", 64, 64, [60.0, 60.0, 32.0, 32.0])}
    images = [
        ImageRecord(i + 1, f"im{i}.png", 1,
                    Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 5.0 + i])))
        for i in range(n_images)
    ]
    pts = np.asarray(points, dtype=np.float64)
    ids = np.arange(len(pts), dtype=np.int64)
    return SceneModel(cameras=cams, images=images, point_ids=ids, points=pts)


def test_normalize_scene_matches_manual_computation():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(200, 3)) * 2.0 + np.array([10.0, -3.0, 4.0])
    pts = np.vstack([pts, [[500.0, 500.0, 500.0]]])  # one far outlier
    scene = make_point_scene(pts)
    out = normalize_scene(scene, target_radius=0.35)

    # oracle: same words, computed here from scratch
    raw_center = pts.mean(axis=0)
    dist = np.linalg.norm(pts - raw_center, axis=1)
    kept = pts[dist <= 3.0 * np.median(dist)]
    assert len(kept) == 200  # the outlier went away
    center = kept.mean(axis=0)
    radius = np.percentile(np.linalg.norm(kept - center, axis=1), 95.0)
    scale = 0.35 / radius

    assert out.norm is not None
    assert np.allclose(out.norm.center, center, atol=0, rtol=0)
    assert out.norm.scale == pytest.approx(scale, abs=0)
    assert np.allclose(out.points, (pts - center) * scale)
    # the p95 radius of the normalized cloud is the target radius
    kept_out = out.points[dist <= 3.0 * np.median(dist)]
    r95 = np.percentile(np.linalg.norm(kept_out, axis=1), 95.0)
    assert r95 == pytest.approx(0.35, rel=1e-12)


def test_normalize_preserves_projections():
    rng = np.random.default_rng(12)
    pts = rng.normal(size=(50, 3))
    scene = make_point_scene(pts)
    out = normalize_scene(scene)
    # x_cam of a transformed point under the transformed pose is the original
    # x_cam scaled; pinhole projection of scaled geometry is unchanged
    for old_im, new_im in zip(scene.images, out.images):
        R = old_im.pose.rotation()
        xc_old = pts @ R.T + old_im.pose.tvec
        xc_new = out.points @ new_im.pose.rotation().T + new_im.pose.tvec
        assert np.allclose(xc_new, xc_old * out.norm.scale, atol=1e-12)


def test_normalize_camera_fallback():
    scene = make_point_scene(np.zeros((0, 3)))
    scene = SceneModel(cameras=scene.cameras, images=scene.images)
    out = normalize_scene(scene, target_radius=0.3)
    centers = np.stack([im.pose.camera_center() for im in out.images])
    mean_r = np.linalg.norm(centers - centers.mean(axis=0), axis=1).mean()
    assert mean_r == pytest.approx(0.3, rel=1e-9)


def test_normalize_twice_rejected():
    scene = make_point_scene(np.random.default_rng(0).normal(size=(20, 3)))
    once = normalize_scene(scene)
    with pytest.raises(ValueError, match="already"):
        normalize_scene(once)


def test_normalize_degenerate_points():
    scene = make_point_scene(np.zeros((10, 3)))
    with pytest.raises(SceneGeometryError):
        normalize_scene(scene)


def test_normalize_bad_target_radius():
    scene = make_point_scene(np.random.default_rng(1).normal(size=(20, 3)))
    with pytest.raises(ValueError):
        normalize_scene(scene, target_radius=1.5)


# ---------------------------------------------------------------------------
# intrinsics helpers

def test_pinhole_params():
    c = CameraIntrinsics(1, "PINHOLE", 100, 80, [50.0, 55.0, 50.0, 40.0])
    assert c.pinhole() == (50.0, 55.0, 50.0, 40.0)
    s = CameraIntrinsics(2, "SIMPLE_PINHOLE", 100, 80, [50.0, 50.0, 40.0])
    assert s.pinhole() == (50.0, 50.0, 50.0, 40.0)


def test_simple_radial_distortion_warns():
    c = CameraIntrinsics(3, "SIMPLE_RADIAL", 100, 80, [50.0, 50.0, 40.0, 0.02])
    with pytest.warns(RuntimeWarning, match="distortion"):
        c.pinhole()
    clean = CameraIntrinsics(3, "SIMPLE_RADIAL", 100, 80, [50.0, 50.0, 40.0, 0.0])
    import warnings as _w
    with _w.catch_warnings():
        _w.simplefilter("error")
        assert clean.pinhole() == (50.0, 50.0, 50.0, 40.0)


def test_rescaled_intrinsics():
    c = CameraIntrinsics(1, "PINHOLE", 200, 100, [80.0, 90.0, 100.0, 50.0])
    r = c.rescaled(100, 50)
    assert r.model == "PINHOLE"
    assert (r.width, r.height) == (100, 50)
    assert np.allclose(r.params, [40.0, 45.0, 50.0, 25.0])


def test_unsupported_model_rejected():
    with pytest.raises(ModelParseError):
        CameraIntrinsics(1, "OPENCV", 100, 100, [1.0] * 8)


# ---------------------------------------------------------------------------
# scene.json round trip

def test_scene_json_round_trip_exact(bin_model, tmp_path):
    model = parse_model(bin_model)
    norm = normalize_scene(model)
    for m in (model, norm):
        p = tmp_path / "scene.json"
        save_scene(m, p)
        back = load_scene(p)
        assert back == m
        # second save of the loaded model is byte-identical
        p2 = tmp_path / "scene2.json"
        save_scene(back, p2)
        assert p2.read_bytes() == p.read_bytes()


def test_scene_json_bad_format_key(tmp_path):
    p = tmp_path / "scene.json"
    p.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ModelParseError, match="format"):
        load_scene(p)


def test_scene_json_invalid_json(tmp_path):
    p = tmp_path / "scene.json"
    p.write_text("{not json")
    with pytest.raises(ModelParseError):
        load_scene(p)


def test_sim_transform_apply():
    t = SimTransform(center=np.array([1.0, 2.0, 3.0]), scale=2.0)
    out = t.apply(np.array([[2.0, 2.0, 2.0]]))
    assert np.allclose(out, [[2.0, 0.0, -2.0]])
