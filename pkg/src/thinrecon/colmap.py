"""COLMAP sparse-model ingestion and scene normalization.

Reads ``cameras``/``images``/``points3D`` in both the text and binary COLMAP
formats, keeps only what the reconstruction pipeline needs (intrinsics,
world-to-camera poses, sparse points), and normalizes the scene into the
``[-1, 1]^3`` box the tetrahedral grid lives in. The normalized model round-trips
through a single ``scene.json`` file exactly.

Only the three distortion-free camera models are supported: SIMPLE_PINHOLE,
PINHOLE, and SIMPLE_RADIAL (whose radial term is ignored with a warning).
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelParseError, SceneGeometryError

# model_id -> (name, parameter count), distortion-free models only
CAMERA_MODELS = {
    0: ("SIMPLE_PINHOLE", 3),  # f, cx, cy
    1: ("PINHOLE", 4),         # fx, fy, cx, cy
    2: ("SIMPLE_RADIAL", 4),   # f, cx, cy, k
}
_MODEL_IDS = {name: mid for mid, (name, _) in CAMERA_MODELS.items()}
_UNSUPPORTED_MODELS = {
    3: "RADIAL", 4: "OPENCV", 5: "OPENCV_FISHEYE", 6: "FULL_OPENCV",
    7: "FOV", 8: "SIMPLE_RADIAL_FISHEYE", 9: "RADIAL_FISHEYE",
    10: "THIN_PRISM_FISHEYE",
}

_SCENE_FORMAT = "thinrecon-scene-v1"


def quat_to_rotmat(q):
    """Rotation matrix for a quaternion in (w, x, y, z) order.

    Renormalizes internally; raises ValueError for a (near-)zero quaternion.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise ValueError("zero quaternion has no rotation")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R):
    """Quaternion (w, x, y, z) with w >= 0 for a rotation matrix.

    The matrix must be orthonormal with determinant +1 (checked to 1e-6).
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if (np.abs(R.T @ R - np.eye(3)).max() > 1e-6
            or abs(np.linalg.det(R) - 1.0) > 1e-6):
        raise ValueError("matrix is not a rotation")
    tr = float(np.trace(R))
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


@dataclass
class CameraIntrinsics:
    """One COLMAP camera: model name, sensor size in pixels, raw parameters."""

    camera_id: int
    model: str
    width: int
    height: int
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.model not in _MODEL_IDS:
            raise ModelParseError(f"unsupported camera model {self.model!r}")
        expected = CAMERA_MODELS[_MODEL_IDS[self.model]][1]
        if self.params.shape != (expected,):
            raise ModelParseError(
                f"camera {self.camera_id}: model {self.model} takes {expected} "
                f"params, got {self.params.shape}")
        if self.width <= 0 or self.height <= 0:
            raise ModelParseError(
                f"camera {self.camera_id}: non-positive size "
                f"{self.width}x{self.height}")

    def pinhole(self):
        """Projection parameters (fx, fy, cx, cy), dropping distortion.

        SIMPLE_RADIAL's radial coefficient is outside the supported projection
        model; a non-negligible value warns and is ignored.
        """
        p = self.params
        if self.model == "PINHOLE":
            return float(p[0]), float(p[1]), float(p[2]), float(p[3])
        if self.model == "SIMPLE_PINHOLE":
            return float(p[0]), float(p[0]), float(p[1]), float(p[2])
        # SIMPLE_RADIAL: f, cx, cy, k
        if abs(float(p[3])) > 1e-8:
            warnings.warn(
                f"camera {self.camera_id}: ignoring SIMPLE_RADIAL distortion "
                f"k={float(p[3]):g}", RuntimeWarning, stacklevel=2)
        return float(p[0]), float(p[0]), float(p[1]), float(p[2])

    def rescaled(self, new_width, new_height):
        """Intrinsics for the same camera after resampling to a new size.

        Always returns a PINHOLE camera, because anisotropic scaling breaks the
        shared-focal models.
        """
        if new_width <= 0 or new_height <= 0:
            raise ValueError("new size must be positive")
        sx = new_width / self.width
        sy = new_height / self.height
        fx, fy, cx, cy = self.pinhole()
        return CameraIntrinsics(
            camera_id=self.camera_id, model="PINHOLE",
            width=int(new_width), height=int(new_height),
            params=np.array([fx * sx, fy * sy, cx * sx, cy * sy]))

    def __eq__(self, other):
        if not isinstance(other, CameraIntrinsics):
            return NotImplemented
        return (self.camera_id == other.camera_id and self.model == other.model
                and self.width == other.width and self.height == other.height
                and np.array_equal(self.params, other.params))


@dataclass
class Pose:
    """World-to-camera rigid transform, COLMAP convention: x_cam = R x + t."""

    qvec: np.ndarray
    tvec: np.ndarray

    def __post_init__(self):
        self.qvec = np.asarray(self.qvec, dtype=np.float64)
        self.tvec = np.asarray(self.tvec, dtype=np.float64)
        if self.qvec.shape != (4,) or self.tvec.shape != (3,):
            raise ValueError("pose needs qvec (4,) and tvec (3,)")
        n = float(np.linalg.norm(self.qvec))
        if abs(n - 1.0) > 1e-3:
            raise ValueError(f"quaternion norm {n:g} is not near 1")

    def rotation(self):
        return quat_to_rotmat(self.qvec)

    def camera_center(self):
        """Camera position in world coordinates: -R^T t."""
        return -self.rotation().T @ self.tvec

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.qvec, other.qvec)
                and np.array_equal(self.tvec, other.tvec))


@dataclass
class ImageRecord:
    """One registered image: its name, camera, and pose (2D features dropped)."""

    image_id: int
    name: str
    camera_id: int
    pose: Pose

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (self.image_id == other.image_id and self.name == other.name
                and self.camera_id == other.camera_id and self.pose == other.pose)


@dataclass
class SimTransform:
    """Similarity x' = scale * (x - center) mapping the scene into the unit box."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.center.shape != (3,):
            raise ValueError("center must have shape (3,)")
        self.scale = float(self.scale)
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def __eq__(self, other):
        if not isinstance(other, SimTransform):
            return NotImplemented
        return (np.array_equal(self.center, other.center)
                and self.scale == other.scale)


@dataclass
class SceneModel:
    """A parsed sparse model: cameras by id, images in file order, points."""

    cameras: dict[int, CameraIntrinsics]
    images: list[ImageRecord]
    point_ids: np.ndarray | None = None
    points: np.ndarray | None = None
    norm: SimTransform | None = field(default=None)

    def camera_for(self, image: ImageRecord) -> CameraIntrinsics:
        return self.cameras[image.camera_id]

    def __eq__(self, other):
        if not isinstance(other, SceneModel):
            return NotImplemented
        same_pts = (
            (self.points is None) == (other.points is None)
            and (self.points is None or
                 (np.array_equal(self.point_ids, other.point_ids)
                  and np.array_equal(self.points, other.points))))
        return (self.cameras == other.cameras and self.images == other.images
                and same_pts and self.norm == other.norm)


# ---------------------------------------------------------------------------
# text readers

def _data_lines(path: Path):
    """Yield (line_number, tokens) for non-blank, non-comment lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, stripped.split()


def _parse_num(token, path, lineno, kind):
    try:
        return int(token) if kind is int else float(token)
    except ValueError:
        raise ModelParseError(
            f"{path}, line {lineno}: expected {kind.__name__}, got {token!r}"
        ) from None


def read_cameras_text(path) -> dict[int, CameraIntrinsics]:
    path = Path(path)
    cameras = {}
    for lineno, tok in _data_lines(path):
        if len(tok) < 5:
            raise ModelParseError(f"{path}, line {lineno}: truncated camera record")
        cam_id = _parse_num(tok[0], path, lineno, int)
        name = tok[1]
        if name not in _MODEL_IDS:
            raise ModelParseError(
                f"{path}, line {lineno}: unsupported camera model {name!r} "
                f"(only {sorted(_MODEL_IDS)} are handled)")
        width = _parse_num(tok[2], path, lineno, int)
        height = _parse_num(tok[3], path, lineno, int)
        params = np.array([_parse_num(t, path, lineno, float) for t in tok[4:]])
        expected = CAMERA_MODELS[_MODEL_IDS[name]][1]
        if len(params) != expected:
            raise ModelParseError(
                f"{path}, line {lineno}: model {name} takes {expected} params, "
                f"got {len(params)}")
        if cam_id in cameras:
            raise ModelParseError(f"{path}, line {lineno}: duplicate camera id {cam_id}")
        cameras[cam_id] = CameraIntrinsics(cam_id, name, width, height, params)
    return cameras


def read_images_text(path) -> list[ImageRecord]:
    path = Path(path)
    images = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    i = 0
    while i < len(lines):
        stripped = lines[i].strip()
        if not stripped or stripped.startswith("#"):
            i += 1
            continue
        lineno = i + 1
        tok = stripped.split()
        if len(tok) < 10:
            raise ModelParseError(f"{path}, line {lineno}: truncated image record")
        image_id = _parse_num(tok[0], path, lineno, int)
        q = np.array([_parse_num(t, path, lineno, float) for t in tok[1:5]])
        t = np.array([_parse_num(t, path, lineno, float) for t in tok[5:8]])
        camera_id = _parse_num(tok[8], path, lineno, int)
        name = " ".join(tok[9:])
        # the next physical line holds the 2D observations (possibly empty)
        if i + 1 >= len(lines):
            raise ModelParseError(
                f"{path}, line {lineno}: image record missing its POINTS2D line")
        pts_tok = lines[i + 1].split()
        if len(pts_tok) % 3 != 0:
            raise ModelParseError(
                f"{path}, line {lineno + 1}: POINTS2D needs triplets, "
                f"got {len(pts_tok)} tokens")
        for tkn in pts_tok:  # validate even though the values are discarded
            _parse_num(tkn, path, lineno + 1, float)
        try:
            pose = Pose(q, t)
        except ValueError as exc:
            raise ModelParseError(f"{path}, line {lineno}: {exc}") from None
        images.append(ImageRecord(image_id, name, camera_id, pose))
        i += 2
    return images


def read_points3d_text(path):
    path = Path(path)
    ids, xyz = [], []
    for lineno, tok in _data_lines(path):
        if len(tok) < 8:
            raise ModelParseError(f"{path}, line {lineno}: truncated point record")
        ids.append(_parse_num(tok[0], path, lineno, int))
        xyz.append([_parse_num(t, path, lineno, float) for t in tok[1:4]])
    return (np.array(ids, dtype=np.int64),
            np.array(xyz, dtype=np.float64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# binary readers

class _BinReader:
    """Cursor over a binary model file that raises with byte offsets."""

    def __init__(self, path: Path):
        self.path = path
        self.buf = path.read_bytes()
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ModelParseError(
                f"{self.path}, byte {self.pos}: truncated (needed {size} more bytes)")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def take_cstring(self):
        end = self.buf.find(b"\x00", self.pos)
        if end < 0:
            raise ModelParseError(
                f"{self.path}, byte {self.pos}: unterminated string")
        raw = self.buf[self.pos:end]
        self.pos = end + 1
        return raw.decode("utf-8")

    def done(self):
        if self.pos != len(self.buf):
            raise ModelParseError(
                f"{self.path}, byte {self.pos}: {len(self.buf) - self.pos} "
                f"trailing bytes after the last record")


def read_cameras_binary(path) -> dict[int, CameraIntrinsics]:
    rd = _BinReader(Path(path))
    (count,) = rd.take("<Q")
    cameras = {}
    for _ in range(count):
        cam_id, model_id, width, height = rd.take("<iiQQ")
        if model_id not in CAMERA_MODELS:
            hint = _UNSUPPORTED_MODELS.get(model_id, "unknown")
            raise ModelParseError(
                f"{rd.path}, byte {rd.pos}: camera {cam_id} uses unsupported "
                f"model id {model_id} ({hint})")
        name, nparams = CAMERA_MODELS[model_id]
        params = np.array(rd.take(f"<{nparams}d"))
        if cam_id in cameras:
            raise ModelParseError(f"{rd.path}: duplicate camera id {cam_id}")
        cameras[cam_id] = CameraIntrinsics(cam_id, name, int(width), int(height), params)
    rd.done()
    return cameras


def read_images_binary(path) -> list[ImageRecord]:
    rd = _BinReader(Path(path))
    (count,) = rd.take("<Q")
    images = []
    for _ in range(count):
        rec = rd.take("<idddddddi")
        image_id = rec[0]
        q = np.array(rec[1:5])
        t = np.array(rec[5:8])
        camera_id = rec[8]
        name = rd.take_cstring()
        (num_pts,) = rd.take("<Q")
        rd.take(f"<{'ddq' * num_pts}") if num_pts else None
        try:
            pose = Pose(q, t)
        except ValueError as exc:
            raise ModelParseError(
                f"{rd.path}: image {image_id} ({name!r}): {exc}") from None
        images.append(ImageRecord(image_id, name, camera_id, pose))
    rd.done()
    return images


def read_points3d_binary(path):
    rd = _BinReader(Path(path))
    (count,) = rd.take("<Q")
    ids = np.empty(count, dtype=np.int64)
    xyz = np.empty((count, 3), dtype=np.float64)
    for i in range(count):
        rec = rd.take("<QdddBBBd")
        ids[i] = rec[0]
        xyz[i] = rec[1:4]
        (track_len,) = rd.take("<Q")
        rd.take(f"<{2 * track_len}i") if track_len else None
    rd.done()
    return ids, xyz


# ---------------------------------------------------------------------------
# model assembly

def _pick_file(directory: Path, stem: str, fmt: str) -> Path | None:
    txt, bin_ = directory / f"{stem}.txt", directory / f"{stem}.bin"
    if fmt == "bin":
        return bin_ if bin_.exists() else None
    if fmt == "txt":
        return txt if txt.exists() else None
    # auto prefers binary
    if bin_.exists():
        return bin_
    return txt if txt.exists() else None


def parse_model(path, format="auto") -> SceneModel:
    """Load a COLMAP sparse model directory into a SceneModel.

    ``format`` is "auto" (prefer .bin when both exist), "bin", or "txt".
    points3D is optional; cameras and images are not.
    """
    if format not in ("auto", "bin", "txt"):
        raise ValueError(f"format must be auto, bin, or txt, got {format!r}")
    directory = Path(path)
    if not directory.is_dir():
        raise ModelParseError(f"{directory} is not a directory")

    cam_file = _pick_file(directory, "cameras", format)
    img_file = _pick_file(directory, "images", format)
    if cam_file is None or img_file is None:
        raise ModelParseError(
            f"{directory}: missing cameras/images files for format={format!r}")

    cameras = (read_cameras_binary(cam_file) if cam_file.suffix == ".bin"
               else read_cameras_text(cam_file))
    images = (read_images_binary(img_file) if img_file.suffix == ".bin"
              else read_images_text(img_file))

    seen_names = set()
    for img in images:
        if img.camera_id not in cameras:
            raise ModelParseError(
                f"{img_file}: image {img.name!r} references missing camera "
                f"{img.camera_id}")
        if img.name in seen_names:
            raise ModelParseError(f"{img_file}: duplicate image name {img.name!r}")
        seen_names.add(img.name)

    pts_file = _pick_file(directory, "points3D", format)
    point_ids = points = None
    if pts_file is not None:
        point_ids, points = (read_points3d_binary(pts_file)
                             if pts_file.suffix == ".bin"
                             else read_points3d_text(pts_file))
    return SceneModel(cameras=cameras, images=images,
                      point_ids=point_ids, points=points)


# ---------------------------------------------------------------------------
# normalization

def normalize_scene(model: SceneModel, target_radius: float = 0.35) -> SceneModel:
    """Recenter and rescale the scene so the object fits well inside the unit box.

    The center is the robust centroid of the sparse points (points farther than
    3x the median distance from the raw centroid are rejected); the scale maps
    the 95th-percentile point radius onto ``target_radius``. Without points the
    camera centroid and mean camera distance are used instead. Poses transform
    as t' = scale * (R @ center + t) with R unchanged, which keeps projections
    of transformed points identical.
    """
    if not (0 < target_radius < 1):
        raise ValueError(f"target_radius must lie in (0, 1), got {target_radius}")
    if model.norm is not None:
        raise ValueError("scene is already normalized")

    if model.points is not None and len(model.points) > 0:
        pts = model.points
        raw_center = pts.mean(axis=0)
        dist = np.linalg.norm(pts - raw_center, axis=1)
        med = float(np.median(dist))
        keep = dist <= 3.0 * med
        kept = pts[keep]
        if len(kept) == 0:
            raise SceneGeometryError("all points rejected as outliers")
        center = kept.mean(axis=0)
        radius = float(np.percentile(np.linalg.norm(kept - center, axis=1), 95.0))
        if radius <= 0:
            raise SceneGeometryError("sparse points have no spatial extent")
    else:
        if len(model.images) < 2:
            raise SceneGeometryError(
                "cannot normalize: no sparse points and fewer than two cameras")
        centers = np.stack([img.pose.camera_center() for img in model.images])
        center = centers.mean(axis=0)
        radius = float(np.linalg.norm(centers - center, axis=1).mean())
        if radius <= 0:
            raise SceneGeometryError("camera centers are coincident")

    scale = target_radius / radius
    norm = SimTransform(center=center, scale=scale)

    new_images = []
    for img in model.images:
        R = img.pose.rotation()
        t_new = scale * (R @ center + img.pose.tvec)
        new_images.append(ImageRecord(
            img.image_id, img.name, img.camera_id,
            Pose(img.pose.qvec.copy(), t_new)))
    new_points = norm.apply(model.points) if model.points is not None else None
    new_ids = model.point_ids.copy() if model.point_ids is not None else None
    return SceneModel(cameras=dict(model.cameras), images=new_images,
                      point_ids=new_ids, points=new_points, norm=norm)


# ---------------------------------------------------------------------------
# scene.json

def save_scene(model: SceneModel, path) -> None:
    """Serialize a SceneModel to JSON. Floats keep full precision via repr."""
    doc = {
        "format": _SCENE_FORMAT,
        "cameras": [
            {"camera_id": c.camera_id, "model": c.model, "width": c.width,
             "height": c.height, "params": c.params.tolist()}
            for _, c in sorted(model.cameras.items())
        ],
        "images": [
            {"image_id": im.image_id, "name": im.name, "camera_id": im.camera_id,
             "qvec": im.pose.qvec.tolist(), "tvec": im.pose.tvec.tolist()}
            for im in model.images
        ],
        "points3d": None if model.points is None else {
            "ids": model.point_ids.tolist(),
            "xyz": model.points.tolist(),
        },
        "norm": None if model.norm is None else {
            "center": model.norm.center.tolist(),
            "scale": model.norm.scale,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_scene(path) -> SceneModel:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != _SCENE_FORMAT:
        raise ModelParseError(
            f"{path}: not a {_SCENE_FORMAT} file "
            f"(format={doc.get('format') if isinstance(doc, dict) else None!r})")
    try:
        cameras = {
            c["camera_id"]: CameraIntrinsics(
                c["camera_id"], c["model"], c["width"], c["height"],
                np.array(c["params"], dtype=np.float64))
            for c in doc["cameras"]
        }
        images = [
            ImageRecord(im["image_id"], im["name"], im["camera_id"],
                        Pose(np.array(im["qvec"]), np.array(im["tvec"])))
            for im in doc["images"]
        ]
        pts = doc["points3d"]
        point_ids = np.array(pts["ids"], dtype=np.int64) if pts else None
        points = (np.array(pts["xyz"], dtype=np.float64).reshape(-1, 3)
                  if pts else None)
        nrm = doc["norm"]
        norm = SimTransform(np.array(nrm["center"]), nrm["scale"]) if nrm else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelParseError(f"{path}: malformed scene file ({exc})") from None
    return SceneModel(cameras=cameras, images=images,
                      point_ids=point_ids, points=points, norm=norm)
