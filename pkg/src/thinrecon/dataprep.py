"""Frame and mask preparation: sampling, downscaling, binarization, view loading.

Images are 8-bit throughout; resampling happens in float64 and requantizes by
rounding half away from zero, which keeps results platform-independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .colmap import CameraIntrinsics, Pose, SceneModel
from .errors import ViewDataError

_FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")

# Rec. 601 luma weights, used when masks must be derived from brightness
_LUMA = (0.299, 0.587, 0.114)


def sample_indices(total: int, count: int) -> list[int]:
    """Indices of ``count`` frames spread evenly over ``total``: floor(i*total/count).

    The first frame is always index 0; count == total returns every index.
    """
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    if count > total:
        raise ValueError(f"cannot sample {count} of {total} frames")
    return [(i * total) // count for i in range(count)]


def _quantize(values: np.ndarray) -> np.ndarray:
    """Float samples -> uint8, rounding .5 away from zero (values are >= 0)."""
    return np.floor(values + 0.5).astype(np.uint8)


def downscale(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Downscale an 8-bit image to (height, width).

    Integer ratios use exact box averaging; anything else falls back to
    bilinear sampling at output pixel centers. Upscaling is refused.
    """
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected a 2D or 3D image, got shape {img.shape}")
    src_h, src_w = img.shape[:2]
    if not (0 < width <= src_w and 0 < height <= src_h):
        raise ValueError(
            f"target {width}x{height} must be positive and no larger than "
            f"source {src_w}x{src_h}")
    if (src_w, src_h) == (width, height):
        return img.astype(np.uint8, copy=True)

    flat = img.reshape(src_h, src_w, -1).astype(np.float64)
    if src_w % width == 0 and src_h % height == 0:
        bh, bw = src_h // height, src_w // width
        out = flat.reshape(height, bh, width, bw, -1).mean(axis=(1, 3))
    else:
        out = _bilinear(flat, width, height)
    out = _quantize(out)
    return out.reshape(height, width) if img.ndim == 2 else out


def _bilinear(flat: np.ndarray, width: int, height: int) -> np.ndarray:
    src_h, src_w = flat.shape[:2]

    def axis_weights(dst, src):
        coords = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        lo = np.floor(coords).astype(np.int64)
        frac = coords - lo
        hi = np.minimum(lo + 1, src - 1)
        lo = np.clip(lo, 0, src - 1)
        return lo, hi, frac

    y0, y1, fy = axis_weights(height, src_h)
    x0, x1, fx = axis_weights(width, src_w)
    rows = flat[y0] * (1.0 - fy)[:, None, None] + flat[y1] * fy[:, None, None]
    return (rows[:, x0] * (1.0 - fx)[None, :, None]
            + rows[:, x1] * fx[None, :, None])


def binarize_mask(mask: np.ndarray, threshold: int = 128) -> np.ndarray:
    """Grayscale mask -> strict {0, 255} uint8 (foreground where >= threshold)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    return np.where(mask >= threshold, 255, 0).astype(np.uint8)


def make_mask_threshold(img: np.ndarray, luma_threshold: int) -> np.ndarray:
    """Fallback mask from brightness: 255 where rounded Rec.601 luma >= threshold."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {img.shape}")
    luma = img.astype(np.float64) @ np.array(_LUMA)
    return binarize_mask(_quantize(luma), luma_threshold)


# ---------------------------------------------------------------------------
# file IO

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def save_png(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"PNG output expects uint8, got {arr.dtype}")
    Image.fromarray(arr).save(path, format="PNG")


def list_frames(directory) -> list[Path]:
    """Image files in a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ViewDataError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in _FRAME_SUFFIXES)


# ---------------------------------------------------------------------------
# views

@dataclass
class View:
    """One training view: frame, binarized mask, and calibrated camera."""

    name: str
    image: np.ndarray
    mask: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose

    @property
    def resolution(self) -> tuple[int, int]:
        return self.mask.shape[0], self.mask.shape[1]


def _find_mask(masks_dir: Path, frame_name: str) -> Path:
    stem = Path(frame_name).stem
    direct = masks_dir / frame_name
    if direct.exists():
        return direct
    png = masks_dir / f"{stem}.png"
    if png.exists():
        return png
    candidates = sorted(masks_dir.glob(f"{stem}.*"))
    if not candidates:
        raise ViewDataError(f"no mask for frame {frame_name!r} in {masks_dir}")
    return candidates[0]


def load_views(frames_dir, masks_dir, scene: SceneModel, res: int) -> list[View]:
    """Assemble per-image views at a square working resolution.

    Every registered image in the scene must have a frame (by its recorded
    name) and a mask (same stem); sizes must match the camera's sensor size.
    Masks are binarized at 128 after downscaling. Output is sorted by name.
    """
    frames_dir, masks_dir = Path(frames_dir), Path(masks_dir)
    if res < 1:
        raise ValueError(f"resolution must be positive, got {res}")
    if not scene.images:
        raise ViewDataError("scene has no registered images")
    views = []
    for rec in sorted(scene.images, key=lambda r: r.name):
        frame_path = frames_dir / rec.name
        if not frame_path.exists():
            raise ViewDataError(f"missing frame {frame_path}")
        cam = scene.camera_for(rec)
        image = load_image(frame_path)
        if image.shape[:2] != (cam.height, cam.width):
            raise ViewDataError(
                f"{frame_path}: size {image.shape[1]}x{image.shape[0]} does not "
                f"match camera {cam.camera_id} ({cam.width}x{cam.height})")
        mask = load_mask(_find_mask(masks_dir, rec.name))
        if mask.shape != image.shape[:2]:
            raise ViewDataError(
                f"mask for {rec.name!r} is {mask.shape[1]}x{mask.shape[0]}, "
                f"frame is {image.shape[1]}x{image.shape[0]}")
        views.append(View(
            name=rec.name,
            image=downscale(image, res, res),
            mask=binarize_mask(downscale(mask, res, res)),
            intrinsics=cam.rescaled(res, res),
            pose=rec.pose,
        ))
    return views


def view_at_res(view: View, res: int) -> View:
    """The same view downscaled to ``res`` (mask re-binarized at 128)."""
    h, w = view.resolution
    if (h, w) == (res, res):
        return view
    return View(
        name=view.name,
        image=downscale(view.image, res, res),
        mask=binarize_mask(downscale(view.mask, res, res)),
        intrinsics=view.intrinsics.rescaled(res, res),
        pose=view.pose,
    )
