"""Input-validation helpers shared by the estimator, trainer, and CLI."""

from __future__ import annotations

import numpy as np

from .dataprep import View
from .errors import ViewDataError
from .tetgrid import TriMesh


def check_finite_array(arr, name: str, shape=None) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_binary_mask(mask, name: str = "mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {mask.shape}")
    if mask.dtype != np.uint8:
        raise ValueError(f"{name} must be uint8, got {mask.dtype}")
    bad = ~np.isin(mask, (0, 255))
    if bad.any():
        raise ValueError(
            f"{name} must contain only 0 and 255 "
            f"({int(bad.sum())} other values found)")
    return mask


def check_views(views, minimum: int = 1) -> list[View]:
    """Validate a homogeneous list of views (shapes, masks, camera sizes)."""
    views = list(views)
    if len(views) < minimum:
        raise ViewDataError(f"need at least {minimum} views, got {len(views)}")
    first = None
    for v in views:
        if not isinstance(v, View):
            raise ViewDataError(f"expected a View, got {type(v).__name__}")
        if v.image.ndim != 3 or v.image.shape[2] != 3 or v.image.dtype != np.uint8:
            raise ViewDataError(
                f"view {v.name!r}: image must be (H, W, 3) uint8, "
                f"got {v.image.shape} {v.image.dtype}")
        check_binary_mask(v.mask, f"view {v.name!r} mask")
        if v.mask.shape != v.image.shape[:2]:
            raise ViewDataError(
                f"view {v.name!r}: mask {v.mask.shape} does not match image "
                f"{v.image.shape[:2]}")
        if (v.intrinsics.height, v.intrinsics.width) != v.mask.shape:
            raise ViewDataError(
                f"view {v.name!r}: intrinsics are {v.intrinsics.width}x"
                f"{v.intrinsics.height} but the images are "
                f"{v.mask.shape[1]}x{v.mask.shape[0]}")
        if first is None:
            first = v.mask.shape
        elif v.mask.shape != first:
            raise ViewDataError(
                f"view {v.name!r} is {v.mask.shape}, others are {first}")
    return views


def check_mesh(mesh: TriMesh, name: str = "mesh") -> TriMesh:
    if mesh.vertices.ndim != 2 or mesh.vertices.shape[1] != 3:
        raise ValueError(f"{name}: vertices must be (N, 3)")
    if mesh.faces.ndim != 2 or mesh.faces.shape[1] != 3:
        raise ValueError(f"{name}: faces must be (N, 3)")
    if mesh.n_faces:
        if mesh.faces.min() < 0 or mesh.faces.max() >= mesh.n_vertices:
            raise ValueError(f"{name}: face indices out of range")
        f = np.sort(mesh.faces, axis=1)
        if np.any(f[:, 0] == f[:, 1]) or np.any(f[:, 1] == f[:, 2]):
            raise ValueError(f"{name}: degenerate face (repeated vertex)")
    if not np.all(np.isfinite(mesh.vertices)):
        raise ValueError(f"{name}: non-finite vertex coordinates")
    return mesh
