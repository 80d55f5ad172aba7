"""Synthetic geometry and camera rigs for tests and benchmarks.

Everything here is deterministic given its arguments; masks rendered from
these meshes come from the hard rasterizer, not the differentiable one.
"""

from __future__ import annotations

import numpy as np

from .colmap import CameraIntrinsics, Pose, rotmat_to_quat
from .dataprep import View
from .meshkit import hard_coverage
from .tetgrid import TriMesh

# even cyclic permutations sending canonical +z to the requested world axis
_AXIS_ORDER = {0: (2, 0, 1), 1: (1, 2, 0), 2: (0, 1, 2)}


def _orient(vertices: np.ndarray, axis: int) -> np.ndarray:
    if axis not in _AXIS_ORDER:
        raise ValueError(f"axis must be 0, 1, or 2, got {axis}")
    out = np.empty_like(vertices)
    for world, canon in enumerate(_AXIS_ORDER[axis]):
        out[:, world] = vertices[:, canon]
    return out


def make_disc_mesh(radius: float = 0.5, thickness: float = 0.02,
                   segments: int = 96, axis: int = 1,
                   center=(0.0, 0.0, 0.0)) -> TriMesh:
    """A closed, thin cylindrical disc whose flat normal points along ``axis``."""
    if segments < 3:
        raise ValueError("segments must be at least 3")
    if radius <= 0 or thickness <= 0:
        raise ValueError("radius and thickness must be positive")
    ang = 2.0 * np.pi * np.arange(segments) / segments
    h = thickness / 2.0
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    top = np.concatenate([ring, np.full((segments, 1), h)], axis=1)
    bot = np.concatenate([ring, np.full((segments, 1), -h)], axis=1)
    tc = np.array([[0.0, 0.0, h]])
    bc = np.array([[0.0, 0.0, -h]])
    verts = np.concatenate([top, bot, tc, bc], axis=0)
    itc, ibc = 2 * segments, 2 * segments + 1

    faces = []
    for k in range(segments):
        k1 = (k + 1) % segments
        faces.append([itc, k, k1])                        # top fan, +z out
        faces.append([ibc, segments + k1, segments + k])  # bottom fan, -z out
        faces.append([k, segments + k, segments + k1])    # rim
        faces.append([k, segments + k1, k1])
    mesh_v = _orient(verts, axis) + np.asarray(center, dtype=np.float64)
    return TriMesh(mesh_v, np.array(faces, dtype=np.int32))


def make_cube_mesh(half: float = 0.5, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """An axis-aligned cube of side 2*half, outward-oriented."""
    if half <= 0:
        raise ValueError("half extent must be positive")
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1)
                        for z in (-1, 1)], dtype=np.float64) * half
    # quads per face as seen from outside (counter-clockwise)
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append([a, b, c])
        faces.append([a, c, d])
    return TriMesh(corners + np.asarray(center, dtype=np.float64),
                   np.array(faces, dtype=np.int32))


def make_tube_mesh(radius: float = 0.5, height: float = 1.0,
                   segments: int = 24) -> TriMesh:
    """An open cylinder (no caps): two boundary loops, one component."""
    if segments < 3:
        raise ValueError("segments must be at least 3")
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    top = np.concatenate([ring, np.full((segments, 1), height / 2)], axis=1)
    bot = np.concatenate([ring, np.full((segments, 1), -height / 2)], axis=1)
    verts = np.concatenate([top, bot], axis=0)
    faces = []
    for k in range(segments):
        k1 = (k + 1) % segments
        faces.append([k, segments + k, segments + k1])
        faces.append([k, segments + k1, k1])
    return TriMesh(verts, np.array(faces, dtype=np.int32))


def look_at_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose looking from eye to target (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    z_c = fwd / norm
    right = np.cross(z_c, np.asarray(up, dtype=np.float64))
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    x_c = right / rnorm
    y_c = np.cross(z_c, x_c)
    R = np.stack([x_c, y_c, z_c])
    return Pose(qvec=rotmat_to_quat(R), tvec=-R @ eye)


def ring_poses(count: int, radius: float, elevation_deg: float = 0.0,
               azimuth_start_deg: float = 0.0, target=(0.0, 0.0, 0.0)
               ) -> list[Pose]:
    """Cameras evenly spaced on a circle around +z, looking at the target."""
    if count < 1:
        raise ValueError("count must be positive")
    el = np.deg2rad(elevation_deg)
    poses = []
    for i in range(count):
        az = np.deg2rad(azimuth_start_deg + 360.0 * i / count)
        eye = radius * np.array([
            np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at_pose(eye + np.asarray(target, dtype=np.float64),
                                  target))
    return poses


def make_camera(res: int = 128, focal: float = 240.0) -> CameraIntrinsics:
    return CameraIntrinsics(
        camera_id=1, model="PINHOLE", width=res, height=res,
        params=np.array([focal, focal, res / 2.0, res / 2.0]))


def render_view(mesh: TriMesh, pose: Pose, intrinsics: CameraIntrinsics,
                name: str) -> View:
    """A View whose mask is the hard-rasterized silhouette of the mesh."""
    res = intrinsics.width
    if intrinsics.height != res:
        raise ValueError("render_view expects a square camera")
    mask = hard_coverage(mesh, intrinsics, pose, res)
    return View(name=name, image=np.repeat(mask[:, :, None], 3, axis=2),
                mask=mask, intrinsics=intrinsics, pose=pose)


def render_views(mesh: TriMesh, poses: list[Pose],
                 intrinsics: CameraIntrinsics, prefix: str = "view"
                 ) -> list[View]:
    return [render_view(mesh, pose, intrinsics, f"{prefix}_{i:03d}.png")
            for i, pose in enumerate(poses)]
