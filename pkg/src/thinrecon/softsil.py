"""Differentiable soft silhouette rendering.

Each triangle j contributes a probability map
    D_j(p) = sigmoid(delta_j * d^2(p, boundary_j) / gamma)
(delta is +1 inside the projected triangle, -1 outside), and pixel coverage is
S(p) = 1 - prod_j (1 - D_j(p)). There is no occlusion or depth term: silhouette
coverage only needs set union, which is what makes the product form exact.

The implementation works in log space: the forward pass accumulates
-log(1 - D_j) per pixel with a fixed-order bincount, and the backward pass
recovers each pair's leave-one-out product as exp(nl_j - snl[pixel]). That
keeps both passes deterministic for any thread count, with no per-pixel
sorting.

Candidate pairs are limited to an inflated bounding box around each triangle;
the inflation radius sqrt(gamma * ln(1e6)) drops contributions below 1e-6.
Gamma is specified at a 128 px reference resolution and scales with
(res / 128)^2 so the blur has constant physical width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .colmap import CameraIntrinsics, Pose
from .dataprep import View
from .errors import PairBudgetError
from .tetgrid import SdfField, TetGrid, TriMesh, VertexProvenance

GAMMA_REFERENCE_RES = 128
_CUTOFF = math.log(1e6)


@dataclass(frozen=True)
class RasterSettings:
    """Knobs of the soft rasterizer.

    gamma: sigmoid bandwidth in squared pixels at the reference resolution.
    near_clip: triangles with any vertex at camera depth <= near_clip are culled.
    max_pairs: budget on candidate (triangle, pixel) pairs per render, a
        safety net against exploded meshes eating all memory.
    """

    gamma: float = 1.0
    near_clip: float = 0.01
    max_pairs: int = 60_000_000

    def gamma_at(self, res: int) -> float:
        return self.gamma * (res / GAMMA_REFERENCE_RES) ** 2


def project(intrinsics: CameraIntrinsics, pose: Pose, point, near_clip=1e-6):
    """Project one world point; returns (uv, depth, d(uv)/d(world) 2x3).

    Raises ValueError when the point is at or behind the near plane.
    """
    R = pose.rotation()
    xc = R @ np.asarray(point, dtype=np.float64) + pose.tvec
    z = float(xc[2])
    if z <= near_clip:
        raise ValueError(f"point at camera depth {z:g} cannot be projected")
    fx, fy, cx, cy = intrinsics.pinhole()
    uv = np.array([fx * xc[0] / z + cx, fy * xc[1] / z + cy])
    jc = np.array([
        [fx / z, 0.0, -fx * xc[0] / z ** 2],
        [0.0, fy / z, -fy * xc[1] / z ** 2],
    ])
    return uv, z, jc @ R


def _project_batch(intrinsics, pose, points, near_clip):
    """Vectorized projection: (uv, depth, jacobian, valid); invalid rows zeroed."""
    R = pose.rotation()
    xc = points @ R.T + pose.tvec
    z = xc[:, 2]
    valid = z > near_clip
    fx, fy, cx, cy = intrinsics.pinhole()
    safe_z = np.where(valid, z, 1.0)
    uv = np.empty((len(points), 2))
    uv[:, 0] = fx * xc[:, 0] / safe_z + cx
    uv[:, 1] = fy * xc[:, 1] / safe_z + cy
    jc = np.zeros((len(points), 2, 3))
    jc[:, 0, 0] = fx / safe_z
    jc[:, 1, 1] = fy / safe_z
    jc[:, 0, 2] = -fx * xc[:, 0] / safe_z ** 2
    jc[:, 1, 2] = -fy * xc[:, 1] / safe_z ** 2
    jac = jc @ R  # (N, 2, 3): broadcasted matmul over the leading axis
    uv[~valid] = 0.0
    jac[~valid] = 0.0
    return uv, z, jac, valid


@dataclass
class SilhouetteIntermediates:
    """Everything the backward pass needs, captured by soft_coverage."""

    res: int
    gamma_eff: float
    n_mesh_vertices: int
    valid_faces: np.ndarray   # (Fv, 3) mesh vertex ids of unculled faces
    tri_uv: np.ndarray        # (Fv, 3, 2) projected vertices
    starts: np.ndarray        # (Fv + 1,) pair ranges per triangle
    pair_pix: np.ndarray      # (P,) flat pixel index per pair
    z: np.ndarray             # (P,) signed logits
    neglog: np.ndarray        # (P,) softplus(z)
    snl: np.ndarray           # (res^2,) per-pixel sum of neglog
    jac: np.ndarray           # (Nv, 2, 3) projection jacobians


def soft_coverage(mesh: TriMesh, view: View, res: int | None = None,
                  settings: RasterSettings = RasterSettings()):
    """Render the soft coverage image of a mesh for one view.

    Returns (coverage, intermediates); coverage is (res, res) float64 in
    [0, 1]. res defaults to the view's own resolution.
    """
    if res is None:
        res = view.resolution[0]
    if res < 1:
        raise ValueError(f"resolution must be positive, got {res}")
    intr = view.intrinsics
    if (intr.width, intr.height) != (res, res):
        intr = intr.rescaled(res, res)
    gamma_eff = settings.gamma_at(res)

    nv = mesh.n_vertices
    if mesh.n_faces == 0:
        empty_i64 = np.zeros(0, dtype=np.int64)
        inter = SilhouetteIntermediates(
            res=res, gamma_eff=gamma_eff, n_mesh_vertices=nv,
            valid_faces=np.zeros((0, 3), dtype=np.int32),
            tri_uv=np.zeros((0, 3, 2)), starts=np.zeros(1, dtype=np.int64),
            pair_pix=empty_i64, z=np.zeros(0), neglog=np.zeros(0),
            snl=np.zeros(res * res), jac=np.zeros((nv, 2, 3)))
        return np.zeros((res, res)), inter

    uv, _, jac, valid = _project_batch(
        intr, view.pose, mesh.vertices, settings.near_clip)
    face_ok = valid[mesh.faces].all(axis=1)
    faces = mesh.faces[face_ok]
    tri_uv = np.ascontiguousarray(uv[faces])          # (Fv, 3, 2)

    inflate = math.sqrt(gamma_eff * _CUTOFF)
    mn = tri_uv.min(axis=1) - inflate
    mx = tri_uv.max(axis=1) + inflate
    px0 = np.clip(np.ceil(mn[:, 0] - 0.5), 0, res - 1).astype(np.int64)
    px1 = np.clip(np.floor(mx[:, 0] - 0.5), -1, res - 1).astype(np.int64)
    py0 = np.clip(np.ceil(mn[:, 1] - 0.5), 0, res - 1).astype(np.int64)
    py1 = np.clip(np.floor(mx[:, 1] - 0.5), -1, res - 1).astype(np.int64)
    w = np.maximum(px1 - px0 + 1, 0)
    h = np.maximum(py1 - py0 + 1, 0)
    # zero-width ranges must not run in the fill kernel
    px1 = np.where(w * h == 0, px0 - 1, px1)
    py1 = np.where(w * h == 0, py0 - 1, py1)
    counts = w * h

    total = int(counts.sum())
    if total > settings.max_pairs:
        raise PairBudgetError(
            f"soft rasterizer would test {total} triangle/pixel pairs "
            f"(budget {settings.max_pairs}); the mesh has likely exploded")

    starts = np.zeros(len(faces) + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    pair_pix = np.empty(total, dtype=np.int64)
    _kernels.fill_pairs(px0, px1, py0, py1, starts, pair_pix, res)

    z = np.empty(total)
    neglog = np.empty(total)
    _kernels.pairs_forward(tri_uv, starts, pair_pix, res, gamma_eff, z, neglog)
    snl = np.bincount(pair_pix, weights=neglog, minlength=res * res)
    coverage = -np.expm1(-snl)

    inter = SilhouetteIntermediates(
        res=res, gamma_eff=gamma_eff, n_mesh_vertices=nv,
        valid_faces=faces, tri_uv=tri_uv, starts=starts, pair_pix=pair_pix,
        z=z, neglog=neglog, snl=snl, jac=jac)
    return coverage.reshape(res, res), inter


def silhouette_loss(coverage: np.ndarray, mask: np.ndarray):
    """Mean squared error between coverage and a {0, 255} mask.

    Returns (loss, d loss / d coverage).
    """
    coverage = np.asarray(coverage, dtype=np.float64)
    mask = np.asarray(mask)
    if coverage.shape != mask.shape:
        raise ValueError(
            f"coverage {coverage.shape} and mask {mask.shape} differ in shape")
    target = mask.astype(np.float64) / 255.0
    diff = coverage - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def backward_silhouette(inter: SilhouetteIntermediates,
                        d_coverage: np.ndarray) -> np.ndarray:
    """Pull a coverage gradient back to mesh vertex positions, (Nv, 3)."""
    d_flat = np.ascontiguousarray(
        np.asarray(d_coverage, dtype=np.float64).reshape(-1))
    if d_flat.shape != inter.snl.shape:
        raise ValueError(
            f"gradient has {d_flat.size} pixels, render had {inter.snl.size}")
    nv = inter.n_mesh_vertices
    if len(inter.valid_faces) == 0:
        return np.zeros((nv, 3))

    tri_grad = np.zeros((len(inter.valid_faces), 3, 2))
    _kernels.pairs_backward(
        inter.tri_uv, inter.starts, inter.pair_pix, inter.z, inter.neglog,
        inter.snl, d_flat, inter.res, inter.gamma_eff, tri_grad)

    vids = inter.valid_faces.ravel().astype(np.int64)
    gu = np.bincount(vids, weights=tri_grad[:, :, 0].ravel(), minlength=nv)
    gv = np.bincount(vids, weights=tri_grad[:, :, 1].ravel(), minlength=nv)
    guv = np.stack([gu, gv], axis=1)
    return np.einsum("nij,ni->nj", inter.jac, guv)


def accumulate_sdf_grads(vertex_grads: np.ndarray, prov: VertexProvenance,
                         grid: TetGrid,
                         field: SdfField | None = None) -> np.ndarray:
    """Push mesh-vertex gradients to grid field values through the crossings.

    For a vertex born on edge (a, b): pos = p_a + t (p_b - p_a) with
    t = s_a / (s_a - s_b), so
        d pos / d s_a = (p_b - p_a) * (-s_b) / (s_a - s_b)^2
        d pos / d s_b = (p_b - p_a) * ( s_a) / (s_a - s_b)^2.
    """
    vertex_grads = np.asarray(vertex_grads, dtype=np.float64)
    if vertex_grads.shape != (len(prov), 3):
        raise ValueError(
            f"expected gradients of shape ({len(prov)}, 3), "
            f"got {vertex_grads.shape}")
    positions = field.positions(grid) if field is not None else grid.vertices
    direction = positions[prov.edge_b] - positions[prov.edge_a]
    along = np.einsum("ij,ij->i", vertex_grads, direction)
    denom = (prov.s_a - prov.s_b) ** 2
    ga = along * (-prov.s_b / denom)
    gb = along * (prov.s_a / denom)
    nv = grid.n_vertices
    return (np.bincount(prov.edge_a, weights=ga, minlength=nv)
            + np.bincount(prov.edge_b, weights=gb, minlength=nv))


def accumulate_offset_grads(vertex_grads: np.ndarray, prov: VertexProvenance,
                            grid: TetGrid, field: SdfField) -> np.ndarray:
    """Gradients w.r.t. the raw (pre-tanh) vertex offsets, (V, 3).

    pos = p_a + t (p_b - p_a) gives d pos / d p_a = (1 - t) I and
    d pos / d p_b = t I; each endpoint position depends on its raw offset via
    p = vertex + tanh(raw) / n.
    """
    vertex_grads = np.asarray(vertex_grads, dtype=np.float64)
    if vertex_grads.shape != (len(prov), 3):
        raise ValueError(
            f"expected gradients of shape ({len(prov)}, 3), "
            f"got {vertex_grads.shape}")
    if field.raw_offsets is None:
        raise ValueError("field has no offsets enabled")
    nv = grid.n_vertices
    out = np.zeros((nv, 3))
    ta = (1.0 - prov.t)[:, None] * vertex_grads
    tb = prov.t[:, None] * vertex_grads
    for c in range(3):
        out[:, c] = (np.bincount(prov.edge_a, weights=ta[:, c], minlength=nv)
                     + np.bincount(prov.edge_b, weights=tb[:, c], minlength=nv))
    sech2 = 1.0 - np.tanh(field.raw_offsets) ** 2
    return out * sech2 / grid.n
