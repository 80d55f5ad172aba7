"""Mesh analysis, quality metrics, hard rasterization, and OBJ round-tripping.

The hard rasterizer here is a separate code path from the soft renderer (point
sampling with a top-left fill rule, no distance fields) so reconstructions can
be scored against masks produced independently of the thing being tested.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .colmap import CameraIntrinsics, Pose
from .tetgrid import TriMesh


# ---------------------------------------------------------------------------
# edges and topology

def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Undirected edges (E, 2) with a < b, rows lexicographic."""
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    de = _directed_edges(faces)
    k = int(faces.max()) + 1
    keys = np.unique(de.min(axis=1) * k + de.max(axis=1))
    return np.stack([keys // k, keys % k], axis=1)


def _directed_edges(faces: np.ndarray) -> np.ndarray:
    """(3F, 2) directed edges in face order: (v0,v1), (v1,v2), (v2,v0)."""
    return faces[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)


def _edge_groups(faces: np.ndarray):
    """Shared plumbing: directed edges, unique undirected keys, counts.

    Returns (de, ukeys, inverse, counts, k) where inverse maps each directed
    edge to its undirected edge id.
    """
    de = _directed_edges(np.asarray(faces, dtype=np.int64))
    k = int(de.max()) + 1 if len(de) else 1
    und = de.min(axis=1) * k + de.max(axis=1)
    ukeys, inverse, counts = np.unique(und, return_inverse=True,
                                       return_counts=True)
    return de, ukeys, inverse, counts, k


def is_watertight(mesh: TriMesh) -> bool:
    """Every edge shared by exactly two faces, with opposite winding."""
    if mesh.n_faces == 0:
        return False
    de, _, inverse, counts, _ = _edge_groups(mesh.faces)
    if not np.all(counts == 2):
        return False
    sign = np.where(de[:, 0] < de[:, 1], 1.0, -1.0)
    return bool(np.all(np.bincount(inverse, weights=sign) == 0))


def boundary_loops(mesh: TriMesh) -> list[list[int]]:
    """Closed vertex chains along edges used by exactly one face.

    A watertight mesh has none. Walks pick the smallest-index neighbor first,
    so the result is deterministic; an open chain (non-manifold boundary)
    counts as one loop.
    """
    if mesh.n_faces == 0:
        return []
    _, ukeys, _, counts, k = _edge_groups(mesh.faces)
    bkeys = ukeys[counts == 1]
    if len(bkeys) == 0:
        return []
    edges = [(int(key // k), int(key % k)) for key in bkeys]
    neighbors: dict[int, list[int]] = {}
    for a, b in edges:
        neighbors.setdefault(a, []).append(b)
        neighbors.setdefault(b, []).append(a)
    for lst in neighbors.values():
        lst.sort()
    unused = set(edges)
    loops = []
    while unused:
        a, b = min(unused)
        unused.discard((a, b))
        loop = [a, b]
        while True:
            here = loop[-1]
            nxt = None
            for cand in neighbors[here]:
                e = (min(here, cand), max(here, cand))
                if e in unused:
                    nxt = cand
                    unused.discard(e)
                    break
            if nxt is None:
                break
            if nxt == loop[0]:
                break
            loop.append(nxt)
        loops.append(loop)
    return loops


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def connected_components(mesh: TriMesh) -> int:
    """Number of face components under shared-edge adjacency."""
    if mesh.n_faces == 0:
        return 0
    _, _, inverse, _, _ = _edge_groups(mesh.faces)
    face_of = np.repeat(np.arange(mesh.n_faces), 3)
    order = np.argsort(inverse, kind="stable")
    sorted_eid = inverse[order]
    sorted_face = face_of[order]
    dsu = _DisjointSet(mesh.n_faces)
    for i in range(1, len(sorted_eid)):
        if sorted_eid[i] == sorted_eid[i - 1]:
            dsu.union(int(sorted_face[i]), int(sorted_face[i - 1]))
    return len({dsu.find(f) for f in range(mesh.n_faces)})


def face_normals(mesh: TriMesh, normalize: bool = True) -> np.ndarray:
    tv = mesh.vertices[mesh.faces]
    n = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    if normalize:
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            n = np.where(lens > 0, n / lens, 0.0)
    return n


def roughness(mesh: TriMesh) -> float:
    """Mean (1 - cos angle) between normals across interior edges.

    Zero for a plane. A triangulated cube scores 2/3: of its 18 interior
    edges, the 12 cube edges are right-angle creases (1 - cos = 1) and the 6
    face diagonals are flat (1 - cos = 0). Degenerate faces are skipped.
    """
    if mesh.n_faces == 0:
        return 0.0
    _, _, inverse, counts, _ = _edge_groups(mesh.faces)
    face_of = np.repeat(np.arange(mesh.n_faces), 3)
    order = np.argsort(inverse, kind="stable")
    sorted_eid = inverse[order]
    sorted_face = face_of[order]
    starts = np.searchsorted(sorted_eid, np.arange(len(counts)))
    interior = counts == 2
    fa = sorted_face[starts[interior]]
    fb = sorted_face[starts[interior] + 1]
    normals = face_normals(mesh)
    ok = (np.linalg.norm(normals[fa], axis=1) > 0) & \
         (np.linalg.norm(normals[fb], axis=1) > 0)
    if not np.any(ok):
        return 0.0
    cos = np.clip(np.einsum("ij,ij->i", normals[fa[ok]], normals[fb[ok]]),
                  -1.0, 1.0)
    return float(np.mean(1.0 - cos))


def euler_characteristic(mesh: TriMesh) -> int:
    return mesh.n_vertices - len(unique_edges(mesh.faces)) + mesh.n_faces


def surface_area(mesh: TriMesh) -> float:
    return float(np.linalg.norm(face_normals(mesh, normalize=False),
                                axis=1).sum() / 2.0)


# ---------------------------------------------------------------------------
# quality report

@dataclass
class MeshQualityReport:
    n_vertices: int
    n_faces: int
    n_edges: int
    euler_characteristic: int
    boundary_loop_count: int
    connected_components: int
    watertight: bool
    roughness: float
    surface_area: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), indent=2, **kwargs)


def quality_report(mesh: TriMesh) -> MeshQualityReport:
    return MeshQualityReport(
        n_vertices=mesh.n_vertices,
        n_faces=mesh.n_faces,
        n_edges=len(unique_edges(mesh.faces)),
        euler_characteristic=euler_characteristic(mesh),
        boundary_loop_count=len(boundary_loops(mesh)),
        connected_components=connected_components(mesh),
        watertight=is_watertight(mesh),
        roughness=roughness(mesh),
        surface_area=surface_area(mesh),
    )


# ---------------------------------------------------------------------------
# sampling and chamfer distance

def sample_surface(mesh: TriMesh, count: int, rng) -> np.ndarray:
    """Uniform area-weighted samples; rng is a numpy Generator."""
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    areas = np.linalg.norm(face_normals(mesh, normalize=False), axis=1) / 2.0
    total = areas.sum()
    if mesh.n_faces == 0 or total <= 0:
        raise ValueError("cannot sample a mesh with no area")
    fidx = rng.choice(mesh.n_faces, size=count, p=areas / total)
    r1 = rng.random(count)
    r2 = rng.random(count)
    sq = np.sqrt(r1)
    bary = np.stack([1.0 - sq, sq * (1.0 - r2), sq * r2], axis=1)
    tv = mesh.vertices[mesh.faces[fidx]]
    return np.einsum("ik,ikj->ij", bary, tv)


def point_mesh_distances(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Exact distance from each point to the nearest triangle (brute force)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces")
    tv = np.ascontiguousarray(mesh.vertices[mesh.faces])
    out = np.empty(len(points))
    _kernels.min_dist_to_tris(points, tv, out)
    return out


def chamfer_distance(mesh_a: TriMesh, mesh_b: TriMesh, samples: int = 10000,
                     seed: int = 0) -> float:
    """Symmetric mean surface distance from area-weighted samples.

    (mean of a-to-b distances + mean of b-to-a distances) / 2; a mesh compared
    with itself scores ~0.
    """
    rng = np.random.default_rng(seed)
    pa = sample_surface(mesh_a, samples, rng)
    pb = sample_surface(mesh_b, samples, rng)
    d_ab = point_mesh_distances(pa, mesh_b).mean()
    d_ba = point_mesh_distances(pb, mesh_a).mean()
    return float((d_ab + d_ba) / 2.0)


# ---------------------------------------------------------------------------
# hard rasterization and IoU

def hard_coverage(mesh: TriMesh, intrinsics: CameraIntrinsics, pose: Pose,
                  res: int, near_clip: float = 1e-6) -> np.ndarray:
    """Binary mask (res, res) uint8: 255 where a pixel center is covered.

    Point-in-triangle with the top-left fill rule, so pixels on an edge shared
    by two triangles are counted by exactly one of them (no seams). Triangles
    with any vertex at depth <= near_clip are skipped.
    """
    if res < 1:
        raise ValueError(f"resolution must be positive, got {res}")
    out = np.zeros(res * res, dtype=np.uint8)
    if mesh.n_faces == 0:
        return out.reshape(res, res)
    intr = intrinsics
    if (intr.width, intr.height) != (res, res):
        intr = intr.rescaled(res, res)
    fx, fy, cx, cy = intr.pinhole()
    R = pose.rotation()
    xc = mesh.vertices @ R.T + pose.tvec
    z = xc[:, 2]
    valid = z > near_clip
    safe_z = np.where(valid, z, 1.0)
    uv = np.stack([fx * xc[:, 0] / safe_z + cx,
                   fy * xc[:, 1] / safe_z + cy], axis=1)
    face_ok = valid[mesh.faces].all(axis=1)
    tri_uv = np.ascontiguousarray(uv[mesh.faces[face_ok]])
    _kernels.hard_raster(tri_uv, res, out)
    return out.reshape(res, res)


def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Intersection over union of two masks (nonzero = foreground)."""
    mask_a, mask_b = np.asarray(mask_a), np.asarray(mask_b)
    if mask_a.shape != mask_b.shape:
        raise ValueError(f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    fa = mask_a > 0
    fb = mask_b > 0
    union = np.logical_or(fa, fb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(fa, fb).sum() / union)


# ---------------------------------------------------------------------------
# OBJ

def export_obj(mesh: TriMesh, path) -> None:
    """Write an OBJ with %.9g coordinates (1-indexed faces).

    The format is stable: exporting, parsing, and exporting again produces
    byte-identical output.
    """
    lines = [f"# triangle mesh: {mesh.n_vertices} vertices, {mesh.n_faces} faces"]
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.9g} {y:.9g} {z:.9g}")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_obj(path) -> TriMesh:
    """Read a triangle OBJ; v/f only, f may use v/vt/vn references."""
    path = Path(path)
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            tok = raw.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "v":
                if len(tok) < 4:
                    raise ValueError(f"{path}, line {lineno}: short vertex line")
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise ValueError(
                        f"{path}, line {lineno}: only triangles are supported "
                        f"({len(tok) - 1} indices)")
                idx = []
                for t in tok[1:]:
                    first = t.split("/")[0]
                    i = int(first)
                    if i < 1:
                        raise ValueError(
                            f"{path}, line {lineno}: indices must be positive")
                    idx.append(i - 1)
                faces.append(idx)
            # every other directive (vn, vt, o, g, s, mtllib...) is ignored
    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    face_arr = np.array(faces, dtype=np.int32).reshape(-1, 3)
    if len(face_arr) and face_arr.max() >= len(vertices):
        raise ValueError(f"{path}: face references vertex "
                         f"{int(face_arr.max()) + 1} of {len(vertices)}")
    return TriMesh(vertices=vertices, faces=face_arr)
