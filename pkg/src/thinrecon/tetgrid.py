"""Tetrahedral scalar-field grid and marching-tetrahedra surface extraction.

The domain is the cube [-1, 1]^3 split into n^3 cells, each cell into six
tetrahedra (the Kuhn split around the main diagonal), all positively oriented.
A signed scalar field on the grid vertices yields a triangle mesh via marching
tetrahedra; every mesh vertex records which grid edge produced it and at what
parameter, so gradients with respect to the field can be pushed back through
the extraction analytically.

Sign convention: a field value of exactly zero counts as positive, so the
surface only passes strictly between a negative and a non-negative vertex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# The six vertex pairs of a tetrahedron, in fixed slot order. Slot k of a
# tet's edge list refers to this pair of its local vertices.
TET_EDGE_SLOTS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

_AXIS_PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


@dataclass
class TriMesh:
    """Triangle soup with shared vertices; faces are outward-oriented CCW."""

    vertices: np.ndarray  # (Nv, 3) float64
    faces: np.ndarray     # (Nf, 3) int32

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@dataclass
class VertexProvenance:
    """Where each extracted mesh vertex came from.

    Mesh vertex i sits on grid edge (edge_a[i], edge_b[i]) at parameter t[i],
    i.e. pos = p_a + t (p_b - p_a), with the field values s_a, s_b captured at
    extraction time. This is the differentiation path from vertex positions
    back to field values.
    """

    edge_a: np.ndarray  # (Nv,) int32 grid vertex ids
    edge_b: np.ndarray
    s_a: np.ndarray     # (Nv,) float64
    s_b: np.ndarray
    t: np.ndarray       # (Nv,) float64 in [0, 1)

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class TetGrid:
    """Vertices, tetrahedra, and the shared-edge index of the Kuhn lattice."""

    n: int
    vertices: np.ndarray   # ((n+1)^3, 3) float64
    tets: np.ndarray       # (6 n^3, 4) int32, positively oriented
    edges: np.ndarray      # (E, 2) int32, a < b, rows lexicographic
    tet_edges: np.ndarray  # (6 n^3, 6) int32 edge ids per TET_EDGE_SLOTS

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def cell_size(self) -> float:
        return 2.0 / self.n

    def vertex_id(self, i: int, j: int, k: int) -> int:
        n1 = self.n + 1
        return (i * n1 + j) * n1 + k


def _cell_tet_offsets() -> np.ndarray:
    """The six Kuhn tets of the unit cell as (6, 4, 3) corner offsets.

    Each tet walks corner (0,0,0) -> (1,1,1) along one axis permutation; odd
    permutations get two vertices swapped so every tet is positively oriented.
    """
    eye = np.eye(3, dtype=np.int64)
    out = np.empty((6, 4, 3), dtype=np.int64)
    for ti, perm in enumerate(_AXIS_PERMS):
        corners = np.zeros((4, 3), dtype=np.int64)
        corners[1] = eye[perm[0]]
        corners[2] = eye[perm[0]] + eye[perm[1]]
        corners[3] = 1
        vol = np.linalg.det((corners[1:] - corners[0]).astype(np.float64))
        if vol < 0:
            corners[[1, 2]] = corners[[2, 1]]
        out[ti] = corners
    vols = [np.linalg.det((t[1:] - t[0]).astype(np.float64)) for t in out]
    assert all(v > 0 for v in vols)
    return out


def make_tet_grid(n: int) -> TetGrid:
    """Build the grid for resolution n (cells per axis)."""
    if n < 1:
        raise ValueError(f"grid resolution must be at least 1, got {n}")
    n1 = n + 1
    axis = np.linspace(-1.0, 1.0, n1)
    vertices = np.stack(
        np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)

    ci, cj, ck = np.meshgrid(np.arange(n), np.arange(n), np.arange(n),
                             indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    offsets = _cell_tet_offsets()
    ncells = n ** 3
    tets = np.empty((ncells, 6, 4), dtype=np.int64)
    for ti in range(6):
        for vi in range(4):
            oi, oj, ok = offsets[ti, vi]
            tets[:, ti, vi] = ((ci + oi) * n1 + (cj + oj)) * n1 + (ck + ok)
    tets = tets.reshape(-1, 4)

    slot_pairs = np.array(TET_EDGE_SLOTS)
    pairs = tets[:, slot_pairs]                      # (T, 6, 2)
    lo = pairs.min(axis=-1)
    hi = pairs.max(axis=-1)
    nverts = n1 ** 3
    keys = lo.astype(np.int64) * nverts + hi
    ukeys, inverse = np.unique(keys.ravel(), return_inverse=True)
    edges = np.stack([ukeys // nverts, ukeys % nverts], axis=1)

    return TetGrid(
        n=n,
        vertices=vertices,
        tets=tets.astype(np.int32),
        edges=edges.astype(np.int32),
        tet_edges=inverse.reshape(-1, 6).astype(np.int32),
    )


@dataclass
class SdfField:
    """Per-grid-vertex signed values, plus optional bounded vertex offsets.

    ``raw_offsets`` are unconstrained; the actual displacement is
    tanh(raw) / n, which keeps every vertex strictly within half a cell of its
    lattice position.
    """

    values: np.ndarray            # (V,) float64
    raw_offsets: np.ndarray | None = None  # (V, 3) float64

    def positions(self, grid: TetGrid) -> np.ndarray:
        if self.raw_offsets is None:
            return grid.vertices
        return grid.vertices + np.tanh(self.raw_offsets) / grid.n

    def copy(self) -> "SdfField":
        return SdfField(
            self.values.copy(),
            None if self.raw_offsets is None else self.raw_offsets.copy())


# ---------------------------------------------------------------------------
# case tables
#
# A tet's sign code has bit v set when local vertex v is negative. Codes with
# one or three negative vertices cut a triangle; codes with two cut a quad
# (stored as a cyclic list of edge slots). Built programmatically and
# orientation-checked on the canonical tet so there is no hand-typed table to
# get wrong.

def _build_case_tables():
    P = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    slot_of = {}
    for si, (a, b) in enumerate(TET_EDGE_SLOTS):
        slot_of[(a, b)] = si
        slot_of[(b, a)] = si

    tri_table, quad_table = {}, {}
    for code in range(1, 15):
        neg = [v for v in range(4) if (code >> v) & 1]
        pos = [v for v in range(4) if not (code >> v) & 1]
        ref = P[pos].mean(axis=0) - P[neg].mean(axis=0)  # negative -> positive

        if len(neg) in (1, 3):
            lone = neg[0] if len(neg) == 1 else pos[0]
            others = [v for v in range(4) if v != lone]
            slots = [slot_of[(lone, o)] for o in others]
            pts = [(P[lone] + P[o]) / 2 for o in others]
            normal = np.cross(pts[1] - pts[0], pts[2] - pts[0])
            d = float(np.dot(normal, ref))
            assert d != 0
            if d < 0:
                slots[1], slots[2] = slots[2], slots[1]
                pts[1], pts[2] = pts[2], pts[1]
            assert np.dot(np.cross(pts[1] - pts[0], pts[2] - pts[0]), ref) > 0
            tri_table[code] = tuple(slots)
        else:
            a, b = neg
            c, d = pos
            cycle = [(a, c), (a, d), (b, d), (b, c)]
            pts = [(P[u] + P[v]) / 2 for u, v in cycle]
            normal = np.cross(pts[1] - pts[0], pts[2] - pts[0])
            if float(np.dot(normal, ref)) < 0:
                cycle = [cycle[0], cycle[3], cycle[2], cycle[1]]
                pts = [pts[0], pts[3], pts[2], pts[1]]
            for tri in ((0, 1, 2), (0, 2, 3)):
                tp = [pts[i] for i in tri]
                assert np.dot(np.cross(tp[1] - tp[0], tp[2] - tp[0]), ref) > 0
            quad_table[code] = tuple(slot_of[pair] for pair in cycle)
    return tri_table, quad_table


_TRI_TABLE, _QUAD_TABLE = _build_case_tables()


# ---------------------------------------------------------------------------
# extraction

def edge_vertex(s_a: float, s_b: float, p_a, p_b):
    """Zero crossing of a single edge, with derivatives.

    Returns (position, d_position/d_s_a, d_position/d_s_b). The endpoints must
    have strictly opposite signs.
    """
    if s_a == 0.0 or s_b == 0.0 or (s_a < 0) == (s_b < 0):
        raise ValueError(f"edge values must straddle zero, got {s_a} and {s_b}")
    p_a = np.asarray(p_a, dtype=np.float64)
    p_b = np.asarray(p_b, dtype=np.float64)
    direction = p_b - p_a
    denom = s_a - s_b
    t = s_a / denom
    pos = p_a + t * direction
    d_sa = direction * (-s_b / denom ** 2)
    d_sb = direction * (s_a / denom ** 2)
    return pos, d_sa, d_sb


def marching_tets(grid: TetGrid, field: SdfField):
    """Extract the zero surface of the field.

    Returns (TriMesh, VertexProvenance). Faces are emitted tet by tet in grid
    order; quads split into a fan anchored at the corner whose global edge id
    is smallest, which makes the triangulation independent of enumeration
    order. The result is empty when the field has uniform sign.
    """
    values = np.asarray(field.values, dtype=np.float64)
    if values.shape != (grid.n_vertices,):
        raise ValueError(
            f"field has {values.shape} values for {grid.n_vertices} vertices")
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains non-finite values")

    positions = field.positions(grid)
    neg = values < 0.0
    ea, eb = grid.edges[:, 0], grid.edges[:, 1]
    crossing = neg[ea] != neg[eb]
    xedges = np.nonzero(crossing)[0]

    if len(xedges) == 0:
        empty = np.zeros(0, dtype=np.float64)
        prov = VertexProvenance(
            np.zeros(0, np.int32), np.zeros(0, np.int32), empty, empty, empty)
        return TriMesh.empty(), prov

    va = ea[xedges]
    vb = eb[xedges]
    s_a = values[va]
    s_b = values[vb]
    t = s_a / (s_a - s_b)
    verts = positions[va] + t[:, None] * (positions[vb] - positions[va])

    mesh_vid = np.full(len(grid.edges), -1, dtype=np.int64)
    mesh_vid[xedges] = np.arange(len(xedges))

    nm = neg[grid.tets]
    code = (nm[:, 0].astype(np.uint8)
            | (nm[:, 1].astype(np.uint8) << 1)
            | (nm[:, 2].astype(np.uint8) << 2)
            | (nm[:, 3].astype(np.uint8) << 3))
    active = np.nonzero((code != 0) & (code != 15))[0]
    acodes = code[active]

    face_chunks: list[np.ndarray] = []
    tid_chunks: list[np.ndarray] = []
    for c in np.unique(acodes):
        sel = active[acodes == c]
        te = grid.tet_edges[sel]
        if int(c) in _TRI_TABLE:
            slots = list(_TRI_TABLE[int(c)])
            face_chunks.append(mesh_vid[te[:, slots]])
            tid_chunks.append(sel)
        else:
            slots = list(_QUAD_TABLE[int(c)])
            ge = te[:, slots]                       # (m, 4) global edge ids
            anchor = np.argmin(ge, axis=1)
            rot = (anchor[:, None] + np.arange(4)) % 4
            q = np.take_along_axis(mesh_vid[ge], rot, axis=1)
            fan = np.stack([q[:, [0, 1, 2]], q[:, [0, 2, 3]]], axis=1)
            face_chunks.append(fan.reshape(-1, 3))
            tid_chunks.append(np.repeat(sel, 2))

    faces = np.concatenate(face_chunks, axis=0)
    tids = np.concatenate(tid_chunks)
    order = np.argsort(tids, kind="stable")
    mesh = TriMesh(vertices=verts, faces=faces[order].astype(np.int32))
    prov = VertexProvenance(
        edge_a=va.astype(np.int32), edge_b=vb.astype(np.int32),
        s_a=s_a, s_b=s_b, t=t)
    return mesh, prov
