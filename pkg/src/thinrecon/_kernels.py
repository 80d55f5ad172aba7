"""Numba kernels for the rasterizers and mesh distance queries.

Determinism contract: every parallel loop writes to disjoint output slots
(triangle-major or point-major), and nothing here reduces across threads, so
results are bit-identical for any thread count. Reductions over pairs happen
outside via np.bincount, which accumulates in fixed input order. fastmath is
deliberately off.
"""

import math

import numpy as np
from numba import njit, prange


@njit(inline="always")
def _softplus(z):
    # max(z, 0) + log1p(exp(-|z|)) is stable over the whole real line
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


@njit(inline="always")
def _seg_d2(ax, ay, bx, by, pu, pv):
    """Squared distance from (pu, pv) to segment AB and the clamped parameter."""
    ex = bx - ax
    ey = by - ay
    qx = pu - ax
    qy = pv - ay
    ee = ex * ex + ey * ey
    t = 0.0
    if ee > 0.0:
        t = (qx * ex + qy * ey) / ee
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    dx = qx - t * ex
    dy = qy - t * ey
    return dx * dx + dy * dy, t


@njit(inline="always")
def _tri_closest(ax, ay, bx, by, cx, cy, pu, pv):
    """Closest boundary feature of a 2D triangle.

    Returns (d2, seg, t, inside): squared distance to the boundary, the index
    of the winning segment (0: AB, 1: BC, 2: CA, ties to the lowest index),
    its clamped parameter, and whether the point lies inside (a degenerate
    triangle counts as outside).
    """
    best, bt = _seg_d2(ax, ay, bx, by, pu, pv)
    bk = 0
    d2, t = _seg_d2(bx, by, cx, cy, pu, pv)
    if d2 < best:
        best, bk, bt = d2, 1, t
    d2, t = _seg_d2(cx, cy, ax, ay, pu, pv)
    if d2 < best:
        best, bk, bt = d2, 2, t

    area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    inside = False
    if area2 != 0.0:
        s = 1.0 if area2 > 0.0 else -1.0
        w0 = ((bx - ax) * (pv - ay) - (by - ay) * (pu - ax)) * s
        w1 = ((cx - bx) * (pv - by) - (cy - by) * (pu - bx)) * s
        w2 = ((ax - cx) * (pv - cy) - (ay - cy) * (pu - cx)) * s
        inside = w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0
    return best, bk, bt, inside


@njit(cache=True)
def fill_pairs(px0, px1, py0, py1, starts, pair_pix, res):
    """Enumerate candidate (triangle, pixel) pairs, triangle-major, row-major."""
    for f in prange(len(px0)):
        k = starts[f]
        for py in range(py0[f], py1[f] + 1):
            base = py * res
            for px in range(px0[f], px1[f] + 1):
                pair_pix[k] = base + px
                k += 1


@njit(cache=True)
def pairs_forward(tri_uv, starts, pair_pix, res, gamma, z_out, nl_out):
    """Per-pair logit z = sign * d^2 / gamma and its softplus (-log(1 - D))."""
    inv_g = 1.0 / gamma
    for f in prange(len(starts) - 1):
        ax = tri_uv[f, 0, 0]
        ay = tri_uv[f, 0, 1]
        bx = tri_uv[f, 1, 0]
        by = tri_uv[f, 1, 1]
        cx = tri_uv[f, 2, 0]
        cy = tri_uv[f, 2, 1]
        for i in range(starts[f], starts[f + 1]):
            pix = pair_pix[i]
            pu = (pix % res) + 0.5
            pv = (pix // res) + 0.5
            d2, _, _, inside = _tri_closest(ax, ay, bx, by, cx, cy, pu, pv)
            z = d2 * inv_g if inside else -d2 * inv_g
            z_out[i] = z
            nl_out[i] = _softplus(z)


@njit(cache=True)
def pairs_backward(tri_uv, starts, pair_pix, z, nl, snl, dlds, res, gamma,
                   tri_grad):
    """Gradient of the loss w.r.t. projected triangle vertices, (F, 3, 2).

    Uses the leave-one-out trick: the product of (1 - D_k) over all other
    pairs covering a pixel is exp(nl_j - snl[pix]), clamped to 1.
    """
    for f in prange(len(starts) - 1):
        ax = tri_uv[f, 0, 0]
        ay = tri_uv[f, 0, 1]
        bx = tri_uv[f, 1, 0]
        by = tri_uv[f, 1, 1]
        cx = tri_uv[f, 2, 0]
        cy = tri_uv[f, 2, 1]
        gau = 0.0
        gav = 0.0
        gbu = 0.0
        gbv = 0.0
        gcu = 0.0
        gcv = 0.0
        for i in range(starts[f], starts[f + 1]):
            pix = pair_pix[i]
            up = dlds[pix]
            if up == 0.0:
                continue
            e = math.exp(-abs(z[i]))
            ddz = e / ((1.0 + e) * (1.0 + e))
            if ddz == 0.0:
                continue
            llo = math.exp(nl[i] - snl[pix])
            if llo > 1.0:
                llo = 1.0
            pu = (pix % res) + 0.5
            pv = (pix // res) + 0.5
            d2, seg, t, inside = _tri_closest(ax, ay, bx, by, cx, cy, pu, pv)
            delta = 1.0 if inside else -1.0
            coef = up * llo * ddz * delta / gamma      # dL / d(d^2)
            if seg == 0:
                qx = ax + t * (bx - ax)
                qy = ay + t * (by - ay)
            elif seg == 1:
                qx = bx + t * (cx - bx)
                qy = by + t * (cy - by)
            else:
                qx = cx + t * (ax - cx)
                qy = cy + t * (ay - cy)
            eu = pu - qx
            ev = pv - qy
            ga = -2.0 * (1.0 - t) * coef
            gb = -2.0 * t * coef
            if seg == 0:
                gau += ga * eu
                gav += ga * ev
                gbu += gb * eu
                gbv += gb * ev
            elif seg == 1:
                gbu += ga * eu
                gbv += ga * ev
                gcu += gb * eu
                gcv += gb * ev
            else:
                gcu += ga * eu
                gcv += ga * ev
                gau += gb * eu
                gav += gb * ev
        tri_grad[f, 0, 0] = gau
        tri_grad[f, 0, 1] = gav
        tri_grad[f, 1, 0] = gbu
        tri_grad[f, 1, 1] = gbv
        tri_grad[f, 2, 0] = gcu
        tri_grad[f, 2, 1] = gcv


@njit(cache=True)
def hard_raster(tri_uv, res, out):
    """Binary coverage with the top-left fill rule; out is a flat uint8 image."""
    for f in range(tri_uv.shape[0]):
        ax = tri_uv[f, 0, 0]
        ay = tri_uv[f, 0, 1]
        bx = tri_uv[f, 1, 0]
        by = tri_uv[f, 1, 1]
        cx = tri_uv[f, 2, 0]
        cy = tri_uv[f, 2, 1]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area2 == 0.0:
            continue
        s = 1.0 if area2 > 0.0 else -1.0
        # sign-normalized edge vectors: interior has positive edge functions
        e0x = (bx - ax) * s
        e0y = (by - ay) * s
        e1x = (cx - bx) * s
        e1y = (cy - by) * s
        e2x = (ax - cx) * s
        e2y = (ay - cy) * s
        tl0 = (e0y == 0.0 and e0x > 0.0) or e0y < 0.0
        tl1 = (e1y == 0.0 and e1x > 0.0) or e1y < 0.0
        tl2 = (e2y == 0.0 and e2x > 0.0) or e2y < 0.0
        umin = min(ax, min(bx, cx))
        umax = max(ax, max(bx, cx))
        vmin = min(ay, min(by, cy))
        vmax = max(ay, max(by, cy))
        px0 = max(0, int(math.ceil(umin - 0.5)))
        px1 = min(res - 1, int(math.floor(umax - 0.5)))
        py0 = max(0, int(math.ceil(vmin - 0.5)))
        py1 = min(res - 1, int(math.floor(vmax - 0.5)))
        for py in range(py0, py1 + 1):
            pv = py + 0.5
            base = py * res
            for px in range(px0, px1 + 1):
                pu = px + 0.5
                w0 = e0x * (pv - ay) - e0y * (pu - ax)
                if w0 < 0.0 or (w0 == 0.0 and not tl0):
                    continue
                w1 = e1x * (pv - by) - e1y * (pu - bx)
                if w1 < 0.0 or (w1 == 0.0 and not tl1):
                    continue
                w2 = e2x * (pv - cy) - e2y * (pu - cx)
                if w2 < 0.0 or (w2 == 0.0 and not tl2):
                    continue
                out[base + px] = 255


@njit(inline="always")
def _seg_d2_3d(px, py, pz, ax, ay, az, bx, by, bz):
    ex = bx - ax
    ey = by - ay
    ez = bz - az
    qx = px - ax
    qy = py - ay
    qz = pz - az
    ee = ex * ex + ey * ey + ez * ez
    t = 0.0
    if ee > 0.0:
        t = (qx * ex + qy * ey + qz * ez) / ee
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    dx = qx - t * ex
    dy = qy - t * ey
    dz = qz - t * ez
    return dx * dx + dy * dy + dz * dz


@njit(inline="always")
def _pt_tri_d2(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Squared distance from a 3D point to a triangle (closest-point regions)."""
    abx = bx - ax
    aby = by - ay
    abz = bz - az
    acx = cx - ax
    acy = cy - ay
    acz = cz - az
    apx = px - ax
    apy = py - ay
    apz = pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx = px - bx
    bpy = py - by
    bpz = pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    cpx = px - cx
    cpy = py - cy
    cpz = pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0 and d1 != d3:
        t = d1 / (d1 - d3)
        dx = apx - t * abx
        dy = apy - t * aby
        dz = apz - t * abz
        return dx * dx + dy * dy + dz * dz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0 and d2 != d6:
        t = d2 / (d2 - d6)
        dx = apx - t * acx
        dy = apy - t * acy
        dz = apz - t * acz
        return dx * dx + dy * dy + dz * dz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        denom = (d4 - d3) + (d5 - d6)
        if denom > 0.0:
            t = (d4 - d3) / denom
            dx = bpx - t * (cx - bx)
            dy = bpy - t * (cy - by)
            dz = bpz - t * (cz - bz)
            return dx * dx + dy * dy + dz * dz
    s = va + vb + vc
    if s <= 0.0:
        # degenerate triangle: fall back to its edges
        e0 = _seg_d2_3d(px, py, pz, ax, ay, az, bx, by, bz)
        e1 = _seg_d2_3d(px, py, pz, bx, by, bz, cx, cy, cz)
        e2 = _seg_d2_3d(px, py, pz, cx, cy, cz, ax, ay, az)
        return min(e0, min(e1, e2))
    inv = 1.0 / s
    v = vb * inv
    w = vc * inv
    qx = ax + abx * v + acx * w
    qy = ay + aby * v + acy * w
    qz = az + abz * v + acz * w
    dx = px - qx
    dy = py - qy
    dz = pz - qz
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def min_dist_to_tris(points, tv, out):
    """Per-point distance to the nearest triangle; tv is (F, 3, 3)."""
    npts = points.shape[0]
    nf = tv.shape[0]
    for i in prange(npts):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        best = np.inf
        for f in range(nf):
            d2 = _pt_tri_d2(
                px, py, pz,
                tv[f, 0, 0], tv[f, 0, 1], tv[f, 0, 2],
                tv[f, 1, 0], tv[f, 1, 1], tv[f, 1, 2],
                tv[f, 2, 0], tv[f, 2, 1], tv[f, 2, 2])
            if d2 < best:
                best = d2
        out[i] = math.sqrt(best)


def warmup():
    """Compile every kernel on tiny inputs (cache-backed, so usually fast)."""
    tri = np.array([[[1.0, 1.0], [3.0, 1.0], [1.0, 3.0]]])
    starts = np.array([0, 4], dtype=np.int64)
    pix = np.array([0, 1, 4, 5], dtype=np.int64)
    z = np.empty(4)
    nl = np.empty(4)
    fill_pairs(np.array([0]), np.array([1]), np.array([0]), np.array([1]),
               starts, np.empty(4, dtype=np.int64), 4)
    pairs_forward(tri, starts, pix, 4, 1.0, z, nl)
    snl = np.zeros(16)
    np.add.at(snl, pix, nl)
    tg = np.zeros((1, 3, 2))
    pairs_backward(tri, starts, pix, z, nl, snl, np.ones(16), 4, 1.0, tg)
    hard_raster(tri, 4, np.zeros(16, dtype=np.uint8))
    pts = np.zeros((2, 3))
    tv = np.array([[[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]])
    min_dist_to_tris(pts, tv, np.empty(2))
