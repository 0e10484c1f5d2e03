"""Median-split AABB tree over triangles with numba traversal kernels.

Every query has a brute-force twin (``*_brute``) that runs the same
per-triangle primitive over all faces; the tree only prunes, so results are
bit-identical.
"""
from __future__ import annotations

import numpy as np
from numba import njit

LEAF_SIZE = 8
RAY_EPS = 1e-12


@njit(cache=True)
def point_triangle_dist2(p, a, b, c):
    """Squared distance from ``p`` to triangle ``abc`` (Ericson, RTCD 5.1.5)."""
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        qx, qy, qz = a[0], a[1], a[2]
    else:
        bpx, bpy, bpz = p[0] - b[0], p[1] - b[1], p[2] - b[2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            qx, qy, qz = b[0], b[1], b[2]
        else:
            vc = d1 * d4 - d3 * d2
            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                v = d1 / (d1 - d3)
                qx, qy, qz = a[0] + v * abx, a[1] + v * aby, a[2] + v * abz
            else:
                cpx, cpy, cpz = p[0] - c[0], p[1] - c[1], p[2] - c[2]
                d5 = abx * cpx + aby * cpy + abz * cpz
                d6 = acx * cpx + acy * cpy + acz * cpz
                if d6 >= 0.0 and d5 <= d6:
                    qx, qy, qz = c[0], c[1], c[2]
                else:
                    vb = d5 * d2 - d1 * d6
                    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                        w = d2 / (d2 - d6)
                        qx, qy, qz = a[0] + w * acx, a[1] + w * acy, a[2] + w * acz
                    else:
                        va = d3 * d6 - d5 * d4
                        if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                            qx = b[0] + w * (c[0] - b[0])
                            qy = b[1] + w * (c[1] - b[1])
                            qz = b[2] + w * (c[2] - b[2])
                        else:
                            denom = 1.0 / (va + vb + vc)
                            v = vb * denom
                            w = vc * denom
                            qx = a[0] + abx * v + acx * w
                            qy = a[1] + aby * v + acy * w
                            qz = a[2] + abz * v + acz * w
    dx, dy, dz = p[0] - qx, p[1] - qy, p[2] - qz
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def ray_triangle(o, d, a, b, c):
    """Moller-Trumbore; returns the hit distance or ``inf``."""
    e1x, e1y, e1z = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    e2x, e2y, e2z = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < RAY_EPS:
        return np.inf
    inv = 1.0 / det
    tx, ty, tz = o[0] - a[0], o[1] - a[1], o[2] - a[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t < 0.0:
        return np.inf
    return t


@njit(cache=True)
def _box_dist2(p, lo, hi):
    s = 0.0
    for i in range(3):
        if p[i] < lo[i]:
            s += (lo[i] - p[i]) ** 2
        elif p[i] > hi[i]:
            s += (p[i] - hi[i]) ** 2
    return s


@njit(cache=True)
def _ray_box(o, inv_d, lo, hi, tmax):
    t0 = 0.0
    t1 = tmax
    for i in range(3):
        ta = (lo[i] - o[i]) * inv_d[i]
        tb = (hi[i] - o[i]) * inv_d[i]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@njit(cache=True)
def _closest_one(p, tris, lo, hi, left, right, start, count, order):
    best = np.inf
    best_f = -1
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if _box_dist2(p, lo[n], hi[n]) > best:
            continue
        if left[n] < 0:
            for j in range(start[n], start[n] + count[n]):
                f = order[j]
                d2 = point_triangle_dist2(p, tris[f, 0], tris[f, 1], tris[f, 2])
                if d2 < best or (d2 == best and f < best_f):
                    best = d2
                    best_f = f
        else:
            stack[sp] = left[n]
            sp += 1
            stack[sp] = right[n]
            sp += 1
    return best, best_f


@njit(cache=True)
def closest_batch(points, tris, lo, hi, left, right, start, count, order):
    n = points.shape[0]
    d2 = np.empty(n)
    face = np.empty(n, dtype=np.int64)
    for i in range(n):
        d2[i], face[i] = _closest_one(points[i], tris, lo, hi, left, right, start, count, order)
    return d2, face


@njit(cache=True)
def closest_brute(points, tris):
    n = points.shape[0]
    d2 = np.empty(n)
    face = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        best_f = -1
        for f in range(tris.shape[0]):
            v = point_triangle_dist2(points[i], tris[f, 0], tris[f, 1], tris[f, 2])
            if v < best:
                best = v
                best_f = f
        d2[i] = best
        face[i] = best_f
    return d2, face


@njit(cache=True)
def _ray_one(o, d, tmax, tris, lo, hi, left, right, start, count, order):
    inv_d = np.empty(3)
    for i in range(3):
        inv_d[i] = 1.0 / d[i] if d[i] != 0.0 else np.inf
    best = tmax
    best_f = -1
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if not _ray_box(o, inv_d, lo[n], hi[n], best):
            continue
        if left[n] < 0:
            for j in range(start[n], start[n] + count[n]):
                f = order[j]
                t = ray_triangle(o, d, tris[f, 0], tris[f, 1], tris[f, 2])
                if t < best or (t == best and t < np.inf and (best_f < 0 or f < best_f)):
                    best = t
                    best_f = f
        else:
            stack[sp] = left[n]
            sp += 1
            stack[sp] = right[n]
            sp += 1
    return best, best_f


@njit(cache=True)
def ray_batch(origins, dirs, tmax, tris, lo, hi, left, right, start, count, order):
    n = origins.shape[0]
    t = np.empty(n)
    face = np.empty(n, dtype=np.int64)
    for i in range(n):
        t[i], face[i] = _ray_one(origins[i], dirs[i], tmax[i], tris, lo, hi, left, right, start, count, order)
    return t, face


@njit(cache=True)
def ray_brute(origins, dirs, tmax, tris):
    n = origins.shape[0]
    t = np.empty(n)
    face = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = tmax[i]
        best_f = -1
        for f in range(tris.shape[0]):
            v = ray_triangle(origins[i], dirs[i], tris[f, 0], tris[f, 1], tris[f, 2])
            if v < best or (v == best and v < np.inf and best_f < 0):
                best = v
                best_f = f
        t[i] = best
        face[i] = best_f
    return t, face


@njit(cache=True)
def count_hits_batch(origins, dirs, tris, lo, hi, left, right, start, count, order):
    n = origins.shape[0]
    out = np.zeros(n, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    inv_d = np.empty(3)
    for i in range(n):
        o = origins[i]
        d = dirs[i]
        for k in range(3):
            inv_d[k] = 1.0 / d[k] if d[k] != 0.0 else np.inf
        sp = 0
        stack[sp] = 0
        sp += 1
        c = 0
        while sp > 0:
            sp -= 1
            nd = stack[sp]
            if not _ray_box(o, inv_d, lo[nd], hi[nd], np.inf):
                continue
            if left[nd] < 0:
                for j in range(start[nd], start[nd] + count[nd]):
                    f = order[j]
                    if ray_triangle(o, d, tris[f, 0], tris[f, 1], tris[f, 2]) < np.inf:
                        c += 1
            else:
                stack[sp] = left[nd]
                sp += 1
                stack[sp] = right[nd]
                sp += 1
        out[i] = c
    return out


@njit(cache=True)
def count_hits_brute(origins, dirs, tris):
    n = origins.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        c = 0
        for f in range(tris.shape[0]):
            if ray_triangle(origins[i], dirs[i], tris[f, 0], tris[f, 1], tris[f, 2]) < np.inf:
                c += 1
        out[i] = c
    return out


@njit(cache=True)
def boxes_overlapping(qlo, qhi, lo, hi, left, right, start, count, order):
    """Faces whose leaf boxes overlap the query box (candidate set, unordered)."""
    out = np.empty(order.shape[0], dtype=np.int64)
    m = 0
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        hit = True
        for i in range(3):
            if qhi[i] < lo[n, i] or qlo[i] > hi[n, i]:
                hit = False
                break
        if not hit:
            continue
        if left[n] < 0:
            for j in range(start[n], start[n] + count[n]):
                out[m] = order[j]
                m += 1
        else:
            stack[sp] = left[n]
            sp += 1
            stack[sp] = right[n]
            sp += 1
    return out[:m]


class BVH:
    """Flattened median-split tree; node 0 is the root."""

    def __init__(self, tris: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.tris = np.ascontiguousarray(tris, dtype=np.float64)
        n_f = len(self.tris)
        cent = self.tris.mean(axis=1)
        tmin = self.tris.min(axis=1)
        tmax = self.tris.max(axis=1)
        order = np.arange(n_f)
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node():
            for lst, v in ((lo, None), (hi, None), (left, -1), (right, -1), (start, 0), (count, 0)):
                lst.append(v)
            return len(left) - 1

        root = new_node()
        work = [(root, 0, n_f)]
        while work:
            node, s, e = work.pop()
            idx = order[s:e]
            lo[node] = tmin[idx].min(axis=0)
            hi[node] = tmax[idx].max(axis=0)
            if e - s <= leaf_size:
                start[node], count[node] = s, e - s
                continue
            c = cent[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            # stable sort keeps the build deterministic under ties
            order[s:e] = idx[np.argsort(c[:, axis], kind="stable")]
            mid = s + (e - s) // 2
            l_node, r_node = new_node(), new_node()
            left[node], right[node] = l_node, r_node
            work.append((r_node, mid, e))
            work.append((l_node, s, mid))

        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)
        self.order = order.astype(np.int64)

    def _tree(self):
        return (self.lo, self.hi, self.left, self.right, self.start, self.count, self.order)

    def closest(self, points: np.ndarray):
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        return closest_batch(pts, self.tris, *self._tree())

    def raycast(self, origins, dirs, tmax=None):
        o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        d = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
        tm = np.full(len(o), np.inf) if tmax is None else np.broadcast_to(np.asarray(tmax, dtype=np.float64), (len(o),)).copy()
        return ray_batch(o, d, tm, self.tris, *self._tree())

    def count_hits(self, origins, dirs):
        o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        d = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
        return count_hits_batch(o, d, self.tris, *self._tree())

    def candidates(self, qlo, qhi) -> np.ndarray:
        return boxes_overlapping(
            np.asarray(qlo, dtype=np.float64), np.asarray(qhi, dtype=np.float64), *self._tree()
        )
