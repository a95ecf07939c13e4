"""BVH-accelerated ray/triangle intersection kernels.

Median-split BVH over triangle centroids, built and traversed in compiled
kernels.  The intersection test is Moller-Trumbore with inclusive epsilon
bounds on the barycentrics so rays crossing shared edges register on at
least one of the adjacent triangles.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

_LEAF_SIZE = 8
_EPS_PARALLEL = 1e-14
_EPS_BARY = 1e-9


@njit(cache=True)
def _build(tri_lo, tri_hi, centroids):
    n = centroids.shape[0]
    cap = 2 * n + 2
    node_lo = np.empty((cap, 3))
    node_hi = np.empty((cap, 3))
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    start = np.full(cap, -1, np.int32)
    count = np.zeros(cap, np.int32)
    perm = np.arange(n)

    n_nodes = 1
    stack = np.empty((64 + 2 * int(np.log2(n + 1)), 3), np.int64)
    stack[0] = (0, 0, n)
    top = 1
    while top > 0:
        top -= 1
        node, lo, hi = stack[top]
        lo_b = np.full(3, np.inf)
        hi_b = np.full(3, -np.inf)
        for i in range(lo, hi):
            t = perm[i]
            for a in range(3):
                lo_b[a] = min(lo_b[a], tri_lo[t, a])
                hi_b[a] = max(hi_b[a], tri_hi[t, a])
        node_lo[node] = lo_b
        node_hi[node] = hi_b
        if hi - lo <= _LEAF_SIZE:
            start[node] = lo
            count[node] = hi - lo
            continue
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for i in range(lo, hi):
            t = perm[i]
            for a in range(3):
                clo[a] = min(clo[a], centroids[t, a])
                chi[a] = max(chi[a], centroids[t, a])
        axis = 0
        best = chi[0] - clo[0]
        for a in range(1, 3):
            ext = chi[a] - clo[a]
            if ext > best:
                best = ext
                axis = a
        if best <= 0.0:
            start[node] = lo
            count[node] = hi - lo
            continue
        vals = np.empty(hi - lo)
        for i in range(lo, hi):
            vals[i - lo] = centroids[perm[i], axis]
        order = np.argsort(vals, kind="mergesort")
        tmp = perm[lo:hi].copy()
        for i in range(hi - lo):
            perm[lo + i] = tmp[order[i]]
        mid = lo + (hi - lo) // 2
        lc, rc = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        stack[top] = (lc, lo, mid)
        stack[top + 1] = (rc, mid, hi)
        top += 2
    return node_lo[:n_nodes], node_hi[:n_nodes], left[:n_nodes], right[:n_nodes], \
        start[:n_nodes], count[:n_nodes], perm


@njit(cache=True, inline="always")
def _slab_hit(lo, hi, o, d, t_best):
    tnear = 0.0
    tfar = t_best
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return False
        else:
            inv = 1.0 / d[a]
            t1 = (lo[a] - o[a]) * inv
            t2 = (hi[a] - o[a]) * inv
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tnear:
                tnear = t1
            if t2 < tfar:
                tfar = t2
            if tnear > tfar:
                return False
    return True


@njit(cache=True, parallel=True)
def _cast(node_lo, node_hi, left, right, start, count, perm,
          v0, e1, e2, origins, dirs, t_out, id_out):
    n_rays = origins.shape[0]
    for r in prange(n_rays):
        o = origins[r]
        d = dirs[r]
        t_best = np.inf
        best = -1
        stack = np.empty(128, np.int32)
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if not _slab_hit(node_lo[node], node_hi[node], o, d, t_best):
                continue
            if count[node] > 0:
                for i in range(start[node], start[node] + count[node]):
                    t = perm[i]
                    px = d[1] * e2[t, 2] - d[2] * e2[t, 1]
                    py = d[2] * e2[t, 0] - d[0] * e2[t, 2]
                    pz = d[0] * e2[t, 1] - d[1] * e2[t, 0]
                    det = e1[t, 0] * px + e1[t, 1] * py + e1[t, 2] * pz
                    if -_EPS_PARALLEL < det < _EPS_PARALLEL:
                        continue
                    inv_det = 1.0 / det
                    tx = o[0] - v0[t, 0]
                    ty = o[1] - v0[t, 1]
                    tz = o[2] - v0[t, 2]
                    u = (tx * px + ty * py + tz * pz) * inv_det
                    if u < -_EPS_BARY or u > 1.0 + _EPS_BARY:
                        continue
                    qx = ty * e1[t, 2] - tz * e1[t, 1]
                    qy = tz * e1[t, 0] - tx * e1[t, 2]
                    qz = tx * e1[t, 1] - ty * e1[t, 0]
                    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv_det
                    if v < -_EPS_BARY or u + v > 1.0 + _EPS_BARY:
                        continue
                    t_hit = (e2[t, 0] * qx + e2[t, 1] * qy + e2[t, 2] * qz) * inv_det
                    if 1e-9 < t_hit < t_best:
                        t_best = t_hit
                        best = t
            else:
                stack[top] = left[node]
                stack[top + 1] = right[node]
                top += 2
        t_out[r] = t_best if best >= 0 else 0.0
        id_out[r] = best


class TriangleBvh:
    """Bounding-volume hierarchy over a triangle soup."""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        verts = np.ascontiguousarray(vertices, dtype=np.float64)
        tris = np.asarray(triangles, dtype=np.int64)
        corners = verts[tris]                     # (T, 3, 3)
        self._v0 = np.ascontiguousarray(corners[:, 0])
        self._e1 = np.ascontiguousarray(corners[:, 1] - corners[:, 0])
        self._e2 = np.ascontiguousarray(corners[:, 2] - corners[:, 0])
        tri_lo = corners.min(axis=1)
        tri_hi = corners.max(axis=1)
        centroids = corners.mean(axis=1)
        self._nodes = _build(tri_lo, tri_hi, centroids)

    def cast(self, origins: np.ndarray, dirs: np.ndarray):
        """First-hit distances along ``dirs`` (unnormalized) and triangle ids.

        Returns (t, tri): t = 0 and tri = -1 on miss; the hit point is
        origin + t * dir.
        """
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        n = origins.shape[0]
        t_out = np.empty(n)
        id_out = np.empty(n, np.int64)
        _cast(*self._nodes, self._v0, self._e1, self._e2, origins, dirs, t_out, id_out)
        return t_out, id_out
