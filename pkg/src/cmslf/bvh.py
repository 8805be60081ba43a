"""Bounding volume hierarchy over triangles with a compiled traversal kernel."""

from __future__ import annotations

from dataclasses import dataclass
import os

import numba
import numpy as np

# prefer OpenMP: an outdated TBB is probed first otherwise and warns
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

LEAF_SIZE = 4
HIT_EPS = 1e-9


@dataclass(frozen=True)
class BVH:
    node_min: np.ndarray    # (N, 3)
    node_max: np.ndarray    # (N, 3)
    left: np.ndarray        # (N,) child index, -1 for leaves
    right: np.ndarray
    start: np.ndarray       # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray       # triangle indices, leaf-contiguous
    v0: np.ndarray          # (F, 3) triangle corners
    e1: np.ndarray
    e2: np.ndarray


def build_bvh(vertices: np.ndarray, faces: np.ndarray) -> BVH:
    """Median split on the longest centroid axis."""
    tri = vertices[faces]
    lo_t, hi_t = tri.min(axis=1), tri.max(axis=1)
    cent = tri.mean(axis=1)
    order = np.arange(len(faces))
    nodes = []   # [min, max, left, right, start, count]
    stack = [(0, len(faces), -1, 0)]
    while stack:
        s, e, parent, side = stack.pop()
        idx = order[s:e]
        node = [lo_t[idx].min(axis=0), hi_t[idx].max(axis=0), -1, -1, s, e - s]
        me = len(nodes)
        nodes.append(node)
        if parent >= 0:
            nodes[parent][2 + side] = me
        if e - s <= LEAF_SIZE:
            continue
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = idx[np.argsort(c[:, axis], kind="stable")]
        order[s:e] = srt
        mid = (s + e) // 2
        node[4], node[5] = 0, 0
        stack.append((mid, e, me, 1))
        stack.append((s, mid, me, 0))
    return BVH(
        node_min=np.array([n[0] for n in nodes]),
        node_max=np.array([n[1] for n in nodes]),
        left=np.array([n[2] for n in nodes], dtype=np.int64),
        right=np.array([n[3] for n in nodes], dtype=np.int64),
        start=np.array([n[4] for n in nodes], dtype=np.int64),
        count=np.array([n[5] for n in nodes], dtype=np.int64),
        order=order.astype(np.int64),
        v0=np.ascontiguousarray(tri[:, 0]),
        e1=np.ascontiguousarray(tri[:, 1] - tri[:, 0]),
        e2=np.ascontiguousarray(tri[:, 2] - tri[:, 0]),
    )


@numba.njit(cache=True, inline="always")
def _tri_hit(ox, oy, oz, dx, dy, dz, v0, e1, e2, f):
    # Moller-Trumbore; returns (t, b1, b2) with t = inf on miss
    px = dy * e2[f, 2] - dz * e2[f, 1]
    py = dz * e2[f, 0] - dx * e2[f, 2]
    pz = dx * e2[f, 1] - dy * e2[f, 0]
    det = e1[f, 0] * px + e1[f, 1] * py + e1[f, 2] * pz
    if abs(det) < 1e-14:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tx = ox - v0[f, 0]
    ty = oy - v0[f, 1]
    tz = oz - v0[f, 2]
    b1 = (tx * px + ty * py + tz * pz) * inv
    if b1 < 0.0 or b1 > 1.0:
        return np.inf, 0.0, 0.0
    qx = ty * e1[f, 2] - tz * e1[f, 1]
    qy = tz * e1[f, 0] - tx * e1[f, 2]
    qz = tx * e1[f, 1] - ty * e1[f, 0]
    b2 = (dx * qx + dy * qy + dz * qz) * inv
    if b2 < 0.0 or b1 + b2 > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2[f, 0] * qx + e2[f, 1] * qy + e2[f, 2] * qz) * inv
    if t <= HIT_EPS:
        return np.inf, 0.0, 0.0
    return t, b1, b2


@numba.njit(cache=True, parallel=True)
def _traverse(origins, dirs, node_min, node_max, left, right, start, count, order,
              v0, e1, e2, t_out, f_out, b_out):
    R = origins.shape[0]
    for r in numba.prange(R):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else 1e300
        iy = 1.0 / dy if dy != 0.0 else 1e300
        iz = 1.0 / dz if dz != 0.0 else 1e300
        best = np.inf
        bf = -1
        bb1 = 0.0
        bb2 = 0.0
        stack = np.empty(128, dtype=np.int64)
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            nd = stack[sp]
            t0x = (node_min[nd, 0] - ox) * ix
            t1x = (node_max[nd, 0] - ox) * ix
            t0y = (node_min[nd, 1] - oy) * iy
            t1y = (node_max[nd, 1] - oy) * iy
            t0z = (node_min[nd, 2] - oz) * iz
            t1z = (node_max[nd, 2] - oz) * iz
            tn = max(min(t0x, t1x), min(t0y, t1y), min(t0z, t1z))
            tf = min(max(t0x, t1x), max(t0y, t1y), max(t0z, t1z))
            if tf < max(tn, 0.0) or tn > best:
                continue
            if left[nd] < 0:
                for k in range(start[nd], start[nd] + count[nd]):
                    f = order[k]
                    t, b1, b2 = _tri_hit(ox, oy, oz, dx, dy, dz, v0, e1, e2, f)
                    if t < best:
                        best = t
                        bf = f
                        bb1 = b1
                        bb2 = b2
            else:
                stack[sp] = left[nd]
                sp += 1
                stack[sp] = right[nd]
                sp += 1
        t_out[r] = best
        f_out[r] = bf
        b_out[r, 0] = bb1
        b_out[r, 1] = bb2


def intersect_bvh(bvh: BVH, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray: ``(t, face, barycentrics)``; ``t = inf`` on miss."""
    origins = np.ascontiguousarray(origins, dtype=float)
    dirs = np.ascontiguousarray(dirs, dtype=float)
    R = origins.shape[0]
    t = np.empty(R)
    f = np.empty(R, dtype=np.int64)
    b = np.empty((R, 2))
    _traverse(origins, dirs, bvh.node_min, bvh.node_max, bvh.left, bvh.right,
              bvh.start, bvh.count, bvh.order, bvh.v0, bvh.e1, bvh.e2, t, f, b)
    return t, f, b


def intersect_brute(triangles: np.ndarray, origins: np.ndarray, dirs: np.ndarray):
    """Exhaustive reference: tests every ray against every triangle."""
    v0 = triangles[:, 0][None]
    e1 = (triangles[:, 1] - triangles[:, 0])[None]
    e2 = (triangles[:, 2] - triangles[:, 0])[None]
    d = dirs[:, None, :]
    p = np.cross(d, e2)
    det = np.einsum("rfk,rfk->rf", e1 * np.ones_like(p), p)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tv = origins[:, None, :] - v0
        b1 = np.einsum("rfk,rfk->rf", tv, p) * inv
        q = np.cross(tv, e1)
        b2 = np.einsum("rfk,rfk->rf", d * np.ones_like(q), q) * inv
        t = np.einsum("rfk,rfk->rf", e2 * np.ones_like(q), q) * inv
    ok = (np.abs(det) >= 1e-14) & (b1 >= 0) & (b1 <= 1) & (b2 >= 0) & (b1 + b2 <= 1) & (t > HIT_EPS)
    t = np.where(ok, t, np.inf)
    f = np.argmin(t, axis=1)
    tt = t[np.arange(len(t)), f]
    f = np.where(np.isfinite(tt), f, -1)
    return tt, f
