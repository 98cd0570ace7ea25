"""Bounding volume hierarchy over a triangle mesh and batched ray / distance queries.

Queries are evaluated a whole batch at a time: the traversal keeps a frontier of
``(query, node)`` pairs, prunes it with a vectorized box test and expands it one
level per iteration, so no per-ray Python loop is involved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh

LEAF_SIZE = 4
DEDUP_EPS = 1e-9
JITTER = 1e-7
MAX_JITTER_TRIES = 4
_CHUNK = 8192
# fixed, deliberately non-axis-aligned direction for the containment oracle
INSIDE_DIRECTION = np.array([1.0, 0.7548776662466927, 0.5698402909980532])
INSIDE_DIRECTION = INSIDE_DIRECTION / np.linalg.norm(INSIDE_DIRECTION)


@dataclass(frozen=True)
class RayHit:
    t: float
    triangle_id: int
    front_facing: bool


@dataclass(frozen=True)
class HitList:
    """Hits for a batch of rays in CSR layout: hits of ray ``r`` are ``offsets[r]:offsets[r+1]``."""

    offsets: np.ndarray
    t: np.ndarray
    triangle: np.ndarray
    front: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def ray(self, r: int) -> list[RayHit]:
        s, e = self.offsets[r], self.offsets[r + 1]
        return [RayHit(float(t), int(k), bool(f))
                for t, k, f in zip(self.t[s:e], self.triangle[s:e], self.front[s:e])]

    def first_last(self):
        """``(t_first, t_last)`` per ray; NaN where a ray has no hit."""
        n = len(self.offsets) - 1
        first = np.full(n, np.nan)
        last = np.full(n, np.nan)
        has = self.counts > 0
        first[has] = self.t[self.offsets[:-1][has]]
        last[has] = self.t[self.offsets[1:][has] - 1]
        return first, last


@dataclass(frozen=True, eq=False)
class Bvh:
    mesh: TriangleMesh
    box_min: np.ndarray
    box_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def is_leaf(self, node) -> np.ndarray:
        return self.left[node] < 0

    def leaf_triangles(self, node: int) -> np.ndarray:
        return self.order[self.start[node]:self.start[node] + self.count[node]]


def build_bvh(mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Median split on the longest box axis until leaves hold at most ``leaf_size`` triangles."""
    if mesh.is_empty():
        raise ValueError("cannot build a BVH over an empty mesh")
    corners = mesh.corners()
    tmin = corners.min(axis=1)
    tmax = corners.max(axis=1)
    cent = corners.mean(axis=1)
    nf = mesh.n_triangles
    order = np.arange(nf)
    cap = 2 * nf
    box_min = np.empty((cap, 3))
    box_max = np.empty((cap, 3))
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    n_nodes = 1
    start[0], count[0] = 0, nf
    stack = [0]
    while stack:
        node = stack.pop()
        s, c = start[node], count[node]
        idx = order[s:s + c]
        lo, hi = tmin[idx].min(axis=0), tmax[idx].max(axis=0)
        box_min[node], box_max[node] = lo, hi
        if c <= leaf_size:
            continue
        axis = int(np.argmax(hi - lo))
        half = c // 2
        part = np.argpartition(cent[idx, axis], half - 1, kind="introselect")
        order[s:s + c] = idx[part]
        l, r = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = l, r
        start[l], count[l] = s, half
        start[r], count[r] = s + half, c - half
        stack += [r, l]
    sl = slice(0, n_nodes)
    return Bvh(mesh, box_min[sl].copy(), box_max[sl].copy(), left[sl].copy(), right[sl].copy(),
               start[sl].copy(), count[sl].copy(), order)


def _traverse(bvh: Bvh, n_queries: int, box_test):
    """Candidate ``(query, triangle)`` pairs whose leaf boxes pass ``box_test(q, node)``."""
    q = np.arange(n_queries)
    node = np.zeros(n_queries, dtype=np.int64)
    out_q, out_t = [], []
    while q.size:
        keep = box_test(q, node)
        q, node = q[keep], node[keep]
        leaf = bvh.left[node] < 0
        lq, ln = q[leaf], node[leaf]
        if lq.size:
            cnt = bvh.count[ln]
            rep = np.repeat(np.arange(lq.size), cnt)
            offs = np.arange(rep.size) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            out_q.append(lq[rep])
            out_t.append(bvh.order[bvh.start[ln][rep] + offs])
        iq, inode = q[~leaf], node[~leaf]
        q = np.concatenate([iq, iq])
        node = np.concatenate([bvh.left[inode], bvh.right[inode]])
    if not out_q:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(out_q), np.concatenate(out_t)


def _slab_test(bvh: Bvh, origins, directions, tmin, tmax):
    pad = 1e-9 * max(1.0, float(np.abs(bvh.box_max[0]).max()), float(np.abs(bvh.box_min[0]).max()))

    def test(q, node):
        o = origins[q]
        d = directions[q]
        lo = bvh.box_min[node] - pad
        hi = bvh.box_max[node] + pad
        zero = d == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        inside = (o >= lo) & (o <= hi)
        near = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        far = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        tn = np.maximum(near.max(axis=1), tmin[q])
        tf = np.minimum(far.min(axis=1), tmax[q])
        return tn <= tf

    return test


def _watertight_intersect(origins, directions, tri, normals):
    """Watertight ray/triangle test on paired rows; returns ``(hit, t, front)``."""
    d = directions
    rows = np.arange(len(d))
    kz = np.argmax(np.abs(d), axis=1)
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    neg = d[rows, kz] < 0.0
    kx, ky = np.where(neg, ky, kx), np.where(neg, kx, ky)
    dz = d[rows, kz]
    sx = d[rows, kx] / dz
    sy = d[rows, ky] / dz
    sz = 1.0 / dz
    rel = tri - origins[:, None, :]
    ax, ay, az = (rel[rows, :, kx].T, rel[rows, :, ky].T, rel[rows, :, kz].T)
    px = ax - sx * az
    py = ay - sy * az
    (Ax, Bx, Cx), (Ay, By, Cy) = px, py
    U = Cx * By - Cy * Bx
    V = Ax * Cy - Ay * Cx
    W = Bx * Ay - By * Ax
    miss = ((U < 0) | (V < 0) | (W < 0)) & ((U > 0) | (V > 0) | (W > 0))
    det = U + V + W
    miss |= det == 0.0
    T = sz * (U * az[0] + V * az[1] + W * az[2])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = T / det
    front = np.einsum("ij,ij->i", d, normals) < 0.0
    return ~miss, t, front


def _dedup_sorted(ray, t, tri, front):
    """Collapse hits of the same ray closer than ``DEDUP_EPS``; a front-facing hit wins ties."""
    if ray.size == 0:
        return ray, t, tri, front
    new_group = np.ones(ray.size, dtype=bool)
    new_group[1:] = (ray[1:] != ray[:-1]) | (t[1:] - t[:-1] >= DEDUP_EPS)
    gid = np.cumsum(new_group) - 1
    ng = gid[-1] + 1
    any_front = np.zeros(ng, dtype=bool)
    np.logical_or.at(any_front, gid, front)
    # representative: first front-facing hit of the group if any, else the first hit
    score = np.where(front, 0, 1)
    rep_order = np.lexsort((np.arange(ray.size), score, gid))
    first_of_group = np.ones(rep_order.size, dtype=bool)
    first_of_group[1:] = gid[rep_order][1:] != gid[rep_order][:-1]
    rep = rep_order[first_of_group]
    return ray[rep], t[rep], tri[rep], any_front


def cast_rays(bvh: Bvh, origins, directions, tmin=0.0, tmax=np.inf) -> HitList:
    """All hits with ``tmin <= t <= tmax`` for a batch of rays, sorted and deduplicated."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    directions = np.broadcast_to(directions, origins.shape)
    n = len(origins)
    tmin_a = np.broadcast_to(np.asarray(tmin, dtype=np.float64), (n,))
    tmax_a = np.broadcast_to(np.asarray(tmax, dtype=np.float64), (n,))
    corners = bvh.mesh.corners()
    normals = bvh.mesh.face_normals
    parts = []
    for s in range(0, n, _CHUNK):
        e = min(n, s + _CHUNK)
        o, d = origins[s:e], directions[s:e]
        test = _slab_test(bvh, o, d, tmin_a[s:e], tmax_a[s:e])
        q, k = _traverse(bvh, e - s, test)
        if q.size == 0:
            continue
        hit, t, front = _watertight_intersect(o[q], d[q], corners[k], normals[k])
        hit &= (t >= tmin_a[s:e][q]) & (t <= tmax_a[s:e][q])
        parts.append((q[hit] + s, t[hit], k[hit], front[hit]))
    if parts:
        ray = np.concatenate([p[0] for p in parts])
        t = np.concatenate([p[1] for p in parts])
        tri = np.concatenate([p[2] for p in parts])
        front = np.concatenate([p[3] for p in parts])
        srt = np.lexsort((tri, t, ray))
        ray, t, tri, front = _dedup_sorted(ray[srt], t[srt], tri[srt], front[srt])
    else:
        ray = np.zeros(0, dtype=np.int64)
        t = np.zeros(0)
        tri = np.zeros(0, dtype=np.int64)
        front = np.zeros(0, dtype=bool)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, ray + 1, 1)
    offsets = np.cumsum(offsets)
    return HitList(offsets, t, tri, front)


def ray_intersections(bvh: Bvh, origin, direction) -> list[RayHit]:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("direction must have unit length")
    return cast_rays(bvh, np.asarray(origin, dtype=np.float64)[None], d[None]).ray(0)


def _perpendiculars(d):
    """Two unit vectors orthogonal to each row of ``d``."""
    a = np.where(np.abs(d[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    u = np.cross(d, a)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = np.cross(d, u)
    return u, w


def cast_lines(bvh: Bvh, origins, directions, warn=True) -> HitList:
    """Hits along rays whose origins lie outside the mesh, with the odd-parity jitter policy.

    A watertight mesh is crossed an even number of times; rays that report an odd
    count grazed an edge or vertex and are re-cast with the origin nudged by
    ``JITTER`` along both perpendicular directions. ``t`` stays measured along the
    unjittered ray (the nudge is perpendicular to it).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.ascontiguousarray(
        np.broadcast_to(np.atleast_2d(np.asarray(directions, dtype=np.float64)), origins.shape))
    hits = cast_rays(bvh, origins, directions)
    odd = np.flatnonzero(hits.counts % 2 == 1)
    tries = 0
    while odd.size and tries < MAX_JITTER_TRIES:
        tries += 1
        u, w = _perpendiculars(directions[odd])
        sign_u = 1.0 if tries % 2 else -1.0
        nudged = origins[odd] + tries * JITTER * (sign_u * u + w)
        redo = cast_rays(bvh, nudged, directions[odd])
        fixed = redo.counts % 2 == 0
        if fixed.any():
            hits = _replace_rows(hits, odd[fixed], redo, np.flatnonzero(fixed))
        odd = odd[~fixed]
    if odd.size and warn:
        warnings.warn(f"{odd.size} rays kept an odd crossing count; mesh is probably not watertight",
                      RuntimeWarning, stacklevel=2)
    return hits


def _replace_rows(hits: HitList, rows, other: HitList, other_rows) -> HitList:
    counts = hits.counts.copy()
    counts[rows] = other.counts[other_rows]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    n = len(counts)
    src_is_other = np.zeros(n, dtype=bool)
    src_is_other[rows] = True
    other_of = np.full(n, -1)
    other_of[rows] = other_rows
    t = np.empty(offsets[-1])
    tri = np.empty(offsets[-1], dtype=np.int64)
    front = np.empty(offsets[-1], dtype=bool)
    keep = ~src_is_other
    # rows from the original list
    src_idx = _gather_index(hits.offsets, np.flatnonzero(keep))
    dst_idx = _gather_index(offsets, np.flatnonzero(keep))
    t[dst_idx], tri[dst_idx], front[dst_idx] = hits.t[src_idx], hits.triangle[src_idx], hits.front[src_idx]
    src_idx = _gather_index(other.offsets, other_of[rows])
    dst_idx = _gather_index(offsets, rows)
    t[dst_idx], tri[dst_idx], front[dst_idx] = other.t[src_idx], other.triangle[src_idx], other.front[src_idx]
    return HitList(offsets, t, tri, front)


def _gather_index(offsets, rows):
    rows = np.asarray(rows, dtype=np.int64)
    starts = offsets[rows]
    cnt = offsets[rows + 1] - starts
    rep = np.repeat(np.arange(rows.size), cnt)
    return starts[rep] + np.arange(rep.size) - np.repeat(np.cumsum(cnt) - cnt, cnt)


def _outside_distance(bvh: Bvh, points):
    """A ray length that puts ``point - L * d`` outside the root box for every point."""
    lo, hi = bvh.box_min[0], bvh.box_max[0]
    center = 0.5 * (lo + hi)
    radius = 0.5 * np.linalg.norm(hi - lo)
    return np.linalg.norm(points - center, axis=1) + radius + 1.0


def point_inside(bvh: Bvh, points, direction=INSIDE_DIRECTION):
    """Containment by crossing parity along a fixed ray direction.

    Accepts a single point (returns ``bool``) or an ``(n, 3)`` array.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d = np.broadcast_to(np.asarray(direction, dtype=np.float64), pts.shape)
    length = _outside_distance(bvh, pts)
    hits = cast_lines(bvh, pts - length[:, None] * d, d, warn=False)
    ray = np.repeat(np.arange(len(pts)), hits.counts)
    before = hits.t < length[ray]
    crossings = np.bincount(ray[before], minlength=len(pts))
    inside = crossings % 2 == 1
    return bool(inside[0]) if single else inside


def brute_force_intersections(mesh: TriangleMesh, origin, direction, tmin=0.0) -> np.ndarray:
    """Sorted hit distances against every triangle (Moller-Trumbore), no acceleration."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    c = mesh.corners()
    e1 = c[:, 1] - c[:, 0]
    e2 = c[:, 2] - c[:, 0]
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - c[:, 0]
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ d) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= tmin)
    t = np.sort(t[hit])
    if t.size:
        keep = np.ones(t.size, dtype=bool)
        keep[1:] = np.diff(t) >= DEDUP_EPS
        t = t[keep]
    return t


# ---------------------------------------------------------------------------
# closest-point distance
# ---------------------------------------------------------------------------

def point_triangle_distance(points, tri):
    """Exact Euclidean distance between paired rows of points ``(n,3)`` and triangles ``(n,3,3)``."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n = np.cross(b - a, c - a)
    nn = np.einsum("ij,ij->i", n, n)
    ap = points - a
    ok = nn > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.einsum("ij,ij->i", ap, n) / nn
    proj = points - s[:, None] * n
    # barycentric sign test against each edge
    e0 = np.einsum("ij,ij->i", np.cross(b - a, proj - a), n)
    e1 = np.einsum("ij,ij->i", np.cross(c - b, proj - b), n)
    e2 = np.einsum("ij,ij->i", np.cross(a - c, proj - c), n)
    interior = ok & (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
    d_plane = np.where(ok, np.abs(s) * np.sqrt(nn), np.inf)
    d_edges = np.minimum(np.minimum(_segment_distance(points, a, b), _segment_distance(points, b, c)),
                         _segment_distance(points, c, a))
    return np.where(interior, d_plane, d_edges)


def _segment_distance(p, a, b):
    ab = b - a
    den = np.einsum("ij,ij->i", ab, ab)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(den > 0, np.einsum("ij,ij->i", p - a, ab) / den, 0.0)
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def closest_distance(bvh: Bvh, points) -> np.ndarray:
    """Exact unsigned distance from each point to the mesh surface."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    corners = bvh.mesh.corners()
    tree = cKDTree(corners.mean(axis=1))
    out = np.empty(len(pts))
    for s in range(0, len(pts), _CHUNK):
        p = pts[s:s + _CHUNK]
        _, near = tree.query(p)
        bound = point_triangle_distance(p, corners[near])
        lim = bound * (1.0 + 1e-12) + 1e-15

        def test(q, node, p=p, lim=lim):
            gap = np.maximum(bvh.box_min[node] - p[q], 0.0) + np.maximum(p[q] - bvh.box_max[node], 0.0)
            return np.einsum("ij,ij->i", gap, gap) <= lim[q] ** 2

        q, k = _traverse(bvh, len(p), test)
        best = bound.copy()
        if q.size:
            np.minimum.at(best, q, point_triangle_distance(p[q], corners[k]))
        out[s:s + len(p)] = best
    return out
