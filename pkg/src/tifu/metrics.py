"""Reconstruction metrics: Chamfer, point-to-surface, multi-view normal-map error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .bvh import build_bvh, closest_distance
from .mesh import CANONICAL_HALF, TriangleMesh

DEFAULT_POINTS = 10_000
DEFAULT_MAP_RES = 256
VIEW_YAWS = (0.0, 60.0, 120.0, 180.0, 240.0, 300.0)
COVER_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __len__(self):
        return len(self.points)

    def transformed(self, rotation=None, translation=None) -> "PointCloud":
        p, n = self.points, self.normals
        if rotation is not None:
            r = np.asarray(rotation, dtype=np.float64)
            p = p @ r.T
            n = None if n is None else n @ r.T
        if translation is not None:
            p = p + np.asarray(translation, dtype=np.float64)
        return PointCloud(p, n)


@dataclass(frozen=True, eq=False)
class NormalMap:
    """``normals[row, col]`` in camera space; row 0 is the top of the image. Background is (0,0,0)."""

    normals: np.ndarray
    depth: np.ndarray

    @property
    def width(self) -> int:
        return self.normals.shape[1]

    @property
    def height(self) -> int:
        return self.normals.shape[0]

    @property
    def foreground(self) -> np.ndarray:
        return np.isfinite(self.depth)


def sample_surface(mesh: TriangleMesh, n: int = DEFAULT_POINTS, seed: int = 0) -> PointCloud:
    """Area-weighted triangle choice, uniform barycentric position, face normals attached."""
    if mesh.is_empty():
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    cdf = np.cumsum(areas) / total
    tri = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    c = mesh.corners()[tri]
    pts = ((1 - r1)[:, None] * c[:, 0] + (r1 * (1 - r2))[:, None] * c[:, 1]
           + (r1 * r2)[:, None] * c[:, 2])
    return PointCloud(pts, mesh.face_normals[tri].copy())


def p2s(pred: PointCloud, gt_mesh: TriangleMesh) -> float:
    """Mean exact distance from predicted points to the ground-truth surface."""
    if len(pred) == 0 or gt_mesh.is_empty():
        raise ValueError("p2s needs non-empty inputs")
    return float(closest_distance(build_bvh(gt_mesh), pred.points).mean())


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Half the sum of the two mean nearest-neighbour distances."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs non-empty point clouds")
    d_ab, _ = cKDTree(b.points).query(a.points)
    d_ba, _ = cKDTree(a.points).query(b.points)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


# ---------------------------------------------------------------------------
# normal maps
# ---------------------------------------------------------------------------

def yaw_rotation(yaw_deg: float) -> np.ndarray:
    a = np.deg2rad(yaw_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def render_normal_map(mesh: TriangleMesh, yaw: float = 0.0, res: int = DEFAULT_MAP_RES) -> NormalMap:
    """Orthographic view down -z of the mesh rotated by ``yaw`` about +y.

    The canonical square ``[-0.5, 0.5]^2`` fills the frame; pixel centers are tested
    against every triangle whose bounding box covers them and the nearest (largest z)
    hit wins. Triangles are not culled, so a surface seen from inside shows its
    inward normal.
    """
    normals = np.zeros((res, res, 3))
    depth = np.full((res, res), -np.inf)
    if mesh.is_empty():
        return NormalMap(normals, np.where(np.isfinite(depth), depth, np.nan))
    rot = yaw_rotation(yaw)
    v = mesh.vertices @ rot.T
    fn = mesh.face_normals @ rot.T
    c = v[mesh.triangles]
    # pixel space: column from x, row from -y
    px = (c[..., 0] + CANONICAL_HALF) * res - 0.5
    py = (CANONICAL_HALF - c[..., 1]) * res - 0.5
    area = (px[:, 1] - px[:, 0]) * (py[:, 2] - py[:, 0]) - (px[:, 2] - px[:, 0]) * (py[:, 1] - py[:, 0])
    keep = (area != 0) & (mesh.face_normals.any(axis=1))
    c0 = np.clip(np.ceil(px.min(axis=1)), 0, res).astype(np.int64)
    c1 = np.clip(np.floor(px.max(axis=1)), -1, res - 1).astype(np.int64)
    r0 = np.clip(np.ceil(py.min(axis=1)), 0, res).astype(np.int64)
    r1 = np.clip(np.floor(py.max(axis=1)), -1, res - 1).astype(np.int64)
    w = np.where(keep, np.maximum(c1 - c0 + 1, 0), 0)
    h = np.where(keep, np.maximum(r1 - r0 + 1, 0), 0)
    count = w * h
    tri_all = np.flatnonzero(count)
    best_depth = np.full(res * res, -np.inf)
    best_tri = np.full(res * res, -1, dtype=np.int64)
    # bounded batches of (triangle, pixel) pairs
    budget = 2_000_000
    cum = np.cumsum(count[tri_all])
    start = 0
    while start < len(tri_all):
        base = cum[start - 1] if start else 0
        stop = max(int(np.searchsorted(cum, base + budget, side="right")), start + 1)
        tri = tri_all[start:stop]
        start = stop
        cnt = count[tri]
        rep = np.repeat(np.arange(len(tri)), cnt)
        local = np.arange(rep.size) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        t = tri[rep]
        col = c0[t] + local % w[t]
        row = r0[t] + local // w[t]
        x, y = col.astype(np.float64), row.astype(np.float64)
        ax, ay = px[t, 0], py[t, 0]
        bx, by = px[t, 1], py[t, 1]
        cx, cy = px[t, 2], py[t, 2]
        a_t = area[t]
        l0 = ((bx - x) * (cy - y) - (cx - x) * (by - y)) / a_t
        l1 = ((cx - x) * (ay - y) - (ax - x) * (cy - y)) / a_t
        l2 = 1.0 - l0 - l1
        # a pixel center on an edge shared by two triangles can round to slightly negative
        # coverage in both; the tolerance closes such cracks and the depth test picks one
        inside = (l0 >= -COVER_EPS) & (l1 >= -COVER_EPS) & (l2 >= -COVER_EPS)
        z = l0 * c[t, 0, 2] + l1 * c[t, 1, 2] + l2 * c[t, 2, 2]
        pix = (row * res + col)[inside]
        z, t = z[inside], t[inside]
        # nearest hit per pixel; lowest triangle index on exact depth ties
        order = np.lexsort((t, -z, pix))
        pix, z, t = pix[order], z[order], t[order]
        first = np.ones(pix.size, dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, z, t = pix[first], z[first], t[first]
        better = (z > best_depth[pix]) | ((z == best_depth[pix]) & (t < best_tri[pix]))
        best_depth[pix[better]] = z[better]
        best_tri[pix[better]] = t[better]
    fg = best_tri >= 0
    normals.reshape(-1, 3)[fg] = fn[best_tri[fg]]
    depth = np.where(fg, best_depth, np.nan).reshape(res, res)
    return NormalMap(normals, depth)


NORMAL_REGIONS = ("union", "intersection", "full")


def normal_map_error(pred: NormalMap, gt: NormalMap, region: str = "union") -> float:
    """Mean per-pixel L2 distance over the chosen pixel set (0 when it is empty).

    ``union`` counts pixels covered by either map, so silhouette mismatches cost the
    full distance to the zero background; ``intersection`` ignores them; ``full``
    averages over the whole frame.
    """
    if region == "union":
        sel = pred.foreground | gt.foreground
    elif region == "intersection":
        sel = pred.foreground & gt.foreground
    elif region == "full":
        sel = np.ones(pred.foreground.shape, dtype=bool)
    else:
        raise ValueError(f"unknown region {region!r}; expected one of {NORMAL_REGIONS}")
    if not sel.any():
        return 0.0
    diff = np.linalg.norm(pred.normals - gt.normals, axis=-1)
    return float(diff[sel].mean())


def normal_consistency(pred: TriangleMesh, gt: TriangleMesh, res: int = DEFAULT_MAP_RES,
                       yaws=VIEW_YAWS, return_maps: bool = False, region: str = "union"):
    errors, maps = [], []
    for yaw in yaws:
        mp = render_normal_map(pred, yaw, res)
        mg = render_normal_map(gt, yaw, res)
        errors.append(normal_map_error(mp, mg, region))
        maps.append((mp, mg))
    score = float(np.mean(errors))
    return (score, maps) if return_maps else score


def evaluate(pred: TriangleMesh, gt: TriangleMesh, n_points: int = DEFAULT_POINTS,
             map_res: int = DEFAULT_MAP_RES, seed: int = 0, region: str = "union",
             return_maps: bool = False):
    """The three-metric report; both meshes are sampled with the same seed."""
    pc_pred = sample_surface(pred, n_points, seed)
    pc_gt = sample_surface(gt, n_points, seed)
    normal, maps = normal_consistency(pred, gt, map_res, return_maps=True, region=region)
    scores = {"normal": normal, "p2s": p2s(pc_pred, gt), "chamfer": chamfer(pc_pred, pc_gt)}
    return (scores, maps) if return_maps else scores


def sphere_point_cloud(radius: float, n: int, seed: int = 0, center=(0.0, 0.0, 0.0)) -> PointCloud:
    """Uniform samples of an exact sphere (normalized Gaussian directions)."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return PointCloud(d * radius + np.asarray(center, dtype=np.float64), d)
