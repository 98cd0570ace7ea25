"""Bundled analytic test shapes: sphere, box, dumbbell."""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh

SPHERE_RADIUS = 0.4
BOX_HALF_EXTENTS = (0.31, 0.23, 0.17)
DUMBBELL_NECK = 0.05


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(v) * radius + np.asarray(center, dtype=np.float64),
                        np.array(faces, dtype=np.int64))


def cell_union_mesh(xs, ys, zs, occupied) -> TriangleMesh:
    """Boundary surface of a union of cells on a rectilinear lattice.

    ``xs``, ``ys``, ``zs`` are breakpoints; ``occupied[i, j, k]`` marks the cell
    between ``xs[i]..xs[i+1]`` etc. Faces on the shared lattice meet edge to edge,
    so the result is watertight as long as no two cells touch along an edge only.
    """
    coords = [np.asarray(c, dtype=np.float64) for c in (xs, ys, zs)]
    occ = np.pad(np.asarray(occupied, dtype=bool), 1)
    shape = tuple(len(c) for c in coords)
    vid = np.arange(np.prod(shape)).reshape(shape)
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    tris = []
    for axis in range(3):
        u, w = (axis + 1) % 3, (axis + 2) % 3
        lo = np.take(occ, np.arange(occ.shape[axis] - 1), axis=axis)
        hi = np.take(occ, np.arange(1, occ.shape[axis]), axis=axis)
        # cell c (padded index) and its +axis neighbor
        for outward, sel in ((1, lo & ~hi), (-1, ~lo & hi)):
            for cell in np.argwhere(sel):
                # lower lattice corner of the shared face
                i = cell - 1
                i[axis] = cell[axis]
                corners = []
                for du, dw in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    p = i.copy()
                    p[u] += du
                    p[w] += dw
                    corners.append(vid[tuple(p)])
                a, b, c, d = corners
                # u x w points along +axis
                quad = [(a, b, c), (a, c, d)] if outward > 0 else [(a, c, b), (a, d, c)]
                tris += quad
    mesh = TriangleMesh(verts, np.array(tris, dtype=np.int64))
    used = np.unique(mesh.triangles)
    remap = np.full(len(verts), -1)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[mesh.triangles])


def box(half_extents=BOX_HALF_EXTENTS, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    h = np.asarray(half_extents, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    return cell_union_mesh([c[0] - h[0], c[0] + h[0]], [c[1] - h[1], c[1] + h[1]],
                           [c[2] - h[2], c[2] + h[2]], np.ones((1, 1, 1), dtype=bool))


def sphere(radius=SPHERE_RADIUS, subdivisions=4) -> TriangleMesh:
    return icosphere(radius, subdivisions)


def dumbbell(neck=DUMBBELL_NECK) -> TriangleMesh:
    """Two square bells joined by a thin square neck of side ``neck`` along x."""
    b, n = 0.125, neck / 2.0
    xs = [-0.45, -0.2, 0.2, 0.45]
    yz = [-b, -n, n, b]
    occ = np.zeros((3, 3, 3), dtype=bool)
    occ[0] = True
    occ[2] = True
    occ[1, 1, 1] = True
    return cell_union_mesh(xs, yz, yz, occ)


FIXTURES = {"sphere": sphere, "box": box, "dumbbell": dumbbell}


def fixture(name: str) -> TriangleMesh:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None
