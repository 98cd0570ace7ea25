"""Triangle meshes: OBJ input/output, canonical normalization, watertightness."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CANONICAL_HALF = 0.5


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh. Arrays are float64 ``(V, 3)`` and int64 ``(F, 3)``."""

    vertices: np.ndarray
    triangles: np.ndarray
    face_normals: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        n = _face_normals(v, t)
        n.setflags(write=False)
        object.__setattr__(self, "face_normals", n)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def corners(self) -> np.ndarray:
        """Triangle corner positions, shape ``(F, 3, 3)``."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[:, ::-1])

    def transformed(self, rotation=None, translation=None, scale=1.0) -> "TriangleMesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriangleMesh(v, self.triangles)

    @staticmethod
    def empty() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def _face_normals(v, t):
    if len(t) == 0:
        return np.zeros((0, 3))
    c = v[t]
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    # degenerate triangles keep a zero normal
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def merge(meshes) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += m.n_vertices
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def load_obj(path) -> TriangleMesh:
    """Read ``v``/``f`` records; polygons are fan-triangulated, other records ignored."""
    path = Path(path)
    verts, tris = [], []
    face_lines = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise MeshError(f"{path}:{lineno}: malformed vertex record") from None
                if len(verts[-1]) != 3:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: face needs at least 3 vertices")
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise MeshError(f"{path}:{lineno}: malformed face record") from None
                face_lines.append((lineno, idx, len(verts)))
    nv = len(verts)
    for lineno, idx, seen in face_lines:
        # negative indices are relative to the vertices defined so far
        resolved = [i - 1 if i > 0 else seen + i for i in idx]
        for i in resolved:
            if i < 0 or i >= nv:
                raise MeshError(f"{path}:{lineno}: face index out of range ({nv} vertices)")
        for k in range(1, len(resolved) - 1):
            tris.append((resolved[0], resolved[k], resolved[k + 1]))
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(tris, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write vertices, one ``vn`` per face, and ``f v//vn`` records."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.face_normals]
    for k, (a, b, c) in enumerate(mesh.triangles + 1):
        n = k + 1
        lines.append(f"f {a}//{n} {b}//{n} {c}//{n}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Similarity:
    """Maps canonical coordinates back to the original frame: ``p = scale * q + translation``."""

    scale: float
    translation: np.ndarray

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation

    def inverse_apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.translation) / self.scale

    def to_dict(self):
        return {"scale": float(self.scale), "translation": [float(x) for x in self.translation]}

    @staticmethod
    def from_dict(d):
        return Similarity(float(d["scale"]), np.asarray(d["translation"], dtype=np.float64))


def normalize_to_canonical(mesh: TriangleMesh, margin: float = 0.0):
    """Center the bounding box at the origin and scale its longest side to ``1 - 2*margin``."""
    if not 0.0 <= margin < CANONICAL_HALF:
        raise MeshError("margin must lie in [0, 0.5)")
    if mesh.n_vertices == 0:
        raise MeshError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise MeshError("degenerate bounding box (zero extent)")
    center = 0.5 * (lo + hi)
    scale = extent / (1.0 - 2.0 * margin)
    xf = Similarity(scale, center)
    out = TriangleMesh(xf.inverse_apply(mesh.vertices), mesh.triangles)
    return out, xf


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------

def is_watertight(mesh: TriangleMesh) -> bool:
    """True iff each directed edge appears once and its reverse appears exactly once."""
    if mesh.n_triangles == 0:
        return False
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    if np.any(edges[:, 0] == edges[:, 1]):
        return False
    n = max(mesh.n_vertices, 1)
    fwd = edges[:, 0] * n + edges[:, 1]
    rev = edges[:, 1] * n + edges[:, 0]
    uniq, counts = np.unique(fwd, return_counts=True)
    if np.any(counts != 1):
        return False
    rev_sorted = np.sort(rev)
    return bool(np.array_equal(uniq, rev_sorted))
