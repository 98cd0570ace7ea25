"""Dense occupancy volumes: vector resampling, stacking, aggregation, iso-surfacing, I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure

from .mesh import CANONICAL_HALF, TriangleMesh
from .occupancy import Axis, grid_coords, parse_axis

DEFAULT_ISO = 0.5
VOLUME_FORMAT = "tifu-volume"
VOLUME_VERSION = 1


class VolumeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DenseVolume:
    """Occupancy probabilities on the ``i/r`` lattice of the canonical cube, indexed ``[x, y, z]``."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise VolumeError("volume data must be 3-dimensional")
        if d.size and (np.isnan(d).any() or d.min() < 0.0 or d.max() > 1.0):
            raise VolumeError("volume values must lie in [0, 1]")
        object.__setattr__(self, "data", d)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def coords(self, axis) -> np.ndarray:
        return grid_coords(self.resolution[parse_axis(axis)])

    def centers(self) -> np.ndarray:
        """Canonical coordinates of every voxel, shape ``(rx, ry, rz, 3)``."""
        gx, gy, gz = np.meshgrid(*(self.coords(a) for a in Axis), indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def occupied_fraction(self, iso: float = DEFAULT_ISO) -> float:
        return float((self.data > iso).mean())

    def __eq__(self, other):
        if not isinstance(other, DenseVolume):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class AggregationWeights:
    alpha: float = 1.0 / 7.0
    beta: float = 2.0 / 7.0
    gamma: float = 4.0 / 7.0

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0:
            raise ValueError("aggregation weights must be non-negative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"aggregation weights must sum to 1, got {sum(w)!r}")

    def as_tuple(self):
        return (self.alpha, self.beta, self.gamma)


# ---------------------------------------------------------------------------
# resampling and stacking
# ---------------------------------------------------------------------------

def resize_vectors(v, m: int) -> np.ndarray:
    """Piecewise-linear resample along the last axis with both endpoints kept.

    Samples are treated as evenly spaced; ``m == 1`` keeps the last sample, which
    is the ray end point in the ``i/N`` grid convention.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    if n < 1 or m < 1:
        raise ValueError("need a non-empty vector and m >= 1")
    if m == n:
        return v.copy()
    if m == 1:
        return v[..., -1:].copy()
    if n == 1:
        return np.repeat(v, m, axis=-1)
    pos = np.linspace(0.0, n - 1, m)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    f = pos - i0
    a = v[..., i0]
    b = v[..., i0 + 1]
    # this form is exact at f = 0 and f = 1, so both endpoints survive bit-for-bit
    out = (1.0 - f) * a + f * b
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def resize_vector(v, m: int) -> np.ndarray:
    return resize_vectors(np.asarray(v, dtype=np.float64).reshape(-1), m)


def _face_indices(coords, res):
    idx = np.rint((coords + CANONICAL_HALF) * res - 1).astype(np.int64)
    ok = (idx >= 0) & (idx < res)
    ok[ok] &= np.abs(grid_coords(res)[idx[ok]] - coords[ok]) < 1e-6
    return idx, ok


def stack_arrays(anchors, vectors, axis, face_res, depth_res: int) -> DenseVolume:
    """Lay each anchor's vector along ``axis`` after resizing it to ``depth_res``."""
    axis = parse_axis(axis)
    a, b = (face_res, face_res) if np.isscalar(face_res) else face_res
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    vectors = resize_vectors(np.asarray(vectors, dtype=np.float64).reshape(len(anchors), -1), depth_res)
    u, w = axis.others
    iu, oku = _face_indices(anchors[:, u], a)
    iw, okw = _face_indices(anchors[:, w], b)
    if not (oku & okw).all():
        bad = np.flatnonzero(~(oku & okw))[:5]
        raise VolumeError(f"anchors off the {a}x{b} face grid, e.g. {anchors[bad].tolist()}")
    filled = np.zeros((a, b), dtype=bool)
    face = np.zeros((a, b, depth_res))
    face[iu, iw] = vectors
    filled[iu, iw] = True
    if not filled.all():
        gaps = np.argwhere(~filled)
        shown = ", ".join(f"({i},{j})" for i, j in gaps[:8])
        more = f" and {len(gaps) - 8} more" if len(gaps) > 8 else ""
        raise VolumeError(f"missing anchors at face cells {shown}{more}")
    # face is (u, w, axis); move the depth axis into place
    return DenseVolume(np.moveaxis(face, 2, int(axis)))


def stack_vectors(samples, axis, face_res, depth_res: int) -> DenseVolume:
    """``samples`` is a sequence of ``(anchor, vector)`` pairs covering the face grid."""
    samples = list(samples)
    if not samples:
        raise VolumeError("no samples to stack")
    anchors = np.array([s[0] for s in samples], dtype=np.float64)
    lengths = {len(s[1]) for s in samples}
    if len(lengths) != 1:
        raise VolumeError("vectors of mixed length; resize before stacking")
    vectors = np.array([np.asarray(s[1], dtype=np.float64) for s in samples])
    return stack_arrays(anchors, vectors, axis, face_res, depth_res)


def aggregate(vx: DenseVolume, vy: DenseVolume, vz: DenseVolume,
              w: AggregationWeights = AggregationWeights()) -> DenseVolume:
    if not (vx.resolution == vy.resolution == vz.resolution):
        raise VolumeError(f"resolution mismatch: {vx.resolution}, {vy.resolution}, {vz.resolution}")
    data = w.alpha * vx.data + w.beta * vy.data + w.gamma * vz.data
    return DenseVolume(np.clip(data, 0.0, 1.0))


def resample_volume(v: DenseVolume, res) -> DenseVolume:
    """Linear resize of every axis with the same endpoint-preserving rule as vectors."""
    target = (res, res, res) if np.isscalar(res) else tuple(res)
    d = v.data
    for ax in range(3):
        d = np.moveaxis(resize_vectors(np.moveaxis(d, ax, -1), target[ax]), -1, ax)
    return DenseVolume(d)


# ---------------------------------------------------------------------------
# iso-surface
# ---------------------------------------------------------------------------

def marching_cubes(v: DenseVolume, iso: float = DEFAULT_ISO, pad_value: float = 0.0) -> TriangleMesh:
    """Iso-surface in canonical coordinates, oriented from the ``> iso`` side outward.

    The volume is padded with ``pad_value`` so shapes touching the cube still close;
    a volume without an ``iso`` crossing gives an empty mesh.
    """
    if not 0.0 < iso < 1.0:
        raise ValueError("iso must lie in (0, 1)")
    padded = np.pad(v.data, 1, constant_values=pad_value)
    if not (padded.min() < iso < padded.max()):
        return TriangleMesh.empty()
    spacing = tuple(1.0 / r for r in v.resolution)
    verts, faces, _, _ = measure.marching_cubes(padded, level=iso, spacing=spacing,
                                                method="lorensen", gradient_direction="ascent")
    # padded index p sits at -0.5 + p / r
    return TriangleMesh(verts.astype(np.float64) - CANONICAL_HALF, faces.astype(np.int64))


# ---------------------------------------------------------------------------
# .vol I/O
# ---------------------------------------------------------------------------

def _paths(path):
    path = Path(path)
    if path.suffix != ".vol":
        path = path.with_name(path.name + ".vol")
    return path, path.with_name(path.name + ".json")


def write_volume(v: DenseVolume, path, iso: float = DEFAULT_ISO) -> Path:
    """Raw little-endian float32 payload (x fastest) plus a ``.vol.json`` header."""
    payload, header = _paths(path)
    rx, ry, rz = v.resolution
    meta = {
        "format": VOLUME_FORMAT,
        "version": VOLUME_VERSION,
        "resolution": [rx, ry, rz],
        "dtype": "<f4",
        "order": "x-fastest",
        "bounds": [[-CANONICAL_HALF] * 3, [CANONICAL_HALF] * 3],
        "voxel_center": "-0.5 + (i + 1) / r",
        "iso": iso,
        "inside": "value > iso",
    }
    payload.write_bytes(np.asarray(v.data, dtype="<f4").tobytes(order="F"))
    header.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return payload


def read_volume(path) -> DenseVolume:
    payload, header = _paths(path)
    meta = json.loads(header.read_text(encoding="utf-8"))
    if meta.get("format") != VOLUME_FORMAT or meta.get("version") != VOLUME_VERSION:
        raise VolumeError(f"{header}: unsupported volume header")
    rx, ry, rz = (int(r) for r in meta["resolution"])
    raw = payload.read_bytes()
    expected = rx * ry * rz * 4
    if len(raw) != expected:
        raise VolumeError(f"{payload}: payload has {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape((rx, ry, rz), order="F")
    return DenseVolume(data.astype(np.float64))


def axis_volumes_from_mesh(mesh: TriangleMesh, res: int, bvh=None):
    """Ground-truth volumes per axis: face-grid vectors with ``N = res`` stacked directly."""
    from .bvh import build_bvh
    from .occupancy import face_anchors, occupancy_vectors

    bvh = bvh if bvh is not None else build_bvh(mesh)
    vols = []
    for axis in Axis:
        anchors = face_anchors(axis, res)
        occ = occupancy_vectors(bvh, anchors, axis, res)
        vols.append(stack_arrays(anchors, occ.astype(np.float64), axis, res, res))
    return vols


def volume_from_gt(mesh: TriangleMesh, res: int, weights: AggregationWeights = AggregationWeights(),
                   bvh=None) -> DenseVolume:
    return aggregate(*axis_volumes_from_mesh(mesh, res, bvh), weights)
