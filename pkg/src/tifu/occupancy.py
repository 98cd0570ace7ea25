"""Ground-truth occupancy vectors along axis-aligned rays through the canonical cube."""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .bvh import Bvh, build_bvh, cast_lines
from .mesh import CANONICAL_HALF, TriangleMesh, is_watertight

DEFAULT_DELTA = 0.05
MAGIC = b"TIFV"
VERSION = 1
_HEADER = struct.Struct("<4sIIIdQ")
HEADER_SIZE = _HEADER.size
# rays start this far outside the cube so a mesh touching the faces is still entered
_RAY_LEAD = 1.0
_CHUNK = 256


class Axis(IntEnum):
    X = 0
    Y = 1
    Z = 2

    @property
    def others(self) -> tuple[int, int]:
        """The two orthogonal axes in increasing order (row-major face layout)."""
        return tuple(a for a in range(3) if a != self)

    def unit(self) -> np.ndarray:
        d = np.zeros(3)
        d[self] = 1.0
        return d


def parse_axis(a) -> Axis:
    if isinstance(a, str):
        return Axis("XYZ".index(a.upper()))
    return Axis(int(a))


class DatasetFormatError(ValueError):
    pass


def grid_coords(n: int) -> np.ndarray:
    """Coordinates of the ``i/n`` grid points (i = 1..n) along a cube-spanning ray."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(1, n + 1, dtype=np.float64)
    return -CANONICAL_HALF + (i / n) * (2 * CANONICAL_HALF)


def ray_bounds(x, axis):
    axis = parse_axis(axis)
    start = np.array(x, dtype=np.float64)
    end = start.copy()
    start[axis] = -CANONICAL_HALF
    end[axis] = CANONICAL_HALF
    return start, end


def ray_grid_points(x, axis, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    start, end = ray_bounds(x, axis)
    i = np.arange(1, n + 1, dtype=np.float64)[:, None]
    return start + (i / n) * (end - start)


@dataclass(eq=False)
class OccupancyVector:
    axis: Axis
    anchor: np.ndarray
    occ: np.ndarray
    min_span: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.occ)

    def points(self) -> np.ndarray:
        return ray_grid_points(self.anchor, self.axis, self.n)

    def __eq__(self, other):
        if not isinstance(other, OccupancyVector):
            return NotImplemented
        spans = (self.min_span is None and other.min_span is None) or (
            self.min_span is not None and other.min_span is not None
            and np.array_equal(self.min_span, other.min_span))
        return (self.axis == other.axis and np.array_equal(self.anchor, other.anchor)
                and np.array_equal(self.occ, other.occ) and bool(spans))


@dataclass(eq=False)
class VectorDataset:
    mesh_id: str
    samples: list
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.meta["n"])

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, VectorDataset):
            return NotImplemented
        keys = ("n", "delta", "seed")
        return (all(self.meta.get(k) == other.meta.get(k) for k in keys)
                and len(self.samples) == len(other.samples)
                and all(a == b for a, b in zip(self.samples, other.samples)))

    def by_axis(self, axis) -> "VectorDataset":
        axis = parse_axis(axis)
        return VectorDataset(self.mesh_id, [s for s in self.samples if s.axis == axis], dict(self.meta))

    def arrays(self):
        """``(axes, anchors, occ, min_span)`` stacked over samples."""
        axes = np.array([int(s.axis) for s in self.samples], dtype=np.int64)
        anchors = np.array([s.anchor for s in self.samples], dtype=np.float64).reshape(-1, 3)
        occ = np.array([s.occ for s in self.samples], dtype=bool).reshape(len(self.samples), -1)
        span = np.array([s.min_span if s.min_span is not None else np.full(s.n, np.inf)
                         for s in self.samples], dtype=np.float64).reshape(len(self.samples), -1)
        return axes, anchors, occ, span


# ---------------------------------------------------------------------------
# occupancy and spans
# ---------------------------------------------------------------------------

def _axis_lines(anchors, axis):
    origins = np.array(anchors, dtype=np.float64).reshape(-1, 3)
    origins[:, axis] = -CANONICAL_HALF - _RAY_LEAD
    return origins


def _padded_coords(hits, origins, axis):
    """Hit coordinates along the axis as a ``(rays, max_hits)`` array padded with +inf."""
    counts = hits.counts
    width = max(int(counts.max()) if counts.size else 0, 1)
    out = np.full((len(counts), width), np.inf)
    ray = np.repeat(np.arange(len(counts)), counts)
    col = np.arange(ray.size) - np.repeat(hits.offsets[:-1], counts)
    out[ray, col] = origins[ray, axis] + hits.t
    return out


def occupancy_vectors(bvh: Bvh, anchors, axis, n: int) -> np.ndarray:
    """Occupancy of the ``n`` grid points on each anchor's ray, by interval parity.

    One sorted hit list per ray; a point is inside when an odd number of hits
    precede it along the ray.
    """
    axis = parse_axis(axis)
    origins = _axis_lines(anchors, axis)
    hits = cast_lines(bvh, origins, axis.unit(), warn=False)
    coords = _padded_coords(hits, origins, axis)
    pts = grid_coords(n)
    below = (coords[:, None, :] < pts[None, :, None]).sum(axis=2)
    return below % 2 == 1


def occupancy_vector(bvh: Bvh, x, axis, n: int) -> OccupancyVector:
    axis = parse_axis(axis)
    occ = occupancy_vectors(bvh, np.asarray(x, dtype=np.float64)[None], axis, n)[0]
    return OccupancyVector(axis, np.asarray(x, dtype=np.float64), occ)


def axis_spans(bvh: Bvh, points, axis) -> np.ndarray:
    """First-to-last hit distance of the cube-spanning line through each point (NaN if < 2 hits)."""
    axis = parse_axis(axis)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    key = pts[:, list(axis.others)]
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    anchors = np.zeros((len(uniq), 3))
    anchors[:, list(axis.others)] = uniq
    origins = _axis_lines(anchors, axis)
    hits = cast_lines(bvh, origins, axis.unit(), warn=False)
    first, last = hits.first_last()
    span = np.where(hits.counts >= 2, last - first, np.nan)
    return span[np.asarray(inv).reshape(-1)]


def min_spans(bvh: Bvh, points) -> np.ndarray:
    """Minimum over the three axes of the first-to-last hit distance; +inf when no axis qualifies."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    spans = np.stack([axis_spans(bvh, pts, a) for a in Axis], axis=1)
    spans = np.where(np.isnan(spans), np.inf, spans)
    return spans.min(axis=1)


def min_span(bvh: Bvh, p) -> float:
    return float(min_spans(bvh, np.asarray(p, dtype=np.float64)[None])[0])


def adaptive_mask(vec: OccupancyVector, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Per-element loss weight: 1 outside, ``1 + delta / min_span`` inside."""
    if vec.min_span is None:
        raise ValueError("occupancy vector has no min_span")
    return mask_from_arrays(vec.occ, vec.min_span, delta)


def mask_from_arrays(occ, span, delta: float = DEFAULT_DELTA) -> np.ndarray:
    if delta <= 0:
        raise ValueError("delta must be positive")
    occ = np.asarray(occ, dtype=bool)
    span = np.asarray(span, dtype=np.float64)
    with np.errstate(divide="ignore"):
        boost = np.where(np.isinf(span), 0.0, delta / span)
    return np.where(occ, 1.0 + boost, 1.0)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def face_anchors(axis, face_res: int, mode: str = "face-grid", seed: int = 0) -> np.ndarray:
    """Anchors on the cube face orthogonal to ``axis``, rounded to float32 precision.

    ``face-grid`` places ``face_res x face_res`` anchors on the ``i/face_res`` lattice in
    row-major order over the two remaining axes; ``uniform-random`` draws the same
    number uniformly from a stream seeded by ``(seed, axis)``.
    """
    axis = parse_axis(axis)
    if mode == "face-grid":
        g = grid_coords(face_res)
        u, w = np.meshgrid(g, g, indexing="ij")
        uv = np.stack([u.ravel(), w.ravel()], axis=1)
    elif mode == "uniform-random":
        rng = np.random.default_rng([seed, int(axis)])
        uv = rng.uniform(-CANONICAL_HALF, CANONICAL_HALF, size=(face_res * face_res, 2))
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    anchors = np.zeros((len(uv), 3))
    anchors[:, list(axis.others)] = uv
    anchors[:, axis] = -CANONICAL_HALF
    return anchors.astype(np.float32).astype(np.float64)


def _vectors_for_chunk(bvh, anchors, axis, n):
    occ = occupancy_vectors(bvh, anchors, axis, n)
    pts = np.repeat(anchors, n, axis=0)
    pts[:, axis] = np.tile(grid_coords(n), len(anchors))
    span = min_spans(bvh, pts).reshape(len(anchors), n)
    return occ, span.astype(np.float32)


def generate_dataset(mesh: TriangleMesh, n: int, face_res: int, mode: str = "face-grid",
                     seed: int = 0, delta: float = DEFAULT_DELTA, axes=tuple(Axis),
                     mesh_id: str = "mesh", threads: int = 1, bvh: Bvh | None = None) -> VectorDataset:
    """Occupancy vectors with per-element min spans for anchors on each requested face.

    Sample order is axis-major, then anchor index, independent of ``threads``.
    """
    if n < 1 or face_res < 1:
        raise ValueError("n and face_res must be >= 1")
    if not is_watertight(mesh):
        warnings.warn("mesh is not watertight; occupancy uses crossing parity anyway",
                      RuntimeWarning, stacklevel=2)
    bvh = bvh if bvh is not None else build_bvh(mesh)
    samples = []
    axes = [parse_axis(a) for a in axes]
    for axis in axes:
        anchors = face_anchors(axis, face_res, mode, seed)
        chunks = [anchors[s:s + _CHUNK] for s in range(0, len(anchors), _CHUNK)]
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda c: _vectors_for_chunk(bvh, c, axis, n), chunks))
        else:
            results = [_vectors_for_chunk(bvh, c, axis, n) for c in chunks]
        for chunk, (occ, span) in zip(chunks, results):
            for a, o, s in zip(chunk, occ, span):
                samples.append(OccupancyVector(axis, a, o, s))
    meta = {"n": n, "face_res": face_res, "mode": mode, "seed": seed, "delta": delta,
            "axes": "".join("XYZ"[a] for a in axes)}
    return VectorDataset(mesh_id, samples, meta)


# ---------------------------------------------------------------------------
# .tifuvec I/O
# ---------------------------------------------------------------------------

def _record_dtype(n: int) -> np.dtype:
    return np.dtype([("axis", "u1"), ("anchor", "<f4", (3,)),
                     ("occ", "u1", ((n + 7) // 8,)), ("span", "<f4", (n,))])


def record_size(n: int) -> int:
    return _record_dtype(n).itemsize


def write_dataset(ds: VectorDataset, path) -> None:
    """Little-endian ``.tifuvec``: 32-byte header then fixed-size records.

    Occupancy bits are packed LSB-first (element ``i`` is bit ``i % 8`` of byte ``i // 8``).
    """
    n = ds.n
    rec = np.zeros(len(ds.samples), dtype=_record_dtype(n))
    for i, s in enumerate(ds.samples):
        if s.n != n:
            raise ValueError(f"sample {i} has {s.n} elements, dataset expects {n}")
        rec[i]["axis"] = int(s.axis)
        rec[i]["anchor"] = s.anchor
        rec[i]["occ"] = np.packbits(np.asarray(s.occ, dtype=bool), bitorder="little")
        rec[i]["span"] = s.min_span if s.min_span is not None else np.inf
    header = _HEADER.pack(MAGIC, VERSION, n, len(ds.samples), float(ds.meta.get("delta", DEFAULT_DELTA)),
                          int(ds.meta.get("seed", 0)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_dataset(path, mesh_id: str | None = None) -> VectorDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated file (header)")
    magic, version, n, count, delta, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: version mismatch (file {version}, expected {VERSION})")
    dt = _record_dtype(n)
    expected = _HEADER.size + count * dt.itemsize
    if len(raw) < expected:
        raise DatasetFormatError(f"{path}: truncated file ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise DatasetFormatError(f"{path}: trailing bytes after {count} records")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=_HEADER.size)
    samples = []
    for r in rec:
        if r["axis"] > 2:
            raise DatasetFormatError(f"{path}: invalid axis {r['axis']}")
        occ = np.unpackbits(r["occ"], bitorder="little", count=n).astype(bool)
        samples.append(OccupancyVector(Axis(int(r["axis"])), r["anchor"].astype(np.float64), occ,
                                       r["span"].astype(np.float32)))
    meta = {"n": n, "delta": delta, "seed": seed}
    return VectorDataset(mesh_id if mesh_id is not None else path.stem, samples, meta)
