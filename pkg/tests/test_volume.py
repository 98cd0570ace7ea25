import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tifu.mesh import is_watertight
from tifu.metrics import chamfer, sample_surface, sphere_point_cloud
from tifu.occupancy import Axis, face_anchors, generate_dataset, grid_coords
from tifu.volume import (AggregationWeights, DenseVolume, VolumeError, aggregate, axis_volumes_from_mesh,
                         marching_cubes, read_volume, resample_volume, resize_vector, resize_vectors,
                         stack_arrays, stack_vectors, volume_from_gt, write_volume)

SPHERE_FRACTION = 4.0 / 3.0 * np.pi * 0.4 ** 3

unit_floats = st.floats(0.0, 1.0, allow_nan=False)


class TestResizeVector:
    def test_midpoint(self):
        np.testing.assert_array_equal(resize_vector([1, 0], 3), [1, 0.5, 0])

    def test_hat(self):
        np.testing.assert_array_equal(resize_vector([0, 1, 0], 5), [0, 0.5, 1, 0.5, 0])

    def test_single_target_keeps_end(self):
        np.testing.assert_array_equal(resize_vector([0.2, 0.7], 1), [0.7])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
    def test_identity_bit_exact(self, v):
        out = resize_vector(v, len(v))
        assert np.asarray(v, dtype=np.float64).tobytes() == out.tobytes()

    @given(st.lists(unit_floats, min_size=1, max_size=40), st.integers(1, 200))
    def test_bounds_and_endpoints(self, v, m):
        out = resize_vector(v, m)
        assert len(out) == m
        assert out.min() >= min(v) and out.max() <= max(v)
        assert out[-1] == v[-1]
        if m > 1:
            assert out[0] == v[0]

    def test_batched(self):
        v = np.array([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(resize_vectors(v, 3), [[1, 0.5, 0], [0, 0.5, 1]])


class TestStack:
    def test_constant_ones(self):
        anchors = face_anchors(Axis.Z, 2)
        vol = stack_arrays(anchors, np.ones((4, 5)), Axis.Z, 2, 2)
        np.testing.assert_array_equal(vol.data, np.ones((2, 2, 2)))

    def test_single_anchor(self):
        vol = stack_vectors([((0.5, 0.5, -0.5), [1, 0, 1])], Axis.Z, (1, 1), 3)
        np.testing.assert_array_equal(vol.data[0, 0], [1, 0, 1])

    def test_axis_placement(self):
        anchors = face_anchors(Axis.X, 2)
        vecs = np.array([[0, 1, 1], [0, 0, 1], [1, 1, 1], [0, 0, 0]], dtype=float)
        vol = stack_arrays(anchors, vecs, Axis.X, 2, 3)
        # anchors are row-major over (y, z); the vector runs along x
        np.testing.assert_array_equal(vol.data[:, 0, 0], [0, 1, 1])
        np.testing.assert_array_equal(vol.data[:, 0, 1], [0, 0, 1])
        np.testing.assert_array_equal(vol.data[:, 1, 0], [1, 1, 1])
        np.testing.assert_array_equal(vol.data[:, 1, 1], [0, 0, 0])

    def test_missing_anchor(self):
        anchors = face_anchors(Axis.Y, 3)[:-1]
        with pytest.raises(VolumeError, match=r"missing anchors at face cells \(2,2\)"):
            stack_arrays(anchors, np.zeros((8, 3)), Axis.Y, 3, 3)

    def test_sphere_fraction_per_axis(self, sphere):
        ds = generate_dataset(sphere, 32, 32)
        for axis in Axis:
            sub = ds.by_axis(axis)
            vol = stack_vectors([(s.anchor, s.occ.astype(float)) for s in sub.samples], axis, 32, 32)
            assert vol.occupied_fraction() == pytest.approx(SPHERE_FRACTION, abs=0.01)

    def test_voxel_centers_follow_grid(self):
        vol = DenseVolume(np.zeros((2, 3, 4)))
        c = vol.centers()
        np.testing.assert_array_equal(c[:, 0, 0, 0], grid_coords(2))
        np.testing.assert_array_equal(c[0, :, 0, 1], grid_coords(3))
        np.testing.assert_array_equal(c[0, 0, :, 2], grid_coords(4))


class TestAggregate:
    def test_identity(self):
        rng = np.random.default_rng(0)
        v = DenseVolume(rng.random((6, 6, 6)))
        out = aggregate(v, v, v, AggregationWeights(1 / 7, 2 / 7, 4 / 7))
        np.testing.assert_allclose(out.data, v.data, atol=1e-9, rtol=0)

    def test_one_seventh(self):
        one, zero = DenseVolume(np.ones((3, 3, 3))), DenseVolume(np.zeros((3, 3, 3)))
        out = aggregate(one, zero, zero)
        np.testing.assert_allclose(out.data, 1 / 7, rtol=1e-15)

    def test_sphere_aggregate_fraction(self, sphere):
        vol = volume_from_gt(sphere, 32)
        assert vol.occupied_fraction() == pytest.approx(SPHERE_FRACTION, abs=0.01)

    def test_resolution_mismatch(self):
        with pytest.raises(VolumeError, match="mismatch"):
            aggregate(DenseVolume(np.zeros((2, 2, 2))), DenseVolume(np.zeros((2, 2, 2))),
                      DenseVolume(np.zeros((2, 2, 3))))

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            AggregationWeights(0.5, 0.5, 0.5)
        with pytest.raises(ValueError):
            AggregationWeights(1.2, -0.1, -0.1)

    @given(hnp.arrays(np.float64, (3, 3, 3, 3), elements=unit_floats), unit_floats)
    @settings(max_examples=50)
    def test_linearity(self, data, a):
        vols = [DenseVolume(d) for d in data]
        scaled = [DenseVolume(a * d) for d in data]
        np.testing.assert_allclose(aggregate(*scaled).data, a * aggregate(*vols).data, atol=1e-12)


class TestVolumeType:
    def test_range_checked(self):
        with pytest.raises(VolumeError):
            DenseVolume(np.full((2, 2, 2), 1.5))
        with pytest.raises(VolumeError):
            DenseVolume(np.full((2, 2, 2), np.nan))

    def test_resample_shared_endpoints(self):
        rng = np.random.default_rng(1)
        v = DenseVolume(rng.random((4, 4, 4)))
        r = resample_volume(v, 7)
        assert r.resolution == (7, 7, 7)
        np.testing.assert_array_equal(r.data[-1, -1, -1], v.data[-1, -1, -1])
        np.testing.assert_array_equal(r.data[::2, ::2, ::2], v.data)


class TestMarchingCubes:
    def test_all_zero_is_empty(self):
        assert marching_cubes(DenseVolume(np.zeros((8, 8, 8)))).is_empty()

    def test_all_one_closes_at_boundary(self):
        m = marching_cubes(DenseVolume(np.ones((4, 4, 4))))
        assert not m.is_empty()
        assert is_watertight(m)

    def test_iso_range(self):
        with pytest.raises(ValueError):
            marching_cubes(DenseVolume(np.zeros((2, 2, 2))), iso=1.0)

    def test_analytic_sphere(self):
        vol = DenseVolume(np.zeros((64, 64, 64)))
        r = np.linalg.norm(vol.centers(), axis=-1)
        vol = DenseVolume((r < 0.4).astype(float))
        m = marching_cubes(vol)
        assert is_watertight(m)
        d = chamfer(sample_surface(m, 20_000, 0), sphere_point_cloud(0.4, 20_000, 1))
        assert d < 2.0 / 64

    def test_outward_orientation(self, sphere):
        m = marching_cubes(volume_from_gt(sphere, 32))
        c = m.corners()
        signed = np.einsum("ij,ij->i", np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), c[:, 0]).sum() / 6
        assert signed > 0
        # face normals point away from the center on average
        centroids = c.mean(axis=1)
        assert np.mean(np.einsum("ij,ij->i", m.face_normals, centroids) > 0) > 0.99

    def test_complement_flips_normals(self, sphere):
        vol = volume_from_gt(sphere, 24)
        a = marching_cubes(vol)
        b = marching_cubes(DenseVolume(1.0 - vol.data), pad_value=1.0)
        # same surface, reversed orientation: matched vertices and opposite face normals
        assert a.n_triangles == b.n_triangles
        ka = {tuple(np.round(v, 9)) for v in a.vertices}
        kb = {tuple(np.round(v, 9)) for v in b.vertices}
        assert ka == kb
        ca = a.corners().mean(axis=1)
        cb = b.corners().mean(axis=1)
        ia = np.lexsort(np.round(ca, 9).T)
        ib = np.lexsort(np.round(cb, 9).T)
        np.testing.assert_allclose(a.face_normals[ia], -b.face_normals[ib], atol=1e-9)

    def test_watertight_inside_cube(self, dumbbell):
        assert is_watertight(marching_cubes(volume_from_gt(dumbbell, 48)))


class TestVolumeIO:
    def test_payload_size(self, tmp_path):
        p = write_volume(DenseVolume(np.full((2, 2, 2), 0.25)), tmp_path / "v.vol")
        assert p.stat().st_size == 32
        meta = json.loads((tmp_path / "v.vol.json").read_text())
        assert meta["resolution"] == [2, 2, 2]

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        v = DenseVolume(rng.random((3, 4, 5)).astype(np.float32).astype(np.float64))
        write_volume(v, tmp_path / "v.vol")
        assert read_volume(tmp_path / "v.vol") == v

    def test_x_fastest(self, tmp_path):
        d = np.zeros((2, 2, 2))
        d[1, 0, 0] = 1.0
        write_volume(DenseVolume(d), tmp_path / "v.vol")
        raw = np.frombuffer((tmp_path / "v.vol").read_bytes(), dtype="<f4")
        np.testing.assert_array_equal(raw, [0, 1, 0, 0, 0, 0, 0, 0])

    def test_truncated(self, tmp_path):
        write_volume(DenseVolume(np.zeros((2, 2, 2))), tmp_path / "v.vol")
        p = tmp_path / "v.vol"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(VolumeError, match="bytes"):
            read_volume(p)


def test_gt_axis_volumes_match_parity(box):
    from tifu.bvh import build_bvh, point_inside
    vols = axis_volumes_from_mesh(box, 16)
    centers = vols[0].centers().reshape(-1, 3)
    inside = point_inside(build_bvh(box), centers).reshape(16, 16, 16)
    for v in vols:
        np.testing.assert_array_equal(v.data > 0.5, inside)
