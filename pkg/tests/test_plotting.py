import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from tifu.metrics import render_normal_map
from tifu.plotting import (normal_rgb, plot_loss_curve, plot_normal_maps, plot_volume_slices, read_pfm, smooth,
                           write_pfm)
from tifu.volume import volume_from_gt

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class TestSmooth:
    def test_examples(self):
        np.testing.assert_allclose(smooth([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
        np.testing.assert_allclose(smooth([4, 2], 10), [4, 3])

    def test_empty(self):
        assert smooth([], 5).size == 0

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=100), st.integers(1, 20))
    def test_matches_loop(self, v, w):
        expect = [np.mean(v[max(0, i - w + 1):i + 1]) for i in range(len(v))]
        np.testing.assert_allclose(smooth(v, w), expect, rtol=1e-9, atol=1e-9)


class TestFigures:
    def test_loss_curve(self, tmp_path):
        hist = [(i, 1 / (i + 1), 2 / (i + 1), 3 / (i + 1), 4 / (i + 1), 5 / (i + 1)) for i in range(80)]
        plot_loss_curve(hist, tmp_path / "l.png")
        assert (tmp_path / "l.png").read_bytes()[:8] == PNG_MAGIC

    def test_loss_curve_empty(self, tmp_path):
        plot_loss_curve([], tmp_path / "l.png")
        assert (tmp_path / "l.png").is_file()

    def test_normal_maps(self, tmp_path, sphere, box):
        maps = [(render_normal_map(sphere, y, 32), render_normal_map(box, y, 32)) for y in (0, 60)]
        plot_normal_maps(maps, (0, 60), tmp_path / "n.png")
        assert (tmp_path / "n.png").read_bytes()[:8] == PNG_MAGIC

    def test_volume_slices(self, tmp_path, sphere):
        plot_volume_slices(volume_from_gt(sphere, 16), tmp_path / "s.png")
        assert (tmp_path / "s.png").read_bytes()[:8] == PNG_MAGIC

    def test_rgb_mapping(self):
        n = np.array([[[0, 0, 1], [0, 0, 0]]], dtype=float)
        np.testing.assert_array_equal(normal_rgb(n), [[[0.5, 0.5, 1.0], [0, 0, 0]]])


class TestPfm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((5, 7, 3)).astype(np.float32)
        write_pfm(tmp_path / "a.pfm", img)
        np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)

    def test_header_and_row_order(self, tmp_path):
        img = np.zeros((2, 1, 3), dtype=np.float32)
        img[0] = 1.0  # top row
        write_pfm(tmp_path / "a.pfm", img)
        raw = (tmp_path / "a.pfm").read_bytes()
        assert raw.startswith(b"PF\n1 2\n-1.0\n")
        body = np.frombuffer(raw[len(b"PF\n1 2\n-1.0\n"):], dtype="<f4")
        np.testing.assert_array_equal(body, [0, 0, 0, 1, 1, 1])  # bottom row first
