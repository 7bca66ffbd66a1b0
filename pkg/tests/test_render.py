import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexpose.pose import PoseSet
from flexpose.render import (JOINT_COLOR, DegenerateHeatmapError, bresenham, decode_softargmax, export_poses,
                             pose_svg, rasterize, render_heatmaps, roundtrip_filter, to_pixels)
from flexpose.synth import default_source_spec, sample_poses


def _bresenham_oracle(x0, y0, x1, y1):
    """Pixels nearest to the exact segment, one per step along the major axis."""
    n = max(abs(x1 - x0), abs(y1 - y0))
    t = np.arange(n + 1) / max(n, 1)
    xs = np.floor(x0 + t * (x1 - x0) + 0.5).astype(int)
    ys = np.floor(y0 + t * (y1 - y0) + 0.5).astype(int)
    return list(zip(xs.tolist(), ys.tolist()))


class TestRasterize:
    def test_horizontal_bone(self, chain5):
        pose = np.full((5, 2), 0.5)
        pose[0], pose[1] = [0.25, 0.5], [0.75, 0.5]
        # keep the other joints on the same row so only bone 0 is visible off the joint marks
        pose[2], pose[3], pose[4] = [0.75, 0.5], [0.25, 0.5], [0.25, 0.5]
        img = rasterize(pose, chain5)
        # round(x * 63): 15.75 -> 16, 47.25 -> 47, 31.5 -> 32
        assert to_pixels(0.25, 64) == 16 and to_pixels(0.75, 64) == 47 and to_pixels(0.5, 64) == 32
        assert bresenham(16, 32, 47, 32) == [(x, 32) for x in range(16, 48)]
        red = np.all(img == (255, 0, 0), axis=-1)
        ys, xs = np.nonzero(red)
        assert set(ys) == {32}
        # joint marks cover x in {16, 17} and {47, 48}
        assert set(xs) == set(range(18, 47))
        assert np.all(img[32:34, 16:18] == JOINT_COLOR)

    def test_deterministic(self, topo):
        pose = sample_poses(default_source_spec(), 1, 0).coords[0]
        assert rasterize(pose, topo).tobytes() == rasterize(pose, topo).tobytes()

    def test_all_bone_colors_present(self, topo):
        ps = sample_poses(default_source_spec(), 5, 1)
        for pose in ps.coords:
            img = rasterize(pose, topo, 128, 128)
            colors = {tuple(c) for c in img.reshape(-1, 3)}
            assert all(tuple(c) in colors for c in topo.colors)

    def test_coincident_joints(self, chain5):
        img = rasterize(np.full((5, 2), 0.5), chain5)
        assert img.any()

    def test_too_small(self, topo):
        with pytest.raises(ValueError):
            rasterize(np.full((13, 2), 0.5), topo, 7, 64)

    def test_grayscale(self, topo):
        pose = sample_poses(default_source_spec(), 1, 0).coords[0]
        img = rasterize(pose, topo, grayscale=True)
        assert {tuple(c) for c in img.reshape(-1, 3)} <= {(0, 0, 0), (255, 255, 255)}

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
    def test_bresenham_endpoints_and_connectivity(self, x0, y0, x1, y1):
        pts = bresenham(x0, y0, x1, y1)
        assert pts[0] == (x0, y0) and pts[-1] == (x1, y1)
        assert len(pts) == max(abs(x1 - x0), abs(y1 - y0)) + 1
        steps = np.abs(np.diff(np.array(pts), axis=0))
        assert steps.max(initial=0) <= 1

    def test_bresenham_axis_aligned_matches_oracle(self):
        assert bresenham(2, 5, 9, 5) == _bresenham_oracle(2, 5, 9, 5)
        assert bresenham(3, 1, 3, 6) == _bresenham_oracle(3, 1, 3, 6)
        assert bresenham(0, 0, 4, 4) == _bresenham_oracle(0, 0, 4, 4)


class TestHeatmaps:
    def test_normalized(self, rng):
        maps = render_heatmaps(rng.random((13, 2)), 16)
        assert np.max(np.abs(maps.sum(axis=(1, 2)) - 1)) <= 1e-9

    def test_center_symmetry(self):
        m = render_heatmaps(np.array([[0.5, 0.5]]), 17)[0]
        assert np.abs(m - np.rot90(m)).max() <= 1e-12

    def test_tiny_sigma_argmax(self):
        m = render_heatmaps(np.array([[3 / 15, 7 / 15]]), 16, sigma=0.05)[0]
        assert np.unravel_index(np.argmax(m), m.shape) == (7, 3)

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            render_heatmaps(np.zeros((1, 2)), 8, 0.0)


class TestDecode:
    def test_one_hot(self):
        m = np.zeros((1, 8, 8))
        m[0, 2, 5] = 1.0
        assert np.array_equal(decode_softargmax(m)[0], [5 / 7, 2 / 7])

    def test_uniform(self):
        assert np.allclose(decode_softargmax(np.ones((2, 9, 9))), 0.5, atol=1e-15)

    def test_weighted_pair(self):
        m = np.zeros((1, 8, 8))
        m[0, 4, 1], m[0, 4, 6] = 0.75, 0.25
        a, b = 1 / 7, 6 / 7
        assert np.isclose(decode_softargmax(m)[0, 0], 0.75 * a + 0.25 * b, atol=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegenerateHeatmapError, match="degenerate heatmap"):
            decode_softargmax(np.zeros((1, 4, 4)))

    def test_batch(self, rng):
        poses = rng.random((3, 5, 2)) * 0.6 + 0.2
        stacks = np.stack([render_heatmaps(p, 16) for p in poses])
        out = decode_softargmax(stacks)
        for i in range(3):
            assert np.array_equal(out[i], decode_softargmax(stacks[i]))

    def test_linearity(self, rng):
        h1 = render_heatmaps(rng.random((4, 2)), 16)
        h2 = render_heatmaps(rng.random((4, 2)), 16)
        a = 0.3
        lhs = decode_softargmax(a * h1 + (1 - a) * h2)
        rhs = a * decode_softargmax(h1) + (1 - a) * decode_softargmax(h2)
        assert np.allclose(lhs, rhs, atol=1e-14)

    def test_noisy_bias_toward_center(self, rng):
        res, sigma = 32, 1.5
        lo = 2 * sigma / (res - 1)
        y = lo + rng.random((13, 2)) * (1 - 2 * lo)
        clean = decode_softargmax(render_heatmaps(y, res, sigma))
        noisy = decode_softargmax(0.9 * render_heatmaps(y, res, sigma) + 0.1 * np.full((13, res, res), 1 / res ** 2))
        # oracle uses the clean decode, so the identity is exact up to roundoff
        assert np.allclose(noisy - clean, 0.1 * (0.5 - clean), atol=1e-14)

    def test_roundtrip_interior(self, rng):
        res, sigma = 16, 1.5
        lo = 2 * sigma / (res - 1)
        y = lo + rng.random((200, 13, 2)) * (1 - 2 * lo)
        rec = decode_softargmax(np.stack([render_heatmaps(p, res, sigma) for p in y]))
        assert np.abs(rec - y).max() <= 0.5 / res

    def test_filter_idempotent(self, topo, rng):
        res = 32
        lo = 3 / (res - 1)
        y = lo + rng.random((13, 2)) * (1 - 2 * lo)
        y1, img = roundtrip_filter(render_heatmaps(y, res), topo)
        y2, _ = roundtrip_filter(render_heatmaps(y1, res), topo)
        assert np.abs(y2 - y1).max() <= 0.5 / res
        assert np.array_equal(img, rasterize(y1, topo))


class TestExport:
    def test_png_and_svg(self, topo, tmp_path):
        import matplotlib.image as mpimg

        ps = sample_poses(default_source_spec(), 3, 0)
        paths = export_poses(ps, tmp_path / "out", 32, 32)
        assert len(paths) == 6
        img = mpimg.imread(str(paths[0]))
        assert img.shape[:2] == (32, 32)
        raster = rasterize(ps.coords[0], topo, 32, 32)
        assert np.array_equal(np.round(img[..., :3] * 255).astype(np.uint8), raster)
        svg = paths[1].read_text()
        assert svg.count("<line") == 12 and svg.startswith("<svg")

    def test_svg_coordinates(self, chain5):
        pose = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
        svg = pose_svg(pose, chain5, 11, 11)
        assert 'x1="0.0000" y1="0.0000" x2="10.0000" y2="10.0000"' in svg

    def test_empty_set(self, topo, tmp_path):
        assert export_poses(PoseSet(topo, np.zeros((0, 13, 2))), tmp_path) == []
