import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexpose.pose import (PoseFormatError, PoseSet, SkeletonTopology, default_topology, fit_to_canvas,
                           load_poses, pose_mixup, save_poses, validate_pose)


def _random_set(topo, n, seed):
    return PoseSet(topo, np.random.default_rng(seed).random((n, topo.m, 2)), [f"p{i}" for i in range(n)])


class TestTopology:
    def test_default_shape(self, topo):
        assert topo.m == 13
        assert len(topo.bones) == 12
        assert len(set(topo.colors)) == 12
        assert topo.parents()[topo.root] == -1

    def test_descendants_of_left_hip(self, topo):
        # l_hip -> l_knee -> l_ankle
        assert topo.descendants(7) == [9, 11]
        assert topo.descendants(11) == []

    def test_bone_order_parents_first(self, topo):
        placed = {topo.root}
        for b in topo.bone_order():
            p, c = topo.bones[b]
            assert p in placed
            placed.add(c)
        assert len(placed) == topo.m

    def test_cycle_rejected(self):
        with pytest.raises(ValueError, match="cycle"):
            SkeletonTopology(("a", "b", "c"), ((0, 1), (1, 0)), 0, ((1, 0, 0), (0, 1, 0)))

    def test_wrong_bone_count(self):
        with pytest.raises(ValueError, match="bones"):
            SkeletonTopology(("a", "b", "c"), ((0, 1),), 0, ((1, 0, 0),))

    def test_duplicate_colors(self):
        with pytest.raises(ValueError, match="distinct"):
            SkeletonTopology(("a", "b", "c"), ((0, 1), (0, 2)), 0, ((1, 0, 0), (1, 0, 0)))

    def test_root_as_child(self):
        with pytest.raises(ValueError, match="root"):
            SkeletonTopology(("a", "b", "c"), ((1, 0), (1, 2)), 0, ((1, 0, 0), (0, 1, 0)))

    def test_json_roundtrip(self, topo):
        assert SkeletonTopology.from_json(json.loads(json.dumps(topo.to_json()))) == topo

    def test_header_m_mismatch(self, topo):
        obj = topo.to_json()
        obj["m"] = 14
        with pytest.raises(PoseFormatError):
            SkeletonTopology.from_json(obj)


class TestValidatePose:
    def test_valid(self, topo):
        assert validate_pose(np.full((13, 2), 0.5), topo) is None

    def test_length_mismatch(self, topo):
        assert validate_pose(np.full((12, 2), 0.5), topo) == "length mismatch"

    def test_non_finite(self, topo):
        p = np.full((13, 2), 0.5)
        p[3, 1] = np.nan
        assert validate_pose(p, topo) == "non-finite coordinate"

    def test_out_of_canvas(self, topo):
        p = np.full((13, 2), 0.5)
        p[0, 0] = 1.0 + 1e-12
        assert validate_pose(p, topo) == "coordinate outside [0, 1]"

    def test_boundaries_allowed(self, topo):
        p = np.zeros((13, 2))
        p[1] = 1.0
        assert validate_pose(p, topo) is None


class TestPoseIO:
    def test_bit_roundtrip(self, topo, tmp_path):
        ps = _random_set(topo, 50, 0)
        ps.labels[3] = None
        save_poses(ps, tmp_path / "a.jsonl")
        back = load_poses(tmp_path / "a.jsonl")
        assert back.topology == topo
        assert back.labels == ps.labels
        assert np.array_equal(back.coords, ps.coords)

    def test_save_is_deterministic(self, topo, tmp_path):
        ps = _random_set(topo, 10, 1)
        save_poses(ps, tmp_path / "a.jsonl")
        save_poses(load_poses(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_record_length_error_names_line(self, topo, tmp_path):
        ps = _random_set(topo, 3, 2)
        path = tmp_path / "bad.jsonl"
        save_poses(ps, path)
        lines = path.read_text().splitlines()
        rec = json.loads(lines[2])
        rec["coords"] = rec["coords"][:12]
        lines[2] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(PoseFormatError, match=r":3: record has 12 pairs, header says m=13"):
            load_poses(path)

    def test_missing_header(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("\n")
        with pytest.raises(PoseFormatError, match="header"):
            load_poses(tmp_path / "e.jsonl")

    def test_garbage_record(self, topo, tmp_path):
        path = tmp_path / "g.jsonl"
        path.write_text(json.dumps(topo.to_json()) + "\n{not json\n")
        with pytest.raises(PoseFormatError, match=":2:"):
            load_poses(path)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=26, max_size=26))
    def test_float_roundtrip_property(self, tmp_path_factory, vals):
        topo = default_topology()
        ps = PoseSet(topo, np.array(vals).reshape(1, 13, 2))
        path = tmp_path_factory.mktemp("io") / "p.jsonl"
        save_poses(ps, path)
        assert np.array_equal(load_poses(path).coords, ps.coords)


class TestPoseSet:
    def test_subset_and_concat(self, topo):
        ps = _random_set(topo, 6, 3)
        sub = ps.subset([4, 1])
        assert np.array_equal(sub.coords, ps.coords[[4, 1]])
        assert sub.labels == ["p4", "p1"]
        both = ps.concat(sub)
        assert len(both) == 8
        assert both.flat().shape == (8, 26)

    def test_concat_topology_mismatch(self, topo, chain5):
        with pytest.raises(ValueError):
            _random_set(topo, 2, 0).concat(_random_set(chain5, 2, 0))


class TestMixup:
    def test_count_and_label(self, topo):
        out = pose_mixup(_random_set(topo, 30, 0), 1000, 7)
        assert len(out) == 1000
        assert set(out.labels) == {"mixup"}

    def test_needs_two(self, topo):
        with pytest.raises(ValueError, match="mixup needs at least two guidance poses"):
            pose_mixup(_random_set(topo, 1, 0), 5, 0)

    def test_two_poses_segment(self, chain5):
        """With two parents every output lies on the segment between them, per joint, with a shared lambda."""
        a = np.zeros((5, 2))
        b = np.ones((5, 2))
        out = pose_mixup(PoseSet(chain5, np.stack([a, b])), 200, 3)
        lam = out.coords[:, 0, 0]
        assert np.allclose(out.coords, lam[:, None, None] * np.ones((1, 5, 2)), atol=0)
        # lambda covers [0, 1] roughly uniformly
        assert 0.4 < lam.mean() < 0.6
        assert lam.min() < 0.05 and lam.max() > 0.95

    def test_seed_determinism(self, topo):
        ps = _random_set(topo, 10, 0)
        assert np.array_equal(pose_mixup(ps, 50, 1).coords, pose_mixup(ps, 50, 1).coords)
        assert not np.array_equal(pose_mixup(ps, 50, 1).coords, pose_mixup(ps, 50, 2).coords)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2 ** 31 - 1))
    def test_convexity_property(self, n, seed):
        """Every mixed joint lies inside the per-coordinate hull of the guidance set."""
        topo = default_topology()
        ps = _random_set(topo, n, seed)
        out = pose_mixup(ps, 64, seed)
        lo, hi = ps.coords.min(axis=0), ps.coords.max(axis=0)
        assert np.all(out.coords >= lo) and np.all(out.coords <= hi)
        assert validate_pose(out.coords[0], topo) is None


class TestFitToCanvas:
    def test_bbox_and_center(self, rng):
        pose = rng.normal(size=(13, 2))
        out = fit_to_canvas(pose, 0.1)
        lo, hi = out.min(axis=0), out.max(axis=0)
        assert np.isclose((hi - lo).max(), 0.8)
        assert np.allclose(0.5 * (lo + hi), 0.5)

    def test_preserves_shape_ratios(self, rng):
        pose = rng.normal(size=(13, 2))
        out = fit_to_canvas(pose)
        d_in = np.linalg.norm(pose[:, None] - pose[None], axis=-1)
        d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
        ratio = d_out[d_in > 0] / d_in[d_in > 0]
        assert np.allclose(ratio, ratio[0])

    def test_degenerate(self):
        assert np.array_equal(fit_to_canvas(np.full((4, 2), 3.0)), np.full((4, 2), 0.5))

    def test_idempotent(self, rng):
        once = fit_to_canvas(rng.random((13, 2)))
        assert np.allclose(fit_to_canvas(once), once, atol=1e-15)

    def test_no_force_inside(self):
        p = np.array([[0.3, 0.3], [0.6, 0.5]])
        assert np.array_equal(fit_to_canvas(p, force=False), p)
