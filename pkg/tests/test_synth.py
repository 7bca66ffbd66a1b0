import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexpose.pose import SkeletonTopology, default_topology, validate_pose
from flexpose.synth import (KinematicTree, PoseDistributionSpec, ShiftSpec, apply_global_rotation,
                            apply_local_rotation, apply_scale, default_source_spec, forward_kinematics,
                            global_rotation_shift, local_rotation_shift, make_shifted_dataset, sample_pose,
                            sample_poses, scale_shift)

TWO = SkeletonTopology(("root", "tip"), ((0, 1),), 0, ((255, 0, 0),))


def _complex_rotate(points, theta, pivot):
    """Rotation oracle via complex multiplication."""
    z = (points[:, 0] - pivot[0]) + 1j * (points[:, 1] - pivot[1])
    z = z * np.exp(1j * theta)
    return np.stack([z.real + pivot[0], z.imag + pivot[1]], axis=1)


def _fit_oracle(p, margin=0.1):
    lo, hi = p.min(axis=0), p.max(axis=0)
    s = (1 - 2 * margin) / (hi - lo).max()
    return np.clip((p - (lo + hi) / 2) * s + 0.5, 0, 1)


class TestForwardKinematics:
    def test_zero_noise_chain(self):
        spec = PoseDistributionSpec(KinematicTree(TWO, [0.3], [(0.0, 1.0)]), [0.0], [0.0],
                                    root_position=(0.2, 0.1))
        raw = sample_pose(spec, 0, fit=False)
        assert np.array_equal(raw[1], raw[0] + np.array([0.0, 0.3]))
        assert np.array_equal(sample_pose(spec, 0), sample_pose(spec, 99))

    def test_quarter_turn(self):
        spec = PoseDistributionSpec(KinematicTree(TWO, [1.0], [(1.0, 0.0)]), [np.pi / 2], [0.0])
        coords = forward_kinematics(spec, (0.0, 0.0), 0.0, [np.pi / 2], [1.0])
        oracle = _complex_rotate(np.array([[1.0, 0.0]]), np.pi / 2, (0.0, 0.0))[0]
        assert np.allclose(coords[1], oracle, atol=1e-15)
        assert np.allclose(coords[1], [0.0, 1.0], atol=1e-15)

    def test_angles_accumulate(self):
        topo = SkeletonTopology(("a", "b", "c"), ((0, 1), (1, 2)), 0, ((1, 0, 0), (0, 1, 0)))
        spec = PoseDistributionSpec(KinematicTree(topo, [1.0, 1.0], [(1.0, 0.0), (1.0, 0.0)]), 0.0, 0.0)
        c = forward_kinematics(spec, (0, 0), 0.0, [np.pi / 2, np.pi / 2], [1.0, 1.0])
        # second bone turned by the sum of both angles
        assert np.allclose(c[2], [-1.0, 1.0], atol=1e-15)

    def test_rest_directions_must_be_unit(self):
        with pytest.raises(ValueError, match="unit"):
            KinematicTree(TWO, [1.0], [(1.0, 1.0)])

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError):
            PoseDistributionSpec(KinematicTree(TWO, [1.0], [(1.0, 0.0)]), 0.0, -1.0)

    def test_spec_json_roundtrip(self):
        spec = default_source_spec()
        back = PoseDistributionSpec.from_json(spec.to_json())
        assert np.array_equal(sample_poses(spec, 5, 3).coords, sample_poses(back, 5, 3).coords)


class TestSampling:
    def test_determinism(self):
        spec = default_source_spec()
        assert np.array_equal(sample_pose(spec, 11), sample_pose(spec, 11))
        assert not np.array_equal(sample_pose(spec, 11), sample_pose(spec, 12))

    def test_all_valid(self):
        ps = sample_poses(default_source_spec(), 500, 0)
        assert len(ps) == 500
        assert all(validate_pose(p, ps.topology) is None for p in ps.coords)

    def test_prefix_stable(self):
        spec = default_source_spec()
        assert np.array_equal(sample_poses(spec, 10, 4).coords, sample_poses(spec, 20, 4).coords[:10])

    def test_zero_n(self):
        with pytest.raises(ValueError, match="n must be ≥ 1"):
            sample_poses(default_source_spec(), 0, 0)

    def test_upright_head_on_top(self):
        ps = sample_poses(default_source_spec(), 200, 1)
        # image y grows downward: head above both ankles
        assert np.all(ps.coords[:, 0, 1] < ps.coords[:, 11, 1])
        assert np.all(ps.coords[:, 0, 1] < ps.coords[:, 12, 1])


class TestGlobalRotation:
    def test_two_joint_example(self):
        p = np.array([[0.5, 0.5], [0.5, 0.7]])
        out = apply_global_rotation(p, np.pi / 2, refit=False)
        oracle = _complex_rotate(p, np.pi / 2, p.mean(axis=0))
        assert np.allclose(out, oracle, atol=1e-15)
        assert np.allclose(out[1], [0.4, 0.6], atol=1e-15)

    def test_zero_is_refit_identity(self, rng):
        p = sample_pose(default_source_spec(), 3)
        assert np.allclose(apply_global_rotation(p, 0.0), p, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-np.pi, np.pi), st.integers(0, 10 ** 6))
    def test_isometry_property(self, theta, seed):
        p = np.random.default_rng(seed).random((13, 2))
        out = apply_global_rotation(p, theta, refit=False)
        d0 = np.linalg.norm(p[:, None] - p[None], axis=-1)
        d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
        assert np.max(np.abs(d0 - d1)) <= 1e-12

    def test_refit_matches_oracle(self, rng):
        p = rng.random((13, 2))
        out = apply_global_rotation(p, 0.3)
        oracle = _fit_oracle(_complex_rotate(p, 0.3, p.mean(axis=0)))
        assert np.allclose(out, oracle, atol=1e-14)

    def test_non_finite_theta(self):
        with pytest.raises(ValueError):
            apply_global_rotation(np.zeros((2, 2)), np.inf)


class TestLocalRotation:
    def test_identity(self, topo, rng):
        p = rng.random((13, 2)) * 0.5 + 0.25
        assert np.array_equal(apply_local_rotation(p, topo, 7, 0.0), p)

    def test_terminal_reflection(self, topo):
        p = sample_pose(default_source_spec(), 5)
        out = apply_local_rotation(p, topo, 9, np.pi)  # knee -> ankle
        assert np.allclose(out[11], 2 * p[9] - p[11], atol=1e-14)
        d = np.linalg.norm(p[11] - p[9])
        assert np.isclose(np.linalg.norm(out[11] - p[11]), 2 * d, atol=1e-14)

    def test_root_rejected(self, topo):
        with pytest.raises(ValueError, match="local rotation requires a proper subtree"):
            apply_local_rotation(np.zeros((13, 2)), topo, 0, 1.0)

    def test_leaf_rejected(self, topo):
        with pytest.raises(ValueError, match="descendants"):
            apply_local_rotation(np.zeros((13, 2)), topo, 11, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-np.pi, np.pi), st.sampled_from([1, 2, 3, 4, 7, 8, 9, 10]), st.integers(0, 10 ** 6))
    def test_complement_fixed_property(self, gamma, joint, seed):
        topo = default_topology()
        p = np.random.default_rng(seed).random((13, 2))
        out = apply_local_rotation(p, topo, joint, gamma)
        moved = set(topo.descendants(joint))
        fixed = [j for j in range(13) if j not in moved]
        assert np.array_equal(out[fixed], p[fixed])

    def test_subtree_rigid_when_unclipped(self, topo):
        p = np.full((13, 2), 0.5)
        p[7], p[9], p[11] = [0.5, 0.5], [0.5, 0.55], [0.52, 0.6]
        out = apply_local_rotation(p, topo, 7, 2.5)
        oracle = _complex_rotate(p[[9, 11]], 2.5, p[7])
        assert np.allclose(out[[9, 11]], oracle, atol=1e-15)


class TestScale:
    def test_identity(self, rng):
        p = rng.random((13, 2))
        assert np.allclose(apply_scale(p, 1.0), p, atol=1e-15)

    def test_half(self):
        p = np.array([[0.3, 0.5], [0.7, 0.5]])  # centroid (0.5, 0.5), second joint at +(0.2, 0)
        assert np.allclose(apply_scale(p, 0.5)[1], [0.6, 0.5], atol=1e-15)

    def test_nonpositive(self):
        with pytest.raises(ValueError):
            apply_scale(np.zeros((2, 2)), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.5, 1.5), st.floats(0.5, 1.5), st.integers(0, 10 ** 6))
    def test_composition_property(self, a, b, seed):
        # small pose near the center so nothing is clipped
        p = 0.5 + 0.1 * (np.random.default_rng(seed).random((13, 2)) - 0.5)
        assert np.max(np.abs(apply_scale(apply_scale(p, a), b) - apply_scale(p, a * b))) <= 1e-12

    def test_sampled_eta_avoids_gap(self):
        sh = scale_shift()
        rng = np.random.default_rng(0)
        p = np.array([[0.4, 0.5], [0.6, 0.5]])
        etas = [(sh.apply(p, TWO, rng)[1, 0] - 0.5) / 0.1 for _ in range(2000)]
        etas = np.array(etas)
        assert np.all(((etas >= 0.7 - 1e-12) & (etas <= 0.9 + 1e-12)) | ((etas >= 1.1 - 1e-12) & (etas <= 1.2 + 1e-12)))
        assert np.any(etas < 0.9) and np.any(etas > 1.1)


class TestShiftSpec:
    def test_zero_rotation_equals_plain(self):
        spec = default_source_spec()
        plain = sample_poses(spec, 20, 3)
        shifted = make_shifted_dataset(spec, global_rotation_shift(0, 0), 20, 3)
        assert np.allclose(shifted.coords, plain.coords, atol=1e-15)

    def test_cardinality_and_validity(self):
        ps = make_shifted_dataset(default_source_spec(), local_rotation_shift(), 1000, 1)
        assert len(ps) == 1000
        assert all(validate_pose(p, ps.topology) is None for p in ps.coords)

    def test_compose_oracle(self):
        spec = default_source_spec()
        comp = ShiftSpec("compose", children=[global_rotation_shift(30, 30),
                                              ShiftSpec("scale", eta_ranges=[(0.8, 0.8)])])
        p = sample_pose(spec, 8)
        out = comp.apply(p, spec.topology, np.random.default_rng(0))
        rot = _fit_oracle(_complex_rotate(p, np.deg2rad(30), p.mean(axis=0)))
        c = rot.mean(axis=0)
        oracle = np.clip((rot - c) * 0.8 + c, 0, 1)
        assert np.allclose(out, oracle, atol=1e-14)

    def test_json_roundtrip(self):
        comp = ShiftSpec("compose", children=[global_rotation_shift(), local_rotation_shift(), scale_shift()])
        assert ShiftSpec.from_json(comp.to_json()) == comp

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            ShiftSpec("shear")

    def test_unordered_range(self):
        with pytest.raises(ValueError):
            ShiftSpec("global_rotation", theta_range=(1.0, 0.0))

    def test_determinism(self):
        spec = default_source_spec()
        a = make_shifted_dataset(spec, global_rotation_shift(), 30, 5)
        b = make_shifted_dataset(spec, global_rotation_shift(), 30, 5)
        assert np.array_equal(a.coords, b.coords)
