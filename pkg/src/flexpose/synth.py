"""Procedural pose distributions (2D forward kinematics) and geometric shifts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pose import PoseSet, SkeletonTopology, default_topology, fit_to_canvas


@dataclass
class KinematicTree:
    topology: SkeletonTopology
    bone_lengths: np.ndarray
    rest_directions: np.ndarray

    def __post_init__(self):
        self.bone_lengths = np.asarray(self.bone_lengths, dtype=np.float64)
        self.rest_directions = np.asarray(self.rest_directions, dtype=np.float64)
        nb = len(self.topology.bones)
        if self.bone_lengths.shape != (nb,) or self.rest_directions.shape != (nb, 2):
            raise ValueError("need one length and one rest direction per bone")
        if np.any(self.bone_lengths <= 0):
            raise ValueError("bone lengths must be positive")
        if np.any(np.abs(np.linalg.norm(self.rest_directions, axis=1) - 1.0) > 1e-9):
            raise ValueError("rest directions must be unit vectors")


@dataclass
class PoseDistributionSpec:
    tree: KinematicTree
    joint_angle_mean: np.ndarray
    joint_angle_std: np.ndarray
    root_orientation_range: tuple[float, float] = (0.0, 0.0)
    root_position: tuple[float, float] = (0.5, 0.5)
    root_jitter_std: float = 0.0
    bone_length_ratio_jitter: float = 0.0

    def __post_init__(self):
        nb = len(self.tree.topology.bones)
        self.joint_angle_mean = np.broadcast_to(
            np.asarray(self.joint_angle_mean, dtype=np.float64), (nb,)).copy()
        self.joint_angle_std = np.broadcast_to(
            np.asarray(self.joint_angle_std, dtype=np.float64), (nb,)).copy()
        if np.any(self.joint_angle_std < 0) or self.root_jitter_std < 0 \
                or self.bone_length_ratio_jitter < 0:
            raise ValueError("standard deviations must be non-negative")
        lo, hi = self.root_orientation_range
        if lo > hi:
            raise ValueError("root_orientation_range must be ordered")

    @property
    def topology(self) -> SkeletonTopology:
        return self.tree.topology

    def to_json(self) -> dict:
        topo = self.tree.topology
        return {
            "topology": topo.to_json(),
            "bone_lengths": self.tree.bone_lengths.tolist(),
            "rest_directions": self.tree.rest_directions.tolist(),
            "joint_angle_mean": self.joint_angle_mean.tolist(),
            "joint_angle_std": self.joint_angle_std.tolist(),
            "root_orientation_range": list(self.root_orientation_range),
            "root_position": list(self.root_position),
            "root_jitter_std": self.root_jitter_std,
            "bone_length_ratio_jitter": self.bone_length_ratio_jitter,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PoseDistributionSpec":
        topo = SkeletonTopology.from_json(obj["topology"])
        tree = KinematicTree(topo, obj["bone_lengths"], obj["rest_directions"])
        return cls(
            tree,
            obj["joint_angle_mean"],
            obj["joint_angle_std"],
            tuple(obj.get("root_orientation_range", (0.0, 0.0))),
            tuple(obj.get("root_position", (0.5, 0.5))),
            float(obj.get("root_jitter_std", 0.0)),
            float(obj.get("bone_length_ratio_jitter", 0.0)),
        )


def default_source_spec(orientation_range=(-0.2, 0.2)) -> PoseDistributionSpec:
    """Upright standing figure with moderately varying limbs (image y points down)."""
    topo = default_topology()
    s = 1.0 / np.sqrt(2.0)
    # bone order follows default_topology().bones
    dirs = [
        (s, s), (-s, s),              # head -> shoulders
        (0, 1), (0, 1),               # left arm
        (0, 1), (0, 1),               # right arm
        (0, 1), (0, 1), (0, 1),       # left leg (shoulder -> hip -> knee -> ankle)
        (0, 1), (0, 1), (0, 1),       # right leg
    ]
    lengths = [0.12, 0.12, 0.15, 0.13, 0.15, 0.13, 0.27, 0.22, 0.22, 0.27, 0.22, 0.22]
    # positive angle rotates x toward y, i.e. clockwise on screen
    mean = [0.0, 0.0, -0.35, -0.2, 0.35, 0.2, 0.0, -0.1, 0.1, 0.0, 0.1, -0.1]
    std = [0.05, 0.05, 0.6, 0.5, 0.6, 0.5, 0.05, 0.2, 0.25, 0.05, 0.2, 0.25]
    tree = KinematicTree(topo, lengths, dirs)
    return PoseDistributionSpec(
        tree,
        mean,
        std,
        root_orientation_range=tuple(orientation_range),
        root_position=(0.5, 0.2),
        root_jitter_std=0.02,
        bone_length_ratio_jitter=0.05,
    )


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def forward_kinematics(spec: PoseDistributionSpec, root, root_angle, angles, lengths) -> np.ndarray:
    """Place joints given a root position, root orientation, per-bone angles and lengths."""
    topo = spec.topology
    coords = np.zeros((topo.m, 2))
    coords[topo.root] = root
    acc = np.zeros(topo.m)
    acc[topo.root] = root_angle
    for b in topo.bone_order():
        p, c = topo.bones[b]
        acc[c] = acc[p] + angles[b]
        coords[c] = coords[p] + lengths[b] * (_rot(acc[c]) @ spec.tree.rest_directions[b])
    return coords


def sample_pose(spec: PoseDistributionSpec, rng_seed=None, *, rng=None, margin: float = 0.1,
                fit: bool = True) -> np.ndarray:
    """Draw one pose from ``spec`` by forward kinematics, then fit it to the canvas."""
    rng = rng if rng is not None else np.random.default_rng(rng_seed)
    nb = len(spec.topology.bones)
    root = np.asarray(spec.root_position, dtype=np.float64) + spec.root_jitter_std * rng.standard_normal(2)
    lo, hi = spec.root_orientation_range
    root_angle = rng.uniform(lo, hi) if hi > lo else lo
    angles = spec.joint_angle_mean + spec.joint_angle_std * rng.standard_normal(nb)
    lengths = spec.tree.bone_lengths * np.exp(spec.bone_length_ratio_jitter * rng.standard_normal(nb))
    coords = forward_kinematics(spec, root, root_angle, angles, lengths)
    return fit_to_canvas(coords, margin) if fit else coords


def sample_poses(spec: PoseDistributionSpec, n: int, rng_seed, label: str | None = None) -> PoseSet:
    """``n`` independent poses; pose ``k`` uses the seed stream ``(rng_seed, k)``."""
    if n < 1:
        raise ValueError("n must be ≥ 1")
    coords = np.stack([
        sample_pose(spec, np.random.SeedSequence([int(rng_seed), k])) for k in range(n)
    ])
    return PoseSet(spec.topology, coords, [label] * n)


def _centroid(arr: np.ndarray) -> np.ndarray:
    return arr.mean(axis=0)


def rotate_about(pose, theta: float, pivot) -> np.ndarray:
    arr = np.asarray(pose, dtype=np.float64)
    pivot = np.asarray(pivot, dtype=np.float64)
    return (arr - pivot) @ _rot(theta).T + pivot


def apply_global_rotation(pose, theta: float, *, refit: bool = True, margin: float = 0.1) -> np.ndarray:
    """Rotate every joint by ``theta`` about the centroid, then re-fit to the canvas."""
    if not np.isfinite(theta):
        raise ValueError("theta must be finite")
    arr = np.asarray(pose, dtype=np.float64)
    out = rotate_about(arr, theta, _centroid(arr))
    return fit_to_canvas(out, margin) if refit else out


def apply_local_rotation(pose, topo: SkeletonTopology, subtree_root_joint: int, gamma: float) -> np.ndarray:
    """Rotate the joints strictly below ``subtree_root_joint`` by ``gamma`` about that joint.

    Rotated joints that would leave the canvas are clipped to ``[0, 1]``.
    """
    if subtree_root_joint == topo.root:
        raise ValueError("local rotation requires a proper subtree")
    if not 0 <= subtree_root_joint < topo.m:
        raise ValueError(f"joint {subtree_root_joint} out of range")
    moved = topo.descendants(subtree_root_joint)
    if not moved:
        raise ValueError(f"joint {subtree_root_joint} has no descendants")
    out = np.array(pose, dtype=np.float64)
    out[moved] = np.clip(rotate_about(out[moved], gamma, out[subtree_root_joint]), 0.0, 1.0)
    return out


def apply_scale(pose, eta: float) -> np.ndarray:
    """Scale about the centroid by ``eta``; no re-fit, result clipped to ``[0, 1]``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    arr = np.asarray(pose, dtype=np.float64)
    c = _centroid(arr)
    return np.clip((arr - c) * eta + c, 0.0, 1.0)


@dataclass
class ShiftSpec:
    """A randomized geometric shift.

    ``kind`` is one of ``global_rotation`` (``theta_range``), ``local_rotation``
    (``gamma_range`` about ``subtree_root_joint``), ``scale`` (union of
    ``eta_ranges``) or ``compose`` (``children`` applied in order).
    """

    kind: str
    theta_range: tuple[float, float] = (0.0, 0.0)
    gamma_range: tuple[float, float] = (0.0, 0.0)
    subtree_root_joint: int | None = None
    eta_ranges: list[tuple[float, float]] = field(default_factory=lambda: [(1.0, 1.0)])
    children: list["ShiftSpec"] = field(default_factory=list)

    KINDS = ("global_rotation", "local_rotation", "scale", "compose")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        for lo, hi in [self.theta_range, self.gamma_range, *self.eta_ranges]:
            if lo > hi:
                raise ValueError("shift ranges must be ordered")
        if self.kind == "local_rotation" and self.subtree_root_joint is None:
            raise ValueError("local_rotation needs subtree_root_joint")
        if self.kind == "scale" and any(lo <= 0 for lo, _ in self.eta_ranges):
            raise ValueError("scale factors must be positive")

    def validate_for(self, topo: SkeletonTopology) -> None:
        if self.kind == "local_rotation" and not 0 <= self.subtree_root_joint < topo.m:
            raise ValueError(f"subtree_root_joint {self.subtree_root_joint} out of range")
        for ch in self.children:
            ch.validate_for(topo)

    def apply(self, pose, topo: SkeletonTopology, rng: np.random.Generator) -> np.ndarray:
        """Draw one shift instance from the ranges and apply it."""
        if self.kind == "global_rotation":
            return apply_global_rotation(pose, _uniform(rng, self.theta_range))
        if self.kind == "local_rotation":
            return apply_local_rotation(pose, topo, self.subtree_root_joint, _uniform(rng, self.gamma_range))
        if self.kind == "scale":
            return apply_scale(pose, _uniform_union(rng, self.eta_ranges))
        out = np.asarray(pose, dtype=np.float64)
        for ch in self.children:
            out = ch.apply(out, topo, rng)
        return out

    def to_json(self) -> dict:
        obj = {"kind": self.kind}
        if self.kind == "global_rotation":
            obj["theta_range"] = list(self.theta_range)
        elif self.kind == "local_rotation":
            obj["gamma_range"] = list(self.gamma_range)
            obj["subtree_root_joint"] = self.subtree_root_joint
        elif self.kind == "scale":
            obj["eta_ranges"] = [list(r) for r in self.eta_ranges]
        else:
            obj["children"] = [c.to_json() for c in self.children]
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ShiftSpec":
        return cls(
            kind=obj["kind"],
            theta_range=tuple(obj.get("theta_range", (0.0, 0.0))),
            gamma_range=tuple(obj.get("gamma_range", (0.0, 0.0))),
            subtree_root_joint=obj.get("subtree_root_joint"),
            eta_ranges=[tuple(r) for r in obj.get("eta_ranges", [(1.0, 1.0)])],
            children=[cls.from_json(c) for c in obj.get("children", [])],
        )


def _uniform(rng, bounds) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _uniform_union(rng, ranges) -> float:
    """Uniform draw over a union of disjoint intervals (length-weighted)."""
    widths = np.array([hi - lo for lo, hi in ranges], dtype=np.float64)
    if widths.sum() == 0:
        return float(ranges[int(rng.integers(len(ranges)))][0])
    k = int(rng.choice(len(ranges), p=widths / widths.sum()))
    return _uniform(rng, ranges[k])


def global_rotation_shift(deg_lo: float = -45.0, deg_hi: float = 45.0) -> ShiftSpec:
    return ShiftSpec("global_rotation", theta_range=(np.deg2rad(deg_lo), np.deg2rad(deg_hi)))


def local_rotation_shift(joint: int = 7, deg_lo: float = 135.0, deg_hi: float = 225.0) -> ShiftSpec:
    """Default rotates the left leg (below ``l_hip``) of the default topology."""
    return ShiftSpec("local_rotation", gamma_range=(np.deg2rad(deg_lo), np.deg2rad(deg_hi)),
                     subtree_root_joint=joint)


def scale_shift(ranges=((0.7, 0.9), (1.1, 1.2))) -> ShiftSpec:
    return ShiftSpec("scale", eta_ranges=[tuple(r) for r in ranges])


def make_shifted_dataset(source: PoseDistributionSpec, shift: ShiftSpec, n: int, rng_seed,
                         label: str | None = None) -> PoseSet:
    """Sample ``n`` source poses and push each through a fresh shift instance."""
    if n < 1:
        raise ValueError("n must be ≥ 1")
    topo = source.topology
    shift.validate_for(topo)
    out = np.empty((n, topo.m, 2))
    for k in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), k]))
        out[k] = shift.apply(sample_pose(source, rng=rng), topo, rng)
    return PoseSet(topo, out, [label] * n)
