"""Pose data model, validation, JSON-lines I/O and pose-mixup."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PoseFormatError(ValueError):
    """Raised for malformed pose files or topology mismatches."""


@dataclass(frozen=True)
class SkeletonTopology:
    joints: tuple[str, ...]
    bones: tuple[tuple[int, int], ...]
    root: int
    colors: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        m = len(self.joints)
        if m < 2:
            raise ValueError("topology needs at least two joints")
        if len(self.bones) != m - 1:
            raise ValueError(f"expected {m - 1} bones for {m} joints, got {len(self.bones)}")
        if not 0 <= self.root < m:
            raise ValueError(f"root index {self.root} out of range")
        if len(self.colors) != len(self.bones):
            raise ValueError("need exactly one color per bone")
        if len(set(self.colors)) != len(self.colors):
            raise ValueError("bone colors must be pairwise distinct")
        parent = list(range(m))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for p, c in self.bones:
            if not (0 <= p < m and 0 <= c < m):
                raise ValueError(f"bone ({p}, {c}) has an index out of range")
            rp, rc = find(p), find(c)
            if rp == rc:
                raise ValueError(f"bone ({p}, {c}) closes a cycle")
            parent[rp] = rc
        # m-1 edges without a cycle is a spanning tree; still require the
        # edges to point away from the root.
        if any(c == self.root for _, c in self.bones):
            raise ValueError("root joint cannot be a bone child")
        if len({c for _, c in self.bones}) != m - 1:
            raise ValueError("every non-root joint needs exactly one parent")

    @property
    def m(self) -> int:
        return len(self.joints)

    def parents(self) -> list[int]:
        """Parent index per joint (-1 for the root)."""
        par = [-1] * self.m
        for p, c in self.bones:
            par[c] = p
        return par

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(self.m)]
        for p, c in self.bones:
            kids[p].append(c)
        return kids

    def descendants(self, joint: int) -> list[int]:
        """Joints strictly below ``joint`` in the tree, depth-first."""
        kids = self.children()
        out, stack = [], list(reversed(kids[joint]))
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(reversed(kids[j]))
        return out

    def bone_order(self) -> list[int]:
        """Bone indices ordered so that every parent is placed before its children."""
        kids = self.children()
        by_child = {c: b for b, (_, c) in enumerate(self.bones)}
        order, stack = [], [self.root]
        while stack:
            j = stack.pop()
            for c in reversed(kids[j]):
                order.append(by_child[c])
                stack.append(c)
        return order

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "joints": list(self.joints),
            "bones": [list(b) for b in self.bones],
            "root": self.root,
            "colors": [list(c) for c in self.colors],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SkeletonTopology":
        topo = cls(
            joints=tuple(obj["joints"]),
            bones=tuple((int(p), int(c)) for p, c in obj["bones"]),
            root=int(obj["root"]),
            colors=tuple(tuple(int(v) for v in c) for c in obj["colors"]),
        )
        if int(obj.get("m", topo.m)) != topo.m:
            raise PoseFormatError(f"header m={obj['m']} but {topo.m} joint names")
        return topo


def default_topology() -> SkeletonTopology:
    """13-joint human skeleton rooted at the head.

    Joint order: head, shoulders, elbows, wrists, hips, knees, ankles
    (left before right).
    """
    joints = (
        "head",
        "l_shoulder", "r_shoulder",
        "l_elbow", "r_elbow",
        "l_wrist", "r_wrist",
        "l_hip", "r_hip",
        "l_knee", "r_knee",
        "l_ankle", "r_ankle",
    )
    bones = (
        (0, 1), (0, 2),
        (1, 3), (3, 5),
        (2, 4), (4, 6),
        (1, 7), (7, 9), (9, 11),
        (2, 8), (8, 10), (10, 12),
    )
    colors = (
        (255, 0, 0), (255, 128, 0),
        (255, 255, 0), (128, 255, 0),
        (0, 255, 0), (0, 255, 128),
        (0, 255, 255), (0, 128, 255), (0, 0, 255),
        (128, 0, 255), (255, 0, 255), (255, 0, 128),
    )
    return SkeletonTopology(joints, bones, 0, colors)


@dataclass
class PoseSet:
    """An ordered collection of poses sharing one topology.

    ``coords`` has shape ``(n, M, 2)`` in normalized canvas units.
    """

    topology: SkeletonTopology
    coords: np.ndarray
    labels: list[str | None] = field(default_factory=list)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, self.topology.m, 2)
        if not self.labels:
            self.labels = [None] * len(self.coords)
        if len(self.labels) != len(self.coords):
            raise ValueError("one label slot per pose is required")

    def __len__(self) -> int:
        return len(self.coords)

    def __getitem__(self, i) -> np.ndarray:
        return self.coords[i]

    def flat(self) -> np.ndarray:
        """Poses as an ``(n, 2M)`` sample matrix."""
        return self.coords.reshape(len(self.coords), -1)

    def subset(self, idx) -> "PoseSet":
        idx = np.asarray(idx, dtype=int)
        return PoseSet(self.topology, self.coords[idx].copy(), [self.labels[i] for i in idx])

    def concat(self, other: "PoseSet") -> "PoseSet":
        if other.topology != self.topology:
            raise ValueError("cannot concatenate pose sets with different topologies")
        return PoseSet(
            self.topology,
            np.concatenate([self.coords, other.coords]),
            self.labels + other.labels,
        )


def validate_pose(pose, topo: SkeletonTopology) -> str | None:
    """Return ``None`` if the pose is valid, otherwise a short violation message."""
    arr = np.asarray(pose, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        return "coords must be (M, 2) pairs"
    if arr.shape[0] != topo.m:
        return "length mismatch"
    if not np.all(np.isfinite(arr)):
        return "non-finite coordinate"
    if arr.min() < 0.0 or arr.max() > 1.0:
        return "coordinate outside [0, 1]"
    return None


def _fmt(v: float) -> str:
    return "%.17g" % v


def save_poses(poses: PoseSet, path) -> None:
    """Write a pose set as JSON lines: topology header, then one record per pose."""
    path = Path(path)
    lines = [json.dumps(poses.topology.to_json(), separators=(",", ":"))]
    for coords, label in zip(poses.coords, poses.labels):
        pairs = ",".join(f"[{_fmt(x)},{_fmt(y)}]" for x, y in coords)
        rec = '{"coords":[' + pairs + "]"
        if label is not None:
            rec += ',"label":' + json.dumps(label)
        lines.append(rec + "}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_poses(path) -> PoseSet:
    """Read a JSON-lines pose file written by :func:`save_poses`."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise PoseFormatError(f"{path}:1: missing topology header")
        try:
            topo = SkeletonTopology.from_json(json.loads(header))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise PoseFormatError(f"{path}:1: bad topology header: {exc}") from exc
        coords, labels = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                arr = np.array(rec["coords"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PoseFormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if arr.shape != (topo.m, 2):
                raise PoseFormatError(
                    f"{path}:{lineno}: record has {len(arr)} pairs, header says m={topo.m}"
                )
            coords.append(arr)
            labels.append(rec.get("label"))
    arr = np.stack(coords) if coords else np.zeros((0, topo.m, 2))
    return PoseSet(topo, arr, labels)


def pose_mixup(poses: PoseSet, count: int, rng_seed=None, *, rng=None) -> PoseSet:
    """Pose-mixup: convex combinations of corresponding joints of two guidance poses.

    Each output is ``lam * y_i + (1 - lam) * y_j`` with ``lam ~ U[0, 1]`` and an
    ordered pair ``i != j`` drawn uniformly. Pass ``rng`` to inject a generator.
    """
    n = len(poses)
    if n < 2:
        raise ValueError("mixup needs at least two guidance poses")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(rng_seed)
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    j = j + (j >= i)  # uniform over j != i
    lam = rng.random(count)
    yi, yj = poses.coords[i], poses.coords[j]
    mixed = lam[:, None, None] * yi + (1.0 - lam[:, None, None]) * yj
    # rounding can leave the parents' hull by an ulp
    mixed = np.clip(mixed, np.minimum(yi, yj), np.maximum(yi, yj))
    return PoseSet(poses.topology, mixed, ["mixup"] * count)


def fit_to_canvas(pose, margin: float = 0.1, *, force: bool = True) -> np.ndarray:
    """Uniformly scale and translate a pose so its bounding box fits ``[margin, 1-margin]^2``.

    The longer bounding-box side is mapped to ``1 - 2*margin`` and the box is
    centered on the canvas. With ``force=False`` a pose already inside the
    target square is returned unchanged.
    """
    if not 0.0 <= margin < 0.5:
        raise ValueError("margin must be in [0, 0.5)")
    arr = np.asarray(pose, dtype=np.float64)
    lo, hi = arr.min(axis=0), arr.max(axis=0)
    if not force and lo.min() >= margin and hi.max() <= 1.0 - margin:
        return arr.copy()
    extent = float((hi - lo).max())
    center = 0.5 * (lo + hi)
    if extent == 0.0 or not math.isfinite(extent):
        return np.full_like(arr, 0.5)
    scale = (1.0 - 2.0 * margin) / extent
    out = (arr - center) * scale + 0.5
    return np.clip(out, 0.0, 1.0)
