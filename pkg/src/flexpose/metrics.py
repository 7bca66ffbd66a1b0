"""Distribution distances (MMD^2, Frechet distance), PCK/MSE and a PCA embedding."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pose import PoseSet


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    metric: str
    value: float
    params: dict = field(default_factory=dict)
    n_x: int = 0
    n_y: int = 0
    seed: int | None = None

    def row(self) -> dict:
        return {"metric": self.metric, "value": repr(float(self.value)),
                "params": json.dumps(self.params, sort_keys=True),
                "n_x": self.n_x, "n_y": self.n_y, "seed": "" if self.seed is None else self.seed}


def write_reports_csv(reports: list[MetricReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["metric", "value", "params", "n_x", "n_y", "seed"])
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_reports_json(reports: list[MetricReport], path) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _samples(x, name: str) -> np.ndarray:
    arr = np.asarray(x.flat() if isinstance(x, PoseSet) else x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or len(arr) < 1:
        raise MetricError(f"{name} must be a non-empty (n, d) sample matrix")
    if not np.isfinite(arr).all():
        raise MetricError(f"{name} contains non-finite entries")
    return arr


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.einsum("ij,ij->i", a, a)[:, None] + np.einsum("ij,ij->i", b, b)[None, :]
    d2 -= 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0, out=d2)


def _kernel_sum(a: np.ndarray, b: np.ndarray, sigma: float, block: int, same: bool) -> float:
    """Sum of RBF kernel values over all pairs (excluding the diagonal if ``same``)."""
    total = 0.0
    gamma = 1.0 / (2.0 * sigma * sigma)
    for i in range(0, len(a), block):
        ai = a[i:i + block]
        for j in range(0, len(b), block):
            k = np.exp(-gamma * _sq_dists(ai, b[j:j + block]))
            if same and i == j:
                np.fill_diagonal(k, 0.0)
            total += float(k.sum())
    return total


def mmd2(x, y, sigma: float, block: int = 512) -> float:
    """Unbiased MMD^2 with the RBF kernel ``exp(-|a-b|^2 / (2 sigma^2))``.

    Computed blockwise so large sample sets never materialize the full kernel.
    The estimate can be slightly negative.
    """
    x, y = _samples(x, "X"), _samples(y, "Y")
    if len(x) < 2 or len(y) < 2:
        raise MetricError("unbiased MMD needs ≥ 2 samples")
    if x.shape[1] != y.shape[1]:
        raise MetricError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if not sigma > 0:
        raise MetricError("sigma must be positive")
    # canonical argument order makes the result bit-identical under swapping X and Y
    if (len(y), y.tobytes()) < (len(x), x.tobytes()):
        x, y = y, x
    center = np.concatenate([x, y]).mean(axis=0)
    x, y = x - center, y - center
    m, n = len(x), len(y)
    kxx = _kernel_sum(x, x, sigma, block, True) / (m * (m - 1))
    kyy = _kernel_sum(y, y, sigma, block, True) / (n * (n - 1))
    kxy = _kernel_sum(x, y, sigma, block, False) / (m * n)
    return kxx + kyy - 2.0 * kxy


def mmd2_naive(x, y, sigma: float) -> float:
    """Plain double loop over pairs; reference implementation for tests."""
    x, y = _samples(x, "X"), _samples(y, "Y")
    m, n = len(x), len(y)

    def k(a, b):
        d = a - b
        return np.exp(-float(d @ d) / (2.0 * sigma * sigma))

    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j)
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j)
    sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n))
    return sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2.0 * sxy / (m * n)


def median_bandwidth(x, y=None, max_points: int = 2000, seed: int = 0) -> float:
    """Median pairwise distance of the pooled samples divided by sqrt(2).

    Exact up to ``max_points`` pooled rows; above that a fixed-seed subsample is used.
    """
    pooled = _samples(x, "X")
    if y is not None:
        pooled = np.concatenate([pooled, _samples(y, "Y")])
    if len(pooled) < 2:
        raise MetricError("median bandwidth needs at least two points")
    if len(pooled) > max_points:
        idx = np.random.default_rng(seed).choice(len(pooled), max_points, replace=False)
        pooled = pooled[np.sort(idx)]
    iu = np.triu_indices(len(pooled), k=1)
    dists = np.sqrt(_sq_dists(pooled, pooled)[iu])
    med = float(np.median(dists))
    if med <= 0.0:
        raise MetricError("zero median distance")
    return med / np.sqrt(2.0)


FD_RIDGE = 1e-9


def frechet_from_moments(mu_x, cov_x, mu_y, cov_y, ridge: float = FD_RIDGE) -> float:
    """``|mu_x - mu_y|^2 + Tr(Sx + Sy - 2 (Sx Sy)^{1/2})`` via a symmetric eigen-decomposition."""
    mu_x, mu_y = np.atleast_1d(mu_x).astype(np.float64), np.atleast_1d(mu_y).astype(np.float64)
    d = len(mu_x)
    cov_x = np.asarray(cov_x, dtype=np.float64).reshape(d, d) + ridge * np.eye(d)
    cov_y = np.asarray(cov_y, dtype=np.float64).reshape(d, d) + ridge * np.eye(d)
    if len(mu_y) != d or cov_y.shape != (d, d):
        raise MetricError("dimension mismatch")
    ex, vx = np.linalg.eigh(cov_x)
    if ex.min() < -1e-10:
        raise MetricError("covariance square root failed")
    root_x = (vx * np.sqrt(np.clip(ex, 0.0, None))) @ vx.T
    inner = root_x @ cov_y @ root_x
    ev = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if ev.min() < -1e-10:
        raise MetricError("covariance square root failed")
    tr_sqrt = float(np.sqrt(np.clip(ev, 0.0, None)).sum())
    diff = mu_x - mu_y
    return float(diff @ diff + np.trace(cov_x) + np.trace(cov_y) - 2.0 * tr_sqrt)


def frechet_distance(x, y) -> float:
    """Frechet distance between Gaussian fits (unbiased covariance) of two sample sets."""
    x, y = _samples(x, "X"), _samples(y, "Y")
    if x.shape[1] != y.shape[1]:
        raise MetricError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if len(x) < 2 or len(y) < 2:
        raise MetricError("need at least two samples per side for a covariance")
    cx = np.atleast_2d(np.cov(x, rowvar=False))
    cy = np.atleast_2d(np.cov(y, rowvar=False))
    return frechet_from_moments(x.mean(axis=0), cx, y.mean(axis=0), cy)


def _aligned(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = pred.coords if isinstance(pred, PoseSet) else np.asarray(pred, dtype=np.float64)
    g = gt.coords if isinstance(gt, PoseSet) else np.asarray(gt, dtype=np.float64)
    if isinstance(pred, PoseSet) and isinstance(gt, PoseSet) and pred.topology != gt.topology:
        raise MetricError("topology mismatch")
    if p.shape != g.shape:
        raise MetricError(f"length mismatch: {p.shape} vs {g.shape}")
    return p, g


def pck(pred, gt, rho: float) -> float:
    """Fraction of joints within ``rho`` (canvas-width units) of ground truth; ties count."""
    if not rho > 0:
        raise MetricError("rho must be positive")
    p, g = _aligned(pred, gt)
    dist = np.linalg.norm(p - g, axis=-1)
    return float(np.mean(dist <= rho))


def mse(pred, gt, canvas_px: int) -> float:
    """Mean squared joint distance in pixels (coordinates scaled by ``canvas_px - 1``)."""
    if not canvas_px > 0:
        raise MetricError("canvas_px must be positive")
    p, g = _aligned(pred, gt)
    d = (p - g) * (canvas_px - 1)
    return float(np.mean(np.sum(d * d, axis=-1)))


def _top_component(cov: np.ndarray, tol: float, max_iter: int = 10_000) -> np.ndarray:
    d = len(cov)
    v = np.ones(d) / np.sqrt(d)
    # escape an all-ones start that happens to be orthogonal to the top direction
    v = v + np.arange(d) / (d * d * 10.0)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return v
        w /= nrm
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            v = w
            break
        v = w
    k = int(np.argmax(np.abs(v)))
    return v if v[k] > 0 else -v


def pca_embed(sets, tol: float = 1e-10) -> tuple[list[np.ndarray], np.ndarray]:
    """Project several sample sets onto the top two principal directions of their union.

    Returns per-set ``(n_i, 2)`` coordinates and the ``(2, d)`` component matrix.
    Each component's largest-magnitude loading is made positive.
    """
    mats = [_samples(s, f"set {i}") for i, s in enumerate(sets)]
    pooled = np.concatenate(mats)
    if len(pooled) < 3:
        raise MetricError("need at least three pooled samples")
    mu = pooled.mean(axis=0)
    xc = pooled - mu
    cov = xc.T @ xc / (len(pooled) - 1)
    if np.allclose(cov, 0.0):
        raise MetricError("rank-0 data")
    c1 = _top_component(cov, tol)
    deflated = cov - (c1 @ cov @ c1) * np.outer(c1, c1)
    if cov.shape[0] > 1:
        if np.abs(deflated).max() <= tol * np.abs(cov).max():
            # rank-1 data: any direction orthogonal to c1 carries zero variance
            c2 = np.eye(len(c1))[int(np.argmin(np.abs(c1)))]
        else:
            c2 = _top_component(deflated, tol)
        for _ in range(2):
            c2 = c2 - (c2 @ c1) * c1
            c2 /= np.linalg.norm(c2)
        k = int(np.argmax(np.abs(c2)))
        if c2[k] < 0:
            c2 = -c2
    else:
        c2 = np.zeros_like(c1)
    comps = np.stack([c1, c2])
    return [(m - mu) @ comps.T for m in mats], comps


def write_embedding_csv(points: list[np.ndarray], labels: list[str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "pc1", "pc2"])
        for lab, pts in zip(labels, points):
            for a, b in pts:
                w.writerow([lab, repr(float(a)), repr(float(b))])
