"""Source training, few-shot transfer-matrix calibration and target sampling."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .generator import Generator, TransferMatrix
from .metrics import median_bandwidth
from .pose import PoseSet, SkeletonTopology, pose_mixup, validate_pose
from .render import DegenerateHeatmapError, decode_softargmax, rasterize

log = logging.getLogger(__name__)


# -- features ------------------------------------------------------------

def feature_matrix(topo: SkeletonTopology, weights=(1.0, 1.0)) -> np.ndarray:
    """Linear map from flattened coordinates (2M) to [coords, bone vectors] (2M + 2(M-1))."""
    m = topo.m
    nb = len(topo.bones)
    mat = np.zeros((2 * m, 2 * m + 2 * nb))
    mat[:, :2 * m] = weights[0] * np.eye(2 * m)
    for b, (p, c) in enumerate(topo.bones):
        for ax in range(2):
            mat[2 * c + ax, 2 * m + 2 * b + ax] = weights[1]
            mat[2 * p + ax, 2 * m + 2 * b + ax] = -weights[1]
    return mat


class FeatureExtractor:
    """Keypoints plus bone vectors (child minus parent), both groups weighted."""

    def __init__(self, topo: SkeletonTopology, weights=(1.0, 1.0)):
        self.topology = topo
        self.weights = tuple(weights)
        self.matrix = feature_matrix(topo, weights)
        self._mat_t = Tensor(self.matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __call__(self, coords) -> np.ndarray:
        arr = np.asarray(coords.coords if isinstance(coords, PoseSet) else coords, dtype=np.float64)
        return arr.reshape(-1, 2 * self.topology.m) @ self.matrix

    def tensor(self, keypoints: Tensor) -> Tensor:
        """Features of a ``(B, M, 2)`` keypoint tensor."""
        flat = ad.reshape(keypoints, (keypoints.shape[0], 2 * self.topology.m))
        return ad.matmul(flat, self._mat_t)


# -- source training -----------------------------------------------------

@dataclass
class SourceTrainConfig:
    batch: int = 128
    iterations: int = 20000
    lr: float = 1e-3
    bandwidth_multipliers: tuple[float, ...] = (0.5, 1.0, 2.0)
    style_mixing: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.style_mixing <= 1.0:
            raise ValueError("style_mixing must be a probability")
        if self.batch < 4:
            raise ValueError("batch must be at least 4")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        self.bandwidth_multipliers = tuple(float(b) for b in self.bandwidth_multipliers)


def batch_bandwidths(fake: np.ndarray, real: np.ndarray, multipliers) -> list[float]:
    base = median_bandwidth(fake, real)
    return [m * base for m in multipliers]


def mmd2_tensor(fake: Tensor, real: np.ndarray, sigmas) -> Tensor:
    """Sum over bandwidths of the unbiased RBF MMD^2 between ``fake`` and ``real`` rows."""
    m, n = fake.shape[0], real.shape[0]
    pooled = ad.concat([fake, Tensor(real)], axis=0)
    d2 = ad.pairwise_sq_dists(pooled, pooled)
    w = np.empty((m + n, m + n))
    w[:m, :m] = 1.0 / (m * (m - 1))
    w[m:, m:] = 1.0 / (n * (n - 1))
    w[:m, m:] = w[m:, :m] = -1.0 / (m * n)
    np.fill_diagonal(w, 0.0)
    wt = Tensor(w)
    total = None
    for s in sigmas:
        k = ad.exp(ad.scale(d2, -1.0 / (2.0 * s * s)))
        term = ad.sum(ad.mul(k, wt))
        total = term if total is None else ad.add(total, term)
    return total


def mixed_codes(g: Generator, z: np.ndarray, rng: np.random.Generator, prob: float) -> list[Tensor]:
    """Style codes where a fraction ``prob`` of rows switch to a second latent at a random layer.

    Row ``i`` uses ``z[i]`` for layers below its crossover point and a fresh latent from there on,
    so every layer has to carry usable structure on its own.
    """
    codes = g.style_codes(z)
    if prob <= 0.0:
        return codes
    n_layers = g.config.n_layers
    batch = z.shape[0]
    other = g.style_codes(rng.standard_normal(z.shape))
    cross = rng.integers(1, n_layers, size=batch)
    cross[rng.random(batch) >= prob] = n_layers
    out = []
    for l in range(n_layers):
        keep = (l < cross).astype(np.float64)[:, None] * np.ones((1, g.config.d_s))
        if keep.all():
            out.append(codes[l])
        else:
            out.append(ad.add(ad.mul(codes[l], Tensor(keep)), ad.mul(other[l], Tensor(1.0 - keep))))
    return out


def train_source(g: Generator, source: PoseSet, cfg: SourceTrainConfig, callback=None):
    """Fit the generator to ``source`` by minimizing MMD^2 between feature batches.

    Returns ``(g, losses)``; ``g`` is trained in place.
    """
    if len(source) == 0:
        raise ValueError("empty source pose set")
    if source.topology.m != g.config.m:
        raise ValueError("source topology does not match the generator joint count")
    feats = FeatureExtractor(source.topology)
    real_all = feats(source)
    rng = np.random.default_rng(cfg.seed)
    g.set_trainable(True)
    params = g.parameters()
    opt = ad.Adam(params, cfg.lr)
    losses = []
    try:
        for it in range(cfg.iterations):
            z = rng.standard_normal((cfg.batch, g.config.d_z))
            idx = rng.choice(len(source), cfg.batch, replace=len(source) < cfg.batch)
            real = real_all[idx]
            codes = mixed_codes(g, z, rng, cfg.style_mixing)
            fake = feats.tensor(g.keypoints(g.synthesize(codes)))
            sigmas = batch_bandwidths(fake.data, real, cfg.bandwidth_multipliers)
            loss = mmd2_tensor(fake, real, sigmas)
            value = float(loss.data)
            if not np.isfinite(value):
                raise ad.NumericalError(f"non-finite source loss at iteration {it}")
            opt.step(ad.grad(loss, params))
            losses.append(value)
            if callback is not None:
                callback(it, value)
    except ad.NumericalError as exc:
        raise ad.NumericalError(f"source training failed at iteration {len(losses)}: {exc}") from exc
    finally:
        g.set_trainable(False)
    return g, losses


# -- adaptation ----------------------------------------------------------

@dataclass
class AdaptConfig:
    layers: tuple[int, ...] | str = (3,)
    shots: int = 30
    mixup_size: int = 1000
    lr: float = 0.1
    batch: int = 128
    iterations: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    mixup: bool = True
    linear: bool = True
    rank: int | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.layers, str):
            if self.layers.lower() != "all":
                raise ValueError("layers must be a list of indices or 'all'")
            self.layers = "all"
        else:
            self.layers = tuple(int(l) for l in self.layers)
        if self.lr <= 0 or self.batch < 1 or self.iterations < 0:
            raise ValueError("invalid optimizer settings")
        if self.mixup and self.shots < 2:
            raise ValueError("mixup needs at least two shots")

    @property
    def mode(self) -> str:
        if not self.linear:
            return "nonlinear"
        return "lowrank" if self.rank else "linear"

    def layer_set(self, n_layers: int) -> tuple[int, ...]:
        layers = tuple(range(1, n_layers + 1)) if self.layers == "all" else self.layers
        if not layers or min(layers) < 1 or max(layers) > n_layers:
            raise ValueError(f"layer set {layers} outside [1, {n_layers}]")
        return layers

    def to_json(self) -> dict:
        out = asdict(self)
        out["layers"] = self.layers if self.layers == "all" else list(self.layers)
        out["betas"] = list(self.betas)
        return out


def build_guidance(shots: PoseSet, cfg: AdaptConfig, seed, d_z: int):
    """Guidance poses (shots, plus mixup poses when enabled) and one fixed latent per pose."""
    if cfg.mixup:
        ss = np.random.SeedSequence(int(seed)).spawn(2)
        guidance = shots.concat(pose_mixup(shots, cfg.mixup_size, ss[0]))
        zrng = np.random.default_rng(ss[1])
    else:
        if len(shots) < 1:
            raise ValueError("need at least one guidance pose")
        guidance = shots
        zrng = np.random.default_rng(np.random.SeedSequence(int(seed)).spawn(2)[1])
    latents = zrng.standard_normal((len(guidance), d_z))
    return guidance, latents


def guidance_loss(g: Generator, tau: TransferMatrix | None, feats: FeatureExtractor,
                  z: np.ndarray, target_feats: np.ndarray) -> Tensor:
    """Mean over the batch of squared feature distance between generated and guidance poses."""
    pred = feats.tensor(g.keypoints(g.maps_with_transfer(tau, z)))
    return ad.scale(ad.sq_error(pred, Tensor(target_feats)), 1.0 / len(z))


def full_guidance_loss(g, tau, feats, latents, target_feats, chunk: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(latents), chunk):
        z = latents[i:i + chunk]
        total += float(guidance_loss(g, tau, feats, z, target_feats[i:i + chunk]).data) * len(z)
    return total / len(latents)


def adapt(g: Generator, guidance: PoseSet, latents: np.ndarray, cfg: AdaptConfig,
          callback=None) -> tuple[TransferMatrix, list[float]]:
    """Calibrate a transfer matrix on the frozen generator; returns ``(tau, losses)``."""
    if len(guidance) != len(latents):
        raise ValueError("need exactly one latent per guidance pose")
    layers = cfg.layer_set(g.config.n_layers)
    tau = TransferMatrix(g.config, layers, cfg.mode, cfg.rank or 8, seed=cfg.seed)
    g.set_trainable(False)
    feats = FeatureExtractor(guidance.topology)
    target = feats(guidance)
    params = tau.parameters()
    opt = ad.Adam(params, cfg.lr, cfg.betas)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 1]))
    n = len(guidance)
    losses = []
    for it in range(cfg.iterations):
        idx = rng.choice(n, min(cfg.batch, n), replace=False)
        try:
            loss = guidance_loss(g, tau, feats, latents[idx], target[idx])
        except ad.NumericalError as exc:
            raise ad.NumericalError(f"adaptation failed at iteration {it}: {exc}") from exc
        opt.step(ad.grad(loss, params))
        losses.append(float(loss.data))
        if callback is not None:
            callback(it, losses[-1])
    return tau, losses


def layer_sweep(g: Generator, guidance: PoseSet, latents: np.ndarray, layer_sets, cfg: AdaptConfig,
                csv_path=None) -> list[tuple[tuple[int, ...], float]]:
    """Adapt once per candidate layer set and report the final full-guidance loss."""
    layer_sets = [tuple(ls) if not isinstance(ls, int) else (ls,) for ls in layer_sets]
    if not layer_sets:
        raise ValueError("layers_to_try must be non-empty")
    feats = FeatureExtractor(guidance.topology)
    target = feats(guidance)
    start = full_guidance_loss(g, None, feats, latents, target)
    results = []
    for ls in layer_sets:
        arm = AdaptConfig(**{**asdict(cfg), "layers": ls})
        tau, _ = adapt(g, guidance, latents, arm)
        results.append((ls, full_guidance_loss(g, tau, feats, latents, target)))
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["layers", "initial_loss", "final_loss"])
            for ls, loss in results:
                w.writerow(["+".join(map(str, ls)), repr(start), repr(loss)])
    return results


# -- sampling ------------------------------------------------------------

def sample_target(g: Generator, tau: TransferMatrix | None, n: int, seed, chunk: int = 1024,
                  topology: SkeletonTopology | None = None, rasters: bool = False,
                  width: int = 64, height: int = 64):
    """Draw ``n`` latents, generate heatmaps, decode keypoints (and optionally re-render).

    Returns a ``PoseSet`` (and a list of clean rasters when ``rasters`` is true).
    Samples whose heatmaps cannot be decoded are replaced, up to ``10 * n`` retries.
    """
    if n < 1:
        raise ValueError("n must be ≥ 1")
    from .pose import default_topology

    topo = topology or default_topology()
    if topo.m != g.config.m:
        raise ValueError("topology does not match the generator joint count")
    rng = np.random.default_rng(seed)
    cfg = g.config
    poses: list[np.ndarray] = []
    retries = 0
    while len(poses) < n:
        k = min(chunk, n - len(poses))
        z = rng.standard_normal((k, cfg.d_z))
        maps = g.maps_with_transfer(tau, z).data.reshape(k, cfg.m, cfg.res, cfg.res)
        for stack in maps:
            try:
                pose = decode_softargmax(stack)
            except DegenerateHeatmapError:
                pose = None
            if pose is None or validate_pose(pose, topo) is not None:
                retries += 1
                log.warning("skipping undecodable sample (%d retries so far)", retries)
                if retries > 10 * n:
                    raise RuntimeError("too many degenerate samples")
                continue
            poses.append(pose)
    out = PoseSet(topo, np.stack(poses[:n]), ["sampled"] * n)
    if rasters:
        return out, [rasterize(p, topo, width, height) for p in out.coords]
    return out
