"""Trained keypoint regressor: stick-figure raster -> per-joint heatmaps -> soft-argmax."""

from __future__ import annotations

import io
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .pose import PoseSet, SkeletonTopology
from .render import JOINT_COLOR, rasterize

log = logging.getLogger(__name__)


@dataclass
class BetaTrainConfig:
    epochs: int = 12
    batch: int = 64
    lr: float = 1e-3
    hidden: int = 512
    res: int = 16   # heatmap resolution
    pool: int = 4   # input average-pool factor

    def __post_init__(self):
        if min(self.epochs, self.batch, self.hidden, self.res, self.pool) < 1:
            raise ValueError("beta training sizes must be positive")
        if self.res < 2:
            raise ValueError("heatmap resolution must be at least 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def color_planes(img: np.ndarray, topo: SkeletonTopology, pool: int) -> np.ndarray:
    """One mask per bone color plus one for joint marks, average-pooled by ``pool``.

    Works on one ``(H, W, 3)`` raster or a batch ``(B, H, W, 3)``; returns flat features.
    """
    img = np.asarray(img)
    single = img.ndim == 3
    if single:
        img = img[None]
    b, h, w, _ = img.shape
    if h % pool or w % pool:
        raise ValueError(f"raster {w}x{h} not divisible by pool factor {pool}")
    palette = np.array(list(topo.colors) + [JOINT_COLOR], dtype=np.uint8)
    planes = (img[:, None] == palette[None, :, None, None, :]).all(-1).astype(np.float64)
    pooled = planes.reshape(b, len(palette), h // pool, pool, w // pool, pool).mean(axis=(3, 5))
    out = pooled.reshape(b, -1)
    return out[0] if single else out


class BetaRegressor:
    """Two-layer network from color planes to ``M`` softmax maps, decoded by soft-argmax."""

    def __init__(self, topo: SkeletonTopology, width: int, height: int, cfg: BetaTrainConfig, seed=0):
        self.topology = topo
        self.width, self.height = width, height
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d_in = (len(topo.colors) + 1) * (width // cfg.pool) * (height // cfg.pool)
        d_out = topo.m * cfg.res * cfg.res
        self.params = {
            "w1": ad.parameter(rng.standard_normal((d_in, cfg.hidden)) / np.sqrt(d_in)),
            "b1": ad.parameter(np.zeros(cfg.hidden)),
            # small output weights: maps start near uniform so early gradients are smooth
            "w2": ad.parameter(0.1 * rng.standard_normal((cfg.hidden, d_out)) / np.sqrt(cfg.hidden)),
            "b2": ad.parameter(np.zeros(d_out)),
        }
        ax = np.arange(cfg.res, dtype=np.float64) / (cfg.res - 1)
        yy, xx = np.meshgrid(ax, ax, indexing="ij")
        self._grid = Tensor(np.stack([xx.ravel(), yy.ravel()], axis=1))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def features(self, rasters) -> np.ndarray:
        return color_planes(rasters, self.topology, self.cfg.pool)

    def forward(self, feats: np.ndarray) -> Tensor:
        p = self.params
        h = ad.leaky_relu(ad.linear(Tensor(feats), p["w1"], p["b1"]))
        logits = ad.linear(h, p["w2"], p["b2"])
        maps = ad.softmax(ad.reshape(logits, (feats.shape[0], self.topology.m, self.cfg.res ** 2)))
        return ad.matmul(maps, self._grid)

    def predict(self, rasters, chunk: int = 512) -> np.ndarray:
        """Keypoints ``(B, M, 2)`` for a batch of rasters (or ``(M, 2)`` for one)."""
        rasters = np.asarray(rasters)
        single = rasters.ndim == 3
        if single:
            rasters = rasters[None]
        out = [self.forward(self.features(rasters[i:i + chunk])).data
               for i in range(0, len(rasters), chunk)]
        res = np.concatenate(out, axis=0)
        return res[0] if single else res

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, **self.state())
        return buf.getvalue()

    def config_json(self) -> dict:
        return {"width": self.width, "height": self.height, "cfg": asdict(self.cfg),
                "topology": self.topology.to_json()}


def rec_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over poses of the summed squared keypoint error."""
    diff = ad.sub(pred, Tensor(target))
    return ad.mean(ad.sum(ad.mul(diff, diff), axis=(1, 2)))


def train_beta(poses: PoseSet, width: int = 64, height: int = 64, cfg: BetaTrainConfig | None = None,
               seed=0, callback=None) -> tuple[BetaRegressor, list[float]]:
    """Fit a regressor on rasterized ``poses``; returns it and the mean loss per epoch."""
    cfg = cfg or BetaTrainConfig()
    if len(poses) < 100:
        raise ValueError("train_beta needs at least 100 poses")
    net = BetaRegressor(poses.topology, width, height, cfg, seed)
    rasters = np.stack([rasterize(p, poses.topology, width, height) for p in poses.coords])
    feats = net.features(rasters)
    targets = poses.coords
    rng = np.random.default_rng(seed)
    params = net.parameters()
    opt = ad.Adam(params, cfg.lr)
    history = []
    it = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(poses))
        total = 0.0
        for start in range(0, len(perm), cfg.batch):
            idx = perm[start:start + cfg.batch]
            try:
                loss = rec_loss(net.forward(feats[idx]), targets[idx])
            except ad.NumericalError as exc:
                raise ad.NumericalError(f"beta training diverged at iteration {it}: {exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise ad.NumericalError(f"beta training diverged at iteration {it}")
            opt.step(ad.grad(loss, params))
            total += value * len(idx)
            it += 1
        history.append(total / len(poses))
        log.info("beta epoch %d loss %.6g", epoch, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    return net, history
