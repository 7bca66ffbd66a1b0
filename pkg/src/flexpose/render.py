"""Skeleton rasterization (alpha), heatmaps and keypoint recovery (beta)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .pose import PoseSet, SkeletonTopology

JOINT_COLOR = (255, 255, 255)


class DegenerateHeatmapError(ValueError):
    pass


def to_pixels(coord: float, size: int) -> int:
    """Normalized coordinate to pixel index, rounding half up."""
    return int(np.floor(coord * (size - 1) + 0.5))


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer line pixels from ``(x0, y0)`` to ``(x1, y1)`` inclusive."""
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize(pose, topo: SkeletonTopology, width: int = 64, height: int = 64,
              grayscale: bool = False) -> np.ndarray:
    """Draw a stick figure: one Bresenham line per bone in its color, 2x2 white joint marks.

    Returns an ``(H, W, 3)`` uint8 array on a black background.
    """
    if width < 8 or height < 8:
        raise ValueError("raster must be at least 8x8")
    arr = np.clip(np.asarray(pose, dtype=np.float64), 0.0, 1.0)
    img = np.zeros((height, width, 3), dtype=np.uint8)
    px = [(to_pixels(x, width), to_pixels(y, height)) for x, y in arr]
    for (p, c), color in zip(topo.bones, topo.colors):
        if grayscale:
            color = (255, 255, 255)
        for x, y in bresenham(*px[p], *px[c]):
            img[y, x] = color
    for x, y in px:
        img[y:y + 2, x:x + 2] = JOINT_COLOR
    return img


def render_heatmaps(pose, res: int = 32, sigma: float = 1.5) -> np.ndarray:
    """Normalized isotropic Gaussian bump per joint, shape ``(M, res, res)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    arr = np.asarray(pose, dtype=np.float64) * (res - 1)
    ax = np.arange(res, dtype=np.float64)
    gx = np.exp(-((ax[None, :] - arr[:, :1]) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((ax[None, :] - arr[:, 1:]) ** 2) / (2 * sigma * sigma))
    maps = gy[:, :, None] * gx[:, None, :]
    return maps / maps.sum(axis=(1, 2), keepdims=True)


def decode_softargmax(stack) -> np.ndarray:
    """Expected pixel position under each (normalized) map, in canvas units.

    Accepts ``(M, R, R)`` or a batch ``(B, M, R, R)``.
    """
    maps = np.asarray(stack, dtype=np.float64)
    res = maps.shape[-1]
    if maps.shape[-2] != res:
        raise ValueError("heatmaps must be square")
    mass = maps.sum(axis=(-2, -1))
    if np.any(mass <= 0) or np.any(maps < 0) or not np.isfinite(maps).all():
        raise DegenerateHeatmapError("degenerate heatmap")
    ax = np.arange(res, dtype=np.float64) / (res - 1)
    x = (maps.sum(axis=-2) * ax).sum(axis=-1) / mass
    y = (maps.sum(axis=-1) * ax).sum(axis=-1) / mass
    return np.stack([x, y], axis=-1)


def roundtrip_filter(stack, topo: SkeletonTopology, width: int = 64, height: int = 64):
    """Re-render filter: decode keypoints from heatmaps and redraw a clean raster."""
    pose = decode_softargmax(stack)
    return pose, rasterize(pose, topo, width, height)


def write_png(img: np.ndarray, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(str(path), np.asarray(img, dtype=np.uint8))


def pose_svg(pose, topo: SkeletonTopology, width: int = 64, height: int = 64) -> str:
    """SVG with one colored ``<line>`` per bone and a white square per joint."""
    arr = np.asarray(pose, dtype=np.float64)
    pts = [(x * (width - 1), y * (height - 1)) for x, y in arr]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="black"/>']
    for (p, c), (r, g, b) in zip(topo.bones, topo.colors):
        (x0, y0), (x1, y1) = pts[p], pts[c]
        out.append(f'<line x1="{x0:.4f}" y1="{y0:.4f}" x2="{x1:.4f}" y2="{y1:.4f}" '
                   f'stroke="rgb({r},{g},{b})" stroke-width="1"/>')
    for x, y in pts:
        out.append(f'<rect x="{x:.4f}" y="{y:.4f}" width="2" height="2" fill="white"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_poses(poses: PoseSet, out_dir, width: int = 64, height: int = 64, prefix: str = "pose") -> list[Path]:
    """Write one PNG and one SVG per pose; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, pose in enumerate(poses.coords):
        png = out_dir / f"{prefix}_{k:05d}.png"
        svg = out_dir / f"{prefix}_{k:05d}.svg"
        write_png(rasterize(pose, poses.topology, width, height), png)
        svg.write_text(pose_svg(pose, poses.topology, width, height), encoding="utf-8")
        written += [png, svg]
    return written
