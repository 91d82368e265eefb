#!/usr/bin/env python3
"""
Evaluation figures: angular-error heatmap, light-map sphere plot, BRDF spheres
评估图：角度误差热力图、光照分布球面图与 BRDF 球
"""
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from uncal_ps.core.models import LightSet  # noqa: E402
from uncal_ps.evaluation.metrics import angular_errors  # noqa: E402
from uncal_ps.io.images import write_png  # noqa: E402
from uncal_ps.solver.reflectance import brdf_sphere  # noqa: E402
from uncal_ps.utils.logger import debug  # noqa: E402

PathLike = Union[str, Path]


def save_error_heatmap(
    path: PathLike, normals: np.ndarray, normals_gt: np.ndarray, mask: np.ndarray, vmax: float = 30.0
) -> np.ndarray:
    """
    逐像素角度误差热力图（掩码外为白色）

    Returns:
        (H, W) 误差图（度），掩码外为 NaN
    """
    valid = np.asarray(mask, dtype=bool) & (np.linalg.norm(normals_gt, axis=-1) > 0.5)
    errors = np.full(valid.shape, np.nan)
    errors[valid] = angular_errors(normals[valid], normals_gt[valid])
    fig, ax = plt.subplots(figsize=(5, 4))
    cmap = plt.get_cmap("jet").copy()
    cmap.set_bad("white")
    im = ax.imshow(np.ma.masked_invalid(errors), cmap=cmap, vmin=0.0, vmax=vmax)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(f"MAE {np.nanmean(errors):.2f}°" if valid.any() else "MAE n/a")
    fig.colorbar(im, ax=ax, label="angular error (deg)")
    fig.savefig(str(path), dpi=120, bbox_inches="tight")
    plt.close(fig)
    debug(f"error heatmap written to {path}", prefix="METRICS")
    return errors


def save_light_map(path: PathLike, estimated: LightSet, ground_truth: Optional[LightSet] = None) -> None:
    """光照方向在 (l_x, l_y) 单位圆盘上的分布，颜色表示光强；有真值时用连线标出对应关系"""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.add_patch(plt.Circle((0.0, 0.0), 1.0, fill=False, color="gray", lw=1.0))
    est = estimated.directions
    if ground_truth is not None:
        gt = ground_truth.directions
        for a, b in zip(est, gt):
            ax.plot([a[0], b[0]], [a[1], b[1]], color="lightgray", lw=0.8, zorder=1)
        ax.scatter(gt[:, 0], gt[:, 1], marker="x", color="black", label="ground truth", zorder=2)
    points = ax.scatter(
        est[:, 0],
        est[:, 1],
        c=estimated.scalar_intensities,
        cmap="viridis",
        edgecolors="k",
        label="estimated",
        zorder=3,
    )
    fig.colorbar(points, ax=ax, shrink=0.8, label="intensity")
    ax.set_xlim(-1.05, 1.05)
    ax.set_ylim(1.05, -1.05)  # image y axis points down
    ax.set_aspect("equal")
    ax.set_xlabel("l_x")
    ax.set_ylabel("l_y")
    ax.legend(loc="lower right", fontsize="small")
    fig.savefig(str(path), dpi=120, bbox_inches="tight")
    plt.close(fig)
    debug(f"light map written to {path}", prefix="METRICS")


def save_brdf_sphere(
    path: PathLike, albedo: np.ndarray, weights: np.ndarray, widths: np.ndarray, size: int = 128
) -> np.ndarray:
    """把某个像素的材质渲染成 BRDF 球并写为 16 位 PNG（峰值归一化到 1）"""
    image = brdf_sphere(albedo, weights, widths, size)
    peak = float(image.max())
    write_png(path, image / peak if peak > 0 else image, bits=16)
    return image


def sample_pixels(mask: np.ndarray, count: int = 3) -> Sequence[tuple]:
    """沿掩码像素的行优先顺序均匀挑选若干像素"""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return []
    picks = np.linspace(0, rows.size - 1, num=min(count, rows.size)).round().astype(int)
    return [(int(rows[i]), int(cols[i])) for i in picks]
