#!/usr/bin/env python3
"""
Differentiable cast shadows from a depth field
可微投射阴影：沿光线段均匀采样，比较表面深度与光线深度，经 sigmoid 得到软阴影

For pixel i and light l the segment leaves p_i towards l and ends where its xy
projection meets the image rectangle. With samples k = 1..N_p,

    s = sigmoid(alpha * min_k (w_surface(x_k, y_k) - w_ray_k) + beta)

so a surface closer to the camera than the ray (negative difference) darkens the pixel.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from uncal_ps.core import autodiff as ad
from uncal_ps.core.autodiff import Var
from uncal_ps.solver.geometry import DepthField
from uncal_ps.utils.logger import debug

BIG = 1e12
RECT_TOL = 1e-6
MIN_SEGMENT = 1e-9
# 第一遍（无梯度）按像素分块，限制 (块, f, N_p) 数组的大小
SCAN_CHUNK_ELEMENTS = 2_000_000


@dataclass
class LightSegment:
    """从表面点出发、指向光源的线段；终点的 xy 投影落在图像边界上"""

    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,)
    endpoint: np.ndarray  # (3,)
    num_samples: int = 64

    def samples(self) -> np.ndarray:
        """p^k = origin + (k/N_p)(endpoint − origin)，k = 1..N_p"""
        k = np.arange(1, self.num_samples + 1)[:, None] / self.num_samples
        return self.origin[None, :] + k * (self.endpoint - self.origin)[None, :]

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.endpoint - self.origin))


def _check_lights(directions: np.ndarray) -> None:
    if np.any(directions[:, 2] <= 0):
        bad = np.nonzero(directions[:, 2] <= 0)[0].tolist()
        raise ValueError(f"light direction(s) {bad} have l_z <= 0; lights must lie in the front hemisphere")


def _segment_extent(field: DepthField, u: Var, v: Var, dx: Var, dy: Var) -> Var:
    """沿 xy 方向走到图像矩形边界所需的参数 t_max，方向退化时为 BIG"""

    def axis_extent(pos: Var, d: Var, last: float) -> Var:
        positive = d.value > 0
        gap = ad.where(positive, last - pos, pos)
        speed = ad.absolute(d)
        moving = speed.value > 1e-12
        safe = ad.where(moving, speed, 1.0)
        return ad.where(moving, gap / safe, BIG)

    tx = axis_extent(u, dx, field.width - 1.0)
    ty = axis_extent(v, dy, field.height - 1.0)
    return ad.minimum_reduce(ad.stack([tx, ty], axis=-1), axis=-1)


def _segment_differences(
    dense: Var, field: DepthField, u: Var, v: Var, w: Var, dx: Var, dy: Var, lz: Var, t: Var
) -> Tuple[Var, np.ndarray]:
    """采样点处 w_surface − w_ray 及其有效性"""
    x = u + t * dx
    y = v + t * dy
    w_ray = w - t * lz
    w_surface = ad.bilinear(dense, x, y)
    valid = (
        (x.value >= -RECT_TOL)
        & (x.value <= field.width - 1 + RECT_TOL)
        & (y.value >= -RECT_TOL)
        & (y.value <= field.height - 1 + RECT_TOL)
    )
    return w_surface - w_ray, valid


def soft_shadows(
    field: DepthField,
    directions: ad.ArrayLike,
    alpha: ad.ArrayLike,
    beta: ad.ArrayLike,
    num_samples: int = 64,
    pixels: Optional[Sequence[int]] = None,
    dense: Optional[Var] = None,
) -> Var:
    """
    计算软阴影图

    The minimum over samples is located on plain values first, then only the selected
    sample is re-evaluated on the tape. The gradient of a min flows to its argmin only,
    so the result and its gradient equal those of the full min over all samples.

    Args:
        field: 深度场
        directions: (f, 3) 单位光照方向
        alpha, beta: 软阴影锐度与偏置
        num_samples: 每条线段的采样数 N_p
        pixels: 只计算这些像素（默认全部掩码像素）
        dense: 可复用的 (H, W) 深度网格

    Returns:
        (P, f) 软阴影 s ∈ (0, 1)
    """
    dirs = ad.as_var(directions)
    _check_lights(dirs.value)
    grid = field.grid
    index = np.arange(grid.count) if pixels is None else np.asarray(pixels, dtype=np.int64)
    dense = dense if dense is not None else field.dense()
    pitch = field.pitch

    u = ad.constant(grid.us[index].astype(np.float64)[:, None])
    v = ad.constant(grid.vs[index].astype(np.float64)[:, None])
    w = ad.gather(field.depth, index).reshape(-1, 1)
    dx = (dirs[:, 0] / pitch).reshape(1, -1)
    dy = (dirs[:, 1] / pitch).reshape(1, -1)
    lz = dirs[:, 2].reshape(1, -1)

    t_max = _segment_extent(field, u, v, dx, dy)  # (P, f)
    xy_speed = np.sqrt(dx.value**2 + dy.value**2)
    degenerate = (t_max.value >= BIG / 2) | (t_max.value * xy_speed < MIN_SEGMENT)

    best, any_valid = _locate_minimum(
        field, dense.value, u.value, v.value, w.value, dx.value, dy.value, lz.value, t_max.value, num_samples
    )
    any_valid &= ~degenerate
    ad.note_branch("shadow_argmin", best)
    fraction = ad.constant((best + 1.0) / num_samples)
    diff, _ = _segment_differences(dense, field, u, v, w, dx, dy, lz, t_max * fraction)
    d_min = ad.where(any_valid, diff, 0.0)
    if np.any(~any_valid):
        debug(f"{int(np.count_nonzero(~any_valid))} degenerate light segments treated as unoccluded", prefix="SHADOW")
    return ad.sigmoid(ad.as_var(alpha) * d_min + beta)


def _locate_minimum(
    field: DepthField,
    dense: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    w: np.ndarray,
    dx: np.ndarray,
    dy: np.ndarray,
    lz: np.ndarray,
    t_max: np.ndarray,
    num_samples: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """无梯度地找出每条线段上差值最小的采样下标 (P, f) 及是否存在有效采样"""
    count, lights = t_max.shape
    best = np.zeros((count, lights), dtype=np.int64)
    any_valid = np.zeros((count, lights), dtype=bool)
    fractions = np.arange(1, num_samples + 1) / num_samples
    chunk = max(1, SCAN_CHUNK_ELEMENTS // max(1, lights * num_samples))
    grid_var = ad.constant(dense)
    for start in range(0, count, chunk):
        rows = slice(start, start + chunk)
        t = t_max[rows, :, None] * fractions
        diff, valid = _segment_differences(
            grid_var,
            field,
            ad.constant(u[rows, :, None]),
            ad.constant(v[rows, :, None]),
            ad.constant(w[rows, :, None]),
            ad.constant(dx[:, :, None]),
            ad.constant(dy[:, :, None]),
            ad.constant(lz[:, :, None]),
            ad.constant(t),
        )
        masked = np.where(valid, diff.value, np.inf)
        best[rows] = np.argmin(masked, axis=2)
        any_valid[rows] = valid.any(axis=2)
    return best, any_valid


def soft_shadow(
    field: DepthField, i: int, light: ad.ArrayLike, alpha: ad.ArrayLike, beta: ad.ArrayLike, num_samples: int = 64
) -> Var:
    """单个像素、单个光源的软阴影（标量 Var）"""
    dirs = ad.as_var(light).reshape(1, 3)
    return soft_shadows(field, dirs, alpha, beta, num_samples, pixels=[i])[0, 0]


def light_segment(field: DepthField, i: int, light: np.ndarray, num_samples: int = 64) -> LightSegment:
    """构造像素 i 指向光源的线段（世界坐标）"""
    light = np.asarray(light, dtype=np.float64)
    _check_lights(light.reshape(1, 3))
    grid = field.grid
    u = ad.constant(np.array([[float(grid.us[i])]]))
    v = ad.constant(np.array([[float(grid.vs[i])]]))
    dx = ad.constant(np.array([[light[0] / field.pitch]]))
    dy = ad.constant(np.array([[light[1] / field.pitch]]))
    t_max = float(_segment_extent(field, u, v, dx, dy).value[0, 0])
    if t_max >= BIG / 2:
        t_max = 0.0
    w = float(field.depth.value[i])
    origin = np.array([grid.us[i] * field.pitch, grid.vs[i] * field.pitch, -w])
    return LightSegment(origin, light.copy(), origin + t_max * light, num_samples)


def hard_shadows(soft: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """软阴影阈值化，1 表示受光"""
    return (np.asarray(soft) > threshold).astype(np.float64)
