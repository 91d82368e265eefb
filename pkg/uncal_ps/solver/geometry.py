#!/usr/bin/env python3
"""
Depth-grid geometry: pixel tables, bilinear depth lookup, normal fitting, silhouette normals
深度网格几何：像素索引表、双线性插值、法向拟合与轮廓法向

Surface points are p = (u·pitch, v·pitch, −w) with u to the right, v downward and w
the distance from an orthographic camera looking along −z.
"""
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import cv2
import numpy as np
from scipy import ndimage

from uncal_ps.core import autodiff as ad
from uncal_ps.core.autodiff import Var
from uncal_ps.utils.logger import debug, warning

NORMAL_EPS = 1e-8

# 邻居顺序：上、右、下、左（循环）
NEIGHBOR_OFFSETS = np.array([[0, -1], [1, 0], [0, 1], [-1, 0]])


class Vec3(NamedTuple):
    """按分量存储的一组三维向量，每个分量是形状 (P,) 的 Var"""

    x: Var
    y: Var
    z: Var

    def dot(self, other: "Vec3") -> Var:
        return self.x * other.x + self.y * other.y + self.z * other.z

    def cross(self, other: "Vec3") -> "Vec3":
        return Vec3(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )

    def scale(self, s: ad.ArrayLike) -> "Vec3":
        return Vec3(self.x * s, self.y * s, self.z * s)

    def __add__(self, other: "Vec3") -> "Vec3":  # type: ignore[override]
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def norm(self) -> Var:
        return ad.sqrt(self.dot(self))

    def normalize(self) -> "Vec3":
        return self.scale(1.0 / self.norm())

    def stacked(self, axis: int = -1) -> Var:
        return ad.stack([self.x, self.y, self.z], axis=axis)

    @property
    def value(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(self.x.value, self.y.value, self.z.value), axis=-1)

    @classmethod
    def of(cls, array: ad.ArrayLike) -> "Vec3":
        """把 (..., 3) 数组或 Var 拆成分量"""
        v = ad.as_var(array)
        return cls(v[..., 0], v[..., 1], v[..., 2])


class PixelGrid:
    """掩码像素网格：索引、邻居表、前向差分表和最近掩码填充"""

    def __init__(self, mask: np.ndarray, pitch: Optional[float] = None):
        """
        Args:
            mask: (H, W) 二值掩码
            pitch: 每像素的世界单位长度，None 表示 2/max(H, W)
        """
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.mask.shape}")
        if not self.mask.any():
            raise ValueError("mask is empty")
        self.height, self.width = self.mask.shape
        self.pitch = float(pitch) if pitch is not None else 2.0 / max(self.height, self.width)
        self.vs, self.us = np.nonzero(self.mask)
        self.count = int(self.us.size)
        self.pixel_index = np.full(self.mask.shape, -1, dtype=np.int64)
        self.pixel_index[self.vs, self.us] = np.arange(self.count)

        # 4 邻居下标，越界或不在掩码内为 -1
        self.neighbors = np.stack([self._lookup(self.us + du, self.vs + dv) for du, dv in NEIGHBOR_OFFSETS], axis=1)
        self._build_neighbor_depth_tables()
        self._build_difference_tables()

        # 掩码外的格点取最近掩码像素
        _, (iy, ix) = ndimage.distance_transform_edt(~self.mask, return_indices=True)
        self.fill_index = self.pixel_index[iy, ix].reshape(-1)

    def _lookup(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        inside = (us >= 0) & (us < self.width) & (vs >= 0) & (vs < self.height)
        out = np.full(us.shape, -1, dtype=np.int64)
        out[inside] = self.pixel_index[vs[inside], us[inside]]
        return out

    def _build_neighbor_depth_tables(self) -> None:
        """邻居深度 w^k = a·w_i + b·w[idx]；缺失邻居用对侧镜像 2w_i − w_opp"""
        own = np.arange(self.count)
        self.nb_a = np.zeros((self.count, 4))
        self.nb_b = np.ones((self.count, 4))
        self.nb_idx = self.neighbors.copy()
        for k in range(4):
            missing = self.neighbors[:, k] < 0
            opposite = self.neighbors[:, (k + 2) % 4]
            mirror = missing & (opposite >= 0)
            alone = missing & (opposite < 0)
            self.nb_a[mirror, k] = 2.0
            self.nb_b[mirror, k] = -1.0
            self.nb_idx[mirror, k] = opposite[mirror]
            self.nb_a[alone, k] = 1.0
            self.nb_b[alone, k] = 0.0
            self.nb_idx[alone, k] = own[alone]
        self.interior = np.all(self.neighbors >= 0, axis=1)

    def _build_difference_tables(self) -> None:
        """前向差分 X[hi] − X[lo]，边界处改为单侧后向差分"""
        own = np.arange(self.count)

        def table(forward: np.ndarray, backward: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            hi = np.where(forward >= 0, forward, own)
            lo = np.where(forward >= 0, own, np.where(backward >= 0, backward, own))
            return hi, lo

        self.du_hi, self.du_lo = table(self.neighbors[:, 1], self.neighbors[:, 3])
        self.dv_hi, self.dv_lo = table(self.neighbors[:, 2], self.neighbors[:, 0])

    def coordinates(self) -> np.ndarray:
        """像素中心在 [-1, 1] 图像平面上的坐标 (P, 2)"""
        scale = 2.0 / max(self.height, self.width)
        x = (self.us + 0.5) * scale - self.width * scale / 2.0
        y = (self.vs + 0.5) * scale - self.height * scale / 2.0
        return np.stack([x, y], axis=1)

    def scatter_image(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """把 (P, ...) 的逐像素值写回 (H, W, ...) 图像"""
        values = np.asarray(values)
        out = np.full((self.height, self.width) + values.shape[1:], fill, dtype=np.float64)
        out[self.vs, self.us] = values
        return out

    def gather_image(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(image)[self.vs, self.us]


@dataclass
class DepthField:
    """掩码网格上的深度（相机距离，越大越远）"""

    grid: PixelGrid
    depth: Var  # (P,)

    def __post_init__(self) -> None:
        if self.depth.shape != (self.grid.count,):
            raise ad.ShapeError("DepthField", [self.depth.shape, (self.grid.count,)], "one depth per masked pixel")
        if not np.all(np.isfinite(self.depth.value)):
            raise ValueError("DepthField: depth must be finite on every masked pixel")

    @property
    def width(self) -> int:
        return self.grid.width

    @property
    def height(self) -> int:
        return self.grid.height

    @property
    def pitch(self) -> float:
        return self.grid.pitch

    def dense(self) -> Var:
        """(H, W) 深度网格，掩码外取最近掩码像素的深度"""
        return ad.gather(self.depth, self.grid.fill_index).reshape(self.height, self.width)

    def to_image(self) -> np.ndarray:
        return self.grid.scatter_image(self.depth.value)

    @classmethod
    def from_image(cls, depth: np.ndarray, mask: np.ndarray, pitch: Optional[float] = None) -> "DepthField":
        grid = PixelGrid(mask, pitch)
        return cls(grid, ad.Var(grid.gather_image(depth)))


@dataclass
class NormalMap:
    """逐掩码像素的单位法向"""

    grid: PixelGrid
    normals: np.ndarray  # (P, 3)

    def to_image(self) -> np.ndarray:
        return self.grid.scatter_image(self.normals)


def bilinear_depth(field: DepthField, x: ad.ArrayLike, y: ad.ArrayLike, dense: Optional[Var] = None) -> Var:
    """
    在 (x, y) 像素坐标处双线性插值深度，超出网格的查询截断到边界

    Args:
        field: 深度场
        x, y: 查询坐标（列、行，单位像素）
        dense: 已经展开的 (H, W) 网格，可复用

    Returns:
        与查询同形状的深度 Var
    """
    xv, yv = ad.as_var(x), ad.as_var(y)
    outside = (xv.value < 0) | (xv.value > field.width - 1) | (yv.value < 0) | (yv.value > field.height - 1)
    if np.any(outside):
        debug(f"{int(np.count_nonzero(outside))} bilinear queries clamped to the grid border", prefix="GEOMETRY")
    return ad.bilinear(dense if dense is not None else field.dense(), xv, yv)


def _neighbor_depths(field: DepthField, roll: int = 0) -> Var:
    g = field.grid
    order = [(k + roll) % 4 for k in range(4)]
    a, b, idx = g.nb_a[:, order], g.nb_b[:, order], g.nb_idx[:, order]
    w = field.depth
    return w.reshape(-1, 1) * a + ad.gather(w, idx) * b


def _weighted_normals(field: DepthField) -> Vec3:
    h = field.pitch
    w = field.depth.reshape(-1, 1)
    dz = -(_neighbor_depths(field) - w)  # (P, 4) z-offset of p^k − p
    dz_next = -(_neighbor_depths(field, roll=1) - w)
    off = NEIGHBOR_OFFSETS * h
    ax, ay = off[:, 0], off[:, 1]
    bx, by = np.roll(off[:, 0], -1), np.roll(off[:, 1], -1)
    # (p^k − p) × (p^{k+1} − p)
    tri = Vec3(dz_next * ay - dz * by, dz * bx - dz_next * ax, ad.constant(ax * by - ay * bx))
    tri = tri.normalize()
    # d^k = w^k + w^{k+1} − 2w = −(dz^k + dz^{k+1})
    inv = 1.0 / (ad.absolute(dz + dz_next) + NORMAL_EPS)
    gamma = inv / inv.sum(axis=1, keepdims=True)
    blended = Vec3(
        (tri.x * gamma).sum(axis=1),
        (tri.y * gamma).sum(axis=1),
        (tri.z * gamma).sum(axis=1),
    )
    return blended.normalize()


def _cross_normals(field: DepthField) -> Vec3:
    h = field.pitch
    wk = _neighbor_depths(field)
    # p_right − p_left = (2h, 0, −(w_r − w_l)), p_down − p_up = (0, 2h, −(w_d − w_u))
    az = -(wk[:, 1] - wk[:, 3])
    bz = -(wk[:, 2] - wk[:, 0])
    zeros = np.full(field.grid.count, 4.0 * h * h)
    return Vec3(az * (-2.0 * h), bz * (-2.0 * h), ad.constant(zeros)).normalize()


def _triangle_normals(field: DepthField) -> Vec3:
    h = field.pitch
    w = field.depth
    wk = _neighbor_depths(field)
    up = -(wk[:, 0] - w)
    right = -(wk[:, 1] - w)
    # (p_up − p) × (p_right − p) with p_up − p = (0, −h, up), p_right − p = (h, 0, right)
    zeros = np.full(field.grid.count, h * h)
    return Vec3(right * (-h), up * h, ad.constant(zeros)).normalize()


NORMAL_FITTERS = {
    "weighted": _weighted_normals,
    "cross": _cross_normals,
    "triangle": _triangle_normals,
}


def fit_normals(field: DepthField, method: str = "weighted") -> Vec3:
    """
    从深度拟合所有掩码像素的单位法向

    Args:
        field: 深度场
        method: weighted（加权三角插值）、cross 或 triangle

    Returns:
        分量形状均为 (P,) 的 Vec3，可微
    """
    fitter = NORMAL_FITTERS.get(method)
    if fitter is None:
        raise ValueError(f"Unknown normal fitting method: {method}. Available: {list(NORMAL_FITTERS)}")
    return fitter(field)


def fit_normal(field: DepthField, i: int, method: str = "weighted") -> Var:
    """单个像素的法向 (3,)"""
    return fit_normals(field, method).stacked()[i]


def triangle_weights(field: DepthField) -> np.ndarray:
    """每个像素的四个插值权重 γ (P, 4)"""
    w = field.depth.value[:, None]
    g = field.grid
    wk = g.nb_a * w + g.nb_b * field.depth.value[g.nb_idx]
    d = wk + np.roll(wk, -1, axis=1) - 2.0 * w
    inv = 1.0 / (np.abs(d) + NORMAL_EPS)
    return inv / inv.sum(axis=1, keepdims=True)


def _outward_hint(mask: np.ndarray, row: int, col: int, radius: int) -> np.ndarray:
    """局部掩码质心指向像素的方向（image 坐标 x 右 y 下）"""
    r0, r1 = max(row - radius, 0), min(row + radius + 1, mask.shape[0])
    c0, c1 = max(col - radius, 0), min(col + radius + 1, mask.shape[1])
    rows, cols = np.nonzero(mask[r0:r1, c0:c1])
    if rows.size == 0:
        return np.zeros(2)
    centroid = np.array([cols.mean() + c0, rows.mean() + r0])
    return np.array([col, row], dtype=np.float64) - centroid


def silhouette_normals(mask: np.ndarray) -> List[Tuple[Tuple[int, int], np.ndarray]]:
    """
    拟合轮廓像素的外法向

    Each boundary pixel gets a unit vector (nx, ny, 0) perpendicular to the tangent of a
    5-pixel window of the traced contour chain, pointing away from the mask.

    Args:
        mask: (H, W) 二值掩码

    Returns:
        [((row, col), normal), ...]，每个像素只出现一次
    """
    mask = np.asarray(mask, dtype=bool)
    contours, _ = cv2.findContours(mask.astype(np.uint8), cv2.RETR_LIST, cv2.CHAIN_APPROX_NONE)
    results: List[Tuple[Tuple[int, int], np.ndarray]] = []
    seen = set()
    skipped = 0
    for contour in contours:
        chain = contour.reshape(-1, 2).astype(np.float64)  # (x, y)
        if len(np.unique(chain, axis=0)) < 2:
            skipped += 1
            continue
        n = len(chain)
        for j in range(n):
            col, row = int(chain[j, 0]), int(chain[j, 1])
            if (row, col) in seen:
                continue
            window = chain[[(j + o) % n for o in range(-2, 3)]]
            centered = window - window.mean(axis=0)
            _, vecs = np.linalg.eigh(centered.T @ centered)
            tangent = vecs[:, -1]
            normal = np.array([-tangent[1], tangent[0]])
            hint = _outward_hint(mask, row, col, 2)
            if np.linalg.norm(hint) < 1e-9:
                hint = _outward_hint(mask, row, col, 4)
            if normal @ hint < 0:
                normal = -normal
            seen.add((row, col))
            results.append(((row, col), np.array([normal[0], normal[1], 0.0])))
    if skipped:
        warning(f"skipped {skipped} single-pixel silhouette component(s)", prefix="GEOMETRY")
    return results


def silhouette_targets(grid: PixelGrid, mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """轮廓像素在网格中的下标 (S,) 及其拟合法向 (S, 3)"""
    pairs = silhouette_normals(grid.mask if mask is None else mask)
    if not pairs:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    rows = np.array([p[0][0] for p in pairs])
    cols = np.array([p[0][1] for p in pairs])
    index = grid.pixel_index[rows, cols]
    keep = index >= 0
    return index[keep], np.stack([p[1] for p in pairs])[keep]
