#!/usr/bin/env python3
"""
Reflectance model: tangent frames, anisotropic spherical Gaussian lobes, per-pixel rendering
反射模型：切向标架、各向异性球面高斯（ASG）镜面项与逐像素渲染方程

    m = e · s · (rho_s + rho_d) · max(n·l, 0)
    rho_s = sum_k c_k exp(−r^x_k (h·x)^2 − r^y_k (h·y)^2),   h = Nor(V_d + l)

All functions accept component-wise Vec3 values of any broadcastable shape.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from uncal_ps.core import autodiff as ad
from uncal_ps.core.autodiff import Var
from uncal_ps.solver.geometry import Vec3

VIEW = np.array([0.0, 0.0, 1.0])
DEGENERATE_TANGENT = 1e-12


@dataclass
class TangentFrame:
    """(x, y, n) 标架，y = n × x"""

    x: Vec3
    y: Vec3
    n: Vec3


@dataclass
class AsgBasisSet:
    """N_G 个 ASG 基：共享的宽度和当前激活个数"""

    widths_x: Var  # (N_G,)
    widths_y: Var  # (N_G,)
    active: int

    @property
    def num_bases(self) -> int:
        return int(self.widths_x.shape[0])

    def active_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_bases)
        mask[: max(0, min(self.active, self.num_bases))] = 1.0
        return mask


def as_vec3(v: ad.ArrayLike) -> Vec3:
    return v if isinstance(v, Vec3) else Vec3.of(v)


def tangent_frame(n: ad.ArrayLike) -> TangentFrame:
    """
    x = Nor(V_d − (V_d·n) n)，y = n × x；n 与 V_d 平行时退化为 x = [1,0,0]

    Args:
        n: 单位法向（Vec3 或 (..., 3) 数组）

    Returns:
        TangentFrame
    """
    n = as_vec3(n)
    vx = -(n.z * n.x)
    vy = -(n.z * n.y)
    vz = 1.0 - n.z * n.z
    sq = vx * vx + vy * vy + vz * vz
    degenerate = sq.value < DEGENERATE_TANGENT
    inv = 1.0 / ad.sqrt(ad.where(degenerate, 1.0, sq))
    x = Vec3(
        ad.where(degenerate, 1.0, vx * inv),
        ad.where(degenerate, 0.0, vy * inv),
        ad.where(degenerate, 0.0, vz * inv),
    )
    return TangentFrame(x, n.cross(x), n)


def half_vector(light: ad.ArrayLike) -> Vec3:
    """h = Nor(V_d + l)"""
    l = as_vec3(light)
    return Vec3(l.x, l.y, l.z + 1.0).normalize()


def asg_lobes(
    frame: TangentFrame,
    h: Vec3,
    widths_x: ad.ArrayLike,
    widths_y: ad.ArrayLike,
    active: Optional[np.ndarray] = None,
) -> Var:
    """各个基的取值 exp(−r^x (h·x)^2 − r^y (h·y)^2)，形状 (..., N_G)；未激活的基为 0"""
    hx = h.dot(frame.x)
    hy = h.dot(frame.y)
    hx2 = (hx * hx).reshape(*hx.shape, 1)
    hy2 = (hy * hy).reshape(*hy.shape, 1)
    lobes = ad.exp(-(hx2 * widths_x) - hy2 * widths_y)
    if active is not None:
        lobes = lobes * active
    return lobes


def asg_specular(
    c: ad.ArrayLike,
    frame: TangentFrame,
    h: ad.ArrayLike,
    bases: AsgBasisSet,
) -> Var:
    """
    rho_s = Σ_k c_k · lobe_k，只有前 active 个基参与

    Args:
        c: (..., N_G) 非负权重
        frame: 切向标架
        h: 半角向量
        bases: ASG 基集合

    Returns:
        (...) 镜面反射率
    """
    lobes = asg_lobes(frame, as_vec3(h), bases.widths_x, bases.widths_y, bases.active_mask())
    return (lobes * c).sum(axis=-1)


def render_pixel(
    rho_d: ad.ArrayLike,
    rho_s: ad.ArrayLike,
    s: ad.ArrayLike,
    e: ad.ArrayLike,
    n: ad.ArrayLike,
    l: ad.ArrayLike,
) -> Var:
    """m = e · s · (rho_s + rho_d) · max(n·l, 0)，不含 Fresnel 项"""
    shading = ad.maximum(as_vec3(n).dot(as_vec3(l)), 0.0)
    return ad.as_var(e) * s * (ad.as_var(rho_s) + rho_d) * shading


def render_stack(
    normals: Vec3,
    albedo: Var,
    weights: Var,
    directions: Var,
    intensities: Var,
    shadows: ad.ArrayLike,
    bases: AsgBasisSet,
) -> Var:
    """
    渲染所有像素、所有光照下的图像

    Args:
        normals: 分量形状 (P,) 的法向
        albedo: (P, C) 漫反射率
        weights: (P, R, N_G) ASG 权重，R 为 1（共享）或 C
        directions: (f, 3) 光照方向
        intensities: (f,) 光强
        shadows: (P, f) 软阴影
        bases: ASG 基

    Returns:
        (P, f, C) 渲染强度
    """
    count = albedo.shape[0]
    n = Vec3(normals.x.reshape(count, 1), normals.y.reshape(count, 1), normals.z.reshape(count, 1))
    dirs = ad.as_var(directions)
    l = Vec3(dirs[:, 0].reshape(1, -1), dirs[:, 1].reshape(1, -1), dirs[:, 2].reshape(1, -1))
    frame = tangent_frame(n)
    lobes = asg_lobes(frame, half_vector(l), bases.widths_x, bases.widths_y, bases.active_mask())  # (P, f, K)
    lobes = lobes.reshape(count, -1, 1, bases.num_bases)
    rho_s = (lobes * weights.reshape(count, 1, *weights.shape[1:])).sum(axis=-1)  # (P, f, R)
    shading = ad.maximum(n.dot(l), 0.0)  # (P, f)
    s = ad.as_var(shadows)
    e = ad.as_var(intensities).reshape(1, -1)
    radiance = (e * s * shading).reshape(count, -1, 1)
    return radiance * (rho_s + albedo.reshape(count, 1, -1))


def brdf_sphere(albedo: np.ndarray, weights: np.ndarray, widths: np.ndarray, size: int = 128) -> np.ndarray:
    """
    BRDF 球：在 n = [0,0,1] 的标架下，把 h 在上半球上的反射率绘制成图像

    Args:
        albedo: (C,) 漫反射率
        weights: (N_G,) 或 (C, N_G) ASG 权重
        widths: (N_G, 2) 宽度 r^x, r^y
        size: 输出边长

    Returns:
        (size, size, C)，圆盘外为 0
    """
    albedo = np.atleast_1d(np.asarray(albedo, dtype=np.float64))
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    widths = np.asarray(widths, dtype=np.float64)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    hx, hy = np.meshgrid(coords, coords)
    inside = hx * hx + hy * hy <= 1.0
    frame = tangent_frame(np.array([0.0, 0.0, 1.0]))
    hz = np.sqrt(np.clip(1.0 - hx * hx - hy * hy, 0.0, None))
    h = Vec3(ad.constant(hx), ad.constant(hy), ad.constant(hz))
    lobes = asg_lobes(frame, h, widths[:, 0], widths[:, 1]).value  # (size, size, K)
    specular = lobes @ weights.T  # (size, size, R)
    image = specular + albedo[None, None, :]
    image[~inside] = 0.0
    return image
