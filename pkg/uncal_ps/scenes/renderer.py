#!/usr/bin/env python3
"""
Ground-truth oracle renderer for analytic scenes
解析场景的真值渲染器：解析几何、精确可见性、硬阴影渲染与 GBR 变换

Deliberately independent of the differentiable solver code: heights, normals and
visibility are evaluated in closed form (ray/sphere) or by a fine ray march on the
analytic height function.

World frame: x right, y down, z towards the camera; the ground plane is z = 0 and the
camera distance is w = −z. Pixel (u, v) sits at x = (u + 0.5)·pitch − W·pitch/2 with
pitch = 2 / max(H, W).
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from uncal_ps.core.models import LightSet, ObservationSet
from uncal_ps.io.dataset import save_dataset
from uncal_ps.io.images import write_pfm, write_png
from uncal_ps.utils.logger import debug, info

PathLike = Union[str, Path]
Extent = Tuple[float, float, float, float]
RAY_EPS = 1e-7
MARCH_STEP_PX = 0.1


# ==================== 解析形状 ====================


class Shape:
    """高度场 z(x, y) ≥ 0 形式的解析表面"""

    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def max_height(self) -> float:
        raise NotImplementedError

    def normals(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """n = Nor(−∂z/∂x, −∂z/∂y, 1)"""
        zx, zy = self.gradient(x, y)
        n = np.stack([-zx, -zy, np.ones_like(zx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def visible(self, points: np.ndarray, light: np.ndarray, pitch: float, extent: Extent) -> np.ndarray:
        """点沿光线方向是否未被遮挡（默认用光线步进）"""
        return march_visibility(self, points, light, pitch * MARCH_STEP_PX, extent)


@dataclass
class PlaneShape(Shape):
    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def gradient(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros_like(x), np.zeros_like(x)

    def max_height(self) -> float:
        return 0.0

    def visible(self, points: np.ndarray, light: np.ndarray, pitch: float, extent: Extent) -> np.ndarray:
        return np.ones(points.shape[0], dtype=bool)


@dataclass
class SphereShape(Shape):
    """平面上的球：lift = 0 为半球（球心在平面上），lift = radius 为放在平面上的整球"""

    center: Tuple[float, float] = (0.0, 0.0)
    radius: float = 0.5
    lift: float = 0.0

    def _inside(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dx, dy = x - self.center[0], y - self.center[1]
        r2 = dx * dx + dy * dy
        return dx, dy, r2 < self.radius**2

    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy, inside = self._inside(x, y)
        cap = np.sqrt(np.clip(self.radius**2 - dx * dx - dy * dy, 0.0, None))
        return np.where(inside, self.lift + cap, 0.0)

    def gradient(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        dx, dy, inside = self._inside(x, y)
        cap = np.sqrt(np.clip(self.radius**2 - dx * dx - dy * dy, 1e-12, None))
        return np.where(inside, -dx / cap, 0.0), np.where(inside, -dy / cap, 0.0)

    def normals(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy, inside = self._inside(x, y)
        cap = np.sqrt(np.clip(self.radius**2 - dx * dx - dy * dy, 0.0, None))
        sphere = np.stack([dx, dy, cap], axis=-1) / self.radius
        flat = np.zeros_like(sphere)
        flat[..., 2] = 1.0
        return np.where(inside[..., None], sphere, flat)

    def max_height(self) -> float:
        return self.lift + self.radius

    def visible(self, points: np.ndarray, light: np.ndarray, pitch: float, extent: Extent) -> np.ndarray:
        """精确的光线-球求交；只计入平面以上（z ≥ 0）的交点，背光的球面点也算遮挡"""
        center = np.array([self.center[0], self.center[1], self.lift])
        rel = points - center
        b = rel @ light
        c = np.einsum("ij,ij->i", rel, rel) - self.radius**2
        disc = b * b - c
        hit = np.zeros(points.shape[0], dtype=bool)
        ok = disc > 0
        root = np.sqrt(np.where(ok, disc, 0.0))
        for t in (-b - root, -b + root):
            z = points[:, 2] + t * light[2]
            hit |= ok & (t > RAY_EPS) & (z >= -RAY_EPS)
        return ~hit


@dataclass
class GaussianBumps(Shape):
    """若干高斯凸起之和：z = Σ a·exp(−r²/(2σ²))"""

    bumps: List[Tuple[float, float, float, float]] = field(default_factory=lambda: [(0.0, 0.0, 0.5, 0.3)])

    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        z = np.zeros_like(np.asarray(x, dtype=np.float64))
        for cx, cy, amp, sigma in self.bumps:
            z = z + amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma**2))
        return z

    def gradient(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        zx = np.zeros_like(np.asarray(x, dtype=np.float64))
        zy = np.zeros_like(zx)
        for cx, cy, amp, sigma in self.bumps:
            g = amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma**2))
            zx = zx - g * (x - cx) / sigma**2
            zy = zy - g * (y - cy) / sigma**2
        return zx, zy

    def max_height(self) -> float:
        return float(sum(abs(b[2]) for b in self.bumps))


def march_visibility(shape: Shape, points: np.ndarray, light: np.ndarray, step: float, extent: Extent) -> np.ndarray:
    """
    沿光线以固定 xy 步长步进，光线低于表面即为遮挡

    Args:
        shape: 解析形状
        points: (N, 3) 表面点
        light: (3,) 单位光照方向
        step: xy 平面内的步长（世界单位）
        extent: 图像范围 (x_min, x_max, y_min, y_max)

    Returns:
        (N,) 是否受光
    """
    lit = np.ones(points.shape[0], dtype=bool)
    xy_len = float(np.hypot(light[0], light[1]))
    if xy_len < 1e-12:
        return lit
    dt = step / xy_len
    x_min, x_max, y_min, y_max = extent
    top = shape.max_height()
    active = np.arange(points.shape[0])
    k = 1
    while active.size:
        t = k * dt
        p = points[active] + t * light
        inside = (p[:, 0] >= x_min) & (p[:, 0] <= x_max) & (p[:, 1] >= y_min) & (p[:, 1] <= y_max) & (p[:, 2] <= top)
        blocked = inside & (shape.height(p[:, 0], p[:, 1]) > p[:, 2] + 1e-9)
        lit[active[blocked]] = False
        active = active[inside & ~blocked]
        k += 1
    return lit


SHAPE_TYPES = {
    "plane": lambda p: PlaneShape(),
    "hemisphere_on_plane": lambda p: SphereShape(tuple(p.get("center", (0.0, 0.0))), p.get("radius", 0.6), 0.0),
    "sphere_on_plane": lambda p: SphereShape(
        tuple(p.get("center", (0.0, 0.0))), p.get("radius", 0.4), p.get("radius", 0.4)
    ),
    "gaussian_bump": lambda p: GaussianBumps(
        [(*p.get("center", (0.0, 0.0)), p.get("amplitude", 0.5), p.get("sigma", 0.3))]
    ),
    "double_bump": lambda p: GaussianBumps(
        [tuple(b) for b in p.get("bumps", [(-0.35, 0.0, 0.6, 0.2), (0.35, 0.0, 0.3, 0.25)])]
    ),
}


def build_shape(spec: Dict[str, Any]) -> Shape:
    kind = spec.get("type")
    factory = SHAPE_TYPES.get(kind)  # type: ignore[arg-type]
    if factory is None:
        raise ValueError(f"Unknown shape: {kind}. Available: {list(SHAPE_TYPES)}")
    return factory(spec)


# ==================== 材质与光照 ====================


@dataclass
class Material:
    """漫反射率（每通道）加若干 ASG 镜面瓣 {weight, rx, ry}"""

    kind: str = "lambertian"
    albedo: List[float] = field(default_factory=lambda: [0.8])
    lobes: List[Dict[str, float]] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Material":
        kind = data.get("type", "lambertian")
        if kind not in ("lambertian", "isotropic_sg", "anisotropic_asg"):
            raise ValueError(f"Unknown material: {kind}")
        lobes = [dict(lobe) for lobe in data.get("lobes", [])] if kind != "lambertian" else []
        for lobe in lobes:
            lobe.setdefault("ry", lobe["rx"])
            if kind == "isotropic_sg":
                lobe["ry"] = lobe["rx"]
        return cls(kind, [float(a) for a in np.atleast_1d(data.get("albedo", [0.8]))], lobes)

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.kind, "albedo": self.albedo, "lobes": self.lobes}


def ring_lights(count: int, elevation_deg: float, azimuth_offset_deg: float = 0.0) -> np.ndarray:
    """固定仰角上均匀分布的一圈光源方向"""
    elev = np.deg2rad(elevation_deg)
    azim = np.deg2rad(azimuth_offset_deg) + 2.0 * np.pi * np.arange(count) / count
    return np.stack([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.full(count, np.sin(elev))], axis=1)


def resolve_lights(spec: Union[Dict[str, Any], List[Sequence[float]]], rng: np.random.Generator) -> LightSet:
    """把场景文件中的光照描述展开为 LightSet"""
    if isinstance(spec, list):
        data = np.array(spec, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != 4:
            raise ValueError("explicit lights need [lx, ly, lz, e] per entry")
        return LightSet(data[:, :3], data[:, 3]).normalized()
    dirs = []
    ring = spec.get("ring")
    if ring:
        offset = ring.get("azimuth_offset_deg", 0.0)
        dirs.append(ring_lights(ring.get("count", 12), ring.get("elevation_deg", 40.0), offset))
    extra = int(spec.get("random", 0))
    if extra:
        low, high = np.deg2rad(spec.get("random_elevation_deg", [25.0, 75.0]))
        elev = rng.uniform(low, high, size=extra)
        azim = rng.uniform(0.0, 2.0 * np.pi, size=extra)
        dirs.append(np.stack([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)], axis=1))
    if not dirs:
        raise ValueError("light description yields no lights")
    directions = np.concatenate(dirs)
    low, high = spec.get("intensity_range", [0.8, 1.2])
    return LightSet(directions, rng.uniform(low, high, size=len(directions)))


# ==================== 场景与渲染 ====================


@dataclass
class AnalyticScene:
    """解析场景：形状、材质、光照与分辨率"""

    name: str
    shape: Dict[str, Any]
    material: Material
    lights: LightSet
    resolution: Tuple[int, int] = (64, 64)
    seed: int = 0
    description: str = ""

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AnalyticScene":
        header = data.get("scene", {})
        seed = int(header.get("seed", 0))
        rng = np.random.default_rng(seed)
        resolution = header.get("resolution", [64, 64])
        if isinstance(resolution, int):
            resolution = [resolution, resolution]
        build_shape(data["shape"])
        return cls(
            name=header.get("name", "scene"),
            shape=dict(data["shape"]),
            material=Material.from_dict(data.get("material", {})),
            lights=resolve_lights(data.get("lights", {"ring": {"count": 12}}), rng),
            resolution=(int(resolution[0]), int(resolution[1])),
            seed=seed,
            description=header.get("description", ""),
        )

    def to_dict(self) -> Dict[str, Any]:
        lights = np.concatenate([self.lights.directions, self.lights.scalar_intensities[:, None]], axis=1)
        return {
            "scene": {
                "name": self.name,
                "description": self.description,
                "resolution": list(self.resolution),
                "seed": self.seed,
            },
            "shape": self.shape,
            "material": self.material.to_dict(),
            "lights": lights.tolist(),
        }


def load_scene(path: PathLike) -> AnalyticScene:
    """读取场景 JSON 文件"""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    try:
        return AnalyticScene.from_dict(data)
    except KeyError as exc:
        raise ValueError(f"scene file {path} lacks required block {exc}") from exc


@dataclass
class RenderedScene:
    """渲染结果：观测数据与全部真值"""

    scene: AnalyticScene
    observations: ObservationSet
    depth: np.ndarray  # (H, W) 相机距离 w = −z
    normals: np.ndarray  # (H, W, 3)
    hard_shadows: np.ndarray  # (f, H, W)，1 为受光
    pitch: float


def pixel_centers(height: int, width: int) -> Tuple[np.ndarray, np.ndarray, float]:
    """像素中心的世界坐标网格与像素间距"""
    pitch = 2.0 / max(height, width)
    x = (np.arange(width) + 0.5) * pitch - width * pitch / 2.0
    y = (np.arange(height) + 0.5) * pitch - height * pitch / 2.0
    xx, yy = np.meshgrid(x, y)
    return xx, yy, pitch


def oracle_tangent_frame(normals: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """x = Nor(V_d − n_z n)，y = n × x，n ∥ V_d 时 x = [1,0,0]"""
    view = np.array([0.0, 0.0, 1.0])
    x = view - normals[..., 2:3] * normals
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    degenerate = norm**2 < 1e-12
    x = np.where(degenerate, np.array([1.0, 0.0, 0.0]), x / np.where(degenerate, 1.0, norm))
    return x, np.cross(normals, x)


def shade(
    normals: np.ndarray,
    light: np.ndarray,
    intensity: float,
    material: Material,
    visibility: np.ndarray,
) -> np.ndarray:
    """单个光源下的图像 e·s·(ρ_d + ρ_s)·max(n·l, 0)，(..., C)"""
    albedo = np.asarray(material.albedo, dtype=np.float64)
    cosine = np.clip(normals @ light, 0.0, None)
    specular = np.zeros(normals.shape[:-1])
    if material.lobes:
        half = light + np.array([0.0, 0.0, 1.0])
        half = half / np.linalg.norm(half)
        tx, ty = oracle_tangent_frame(normals)
        hx, hy = tx @ half, ty @ half
        for lobe in material.lobes:
            specular = specular + lobe["weight"] * np.exp(-lobe["rx"] * hx**2 - lobe["ry"] * hy**2)
    radiance = intensity * visibility * cosine
    return radiance[..., None] * (specular[..., None] + albedo)


def render_ground_truth(scene: AnalyticScene, resolution: Optional[Tuple[int, int]] = None) -> RenderedScene:
    """
    用解析几何和精确可见性渲染场景（阴影为 0/1）

    Args:
        scene: 解析场景
        resolution: 覆盖场景中的 (H, W)

    Returns:
        RenderedScene
    """
    height, width = resolution if resolution is not None else scene.resolution
    xx, yy, pitch = pixel_centers(height, width)
    shape = build_shape(scene.shape)
    z = shape.height(xx, yy)
    normals = shape.normals(xx, yy)
    points = np.stack([xx, yy, z], axis=-1).reshape(-1, 3)
    extent = (xx.min(), xx.max(), yy.min(), yy.max())
    images, shadows = [], []
    for light, e in zip(scene.lights.directions, scene.lights.scalar_intensities):
        if light[2] <= 0:
            raise ValueError(f"light {light.tolist()} has l_z <= 0")
        lit = shape.visible(points, light, pitch, extent).reshape(height, width).astype(np.float64)
        shadows.append(lit)
        images.append(shade(normals, light, float(e), scene.material, lit))
    debug(f"rendered {len(images)} images of scene '{scene.name}' at {height}x{width}", prefix="SCENE")
    observations = ObservationSet(
        images=np.stack(images),
        mask=np.ones((height, width), dtype=bool),
        lights=LightSet(scene.lights.directions.copy(), scene.lights.intensities.copy()),
        normals_gt=normals,
        name=scene.name,
    )
    return RenderedScene(scene, observations, -z, normals, np.stack(shadows), pitch)


def save_scene(rendered: RenderedScene, out_dir: PathLike, bits: int = 16) -> Path:
    """
    按数据集布局写出渲染结果，另附 depth_gt.pfm、shadow_gt_XXX.png 与 scene.json

    Images are rescaled so that the brightest value is at most 1; the light
    intensities absorb the same factor.
    """
    out = Path(out_dir)
    obs = rendered.observations
    peak = float(obs.images.max())
    scale = 1.0 / peak if peak > 1.0 else 1.0
    assert obs.lights is not None
    scaled = ObservationSet(
        images=obs.images * scale,
        mask=obs.mask,
        lights=LightSet(obs.lights.directions, obs.lights.intensities * scale),
        normals_gt=obs.normals_gt,
        name=obs.name,
    )
    save_dataset(scaled, out, bits=bits)
    write_pfm(out / "depth_gt.pfm", rendered.depth)
    for j, shadow in enumerate(rendered.hard_shadows):
        write_png(out / f"shadow_gt_{j + 1:03d}.png", shadow, bits=8)
    (out / "scene.json").write_text(json.dumps(rendered.scene.to_dict(), indent=2), encoding="utf-8")
    info(f"scene '{rendered.scene.name}' written to {out} (intensity scale {scale:.4f})", prefix="SCENE")
    return out


# ==================== GBR 变换 ====================


@dataclass
class GbrResult:
    normals: np.ndarray
    lights: np.ndarray
    albedo_scale: np.ndarray
    intensity_scale: np.ndarray


def gbr_matrix(mu: float, nu: float, lam: float) -> np.ndarray:
    if lam == 0:
        raise ValueError("GBR transform needs lambda != 0")
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [mu, nu, lam]])


def gbr_transform(normals: np.ndarray, lights: np.ndarray, mu: float, nu: float, lam: float) -> GbrResult:
    """
    广义浅浮雕变换：l' = G l，n' = G^{-T} n，各自归一化，模长并入光强与反照率

    Args:
        normals: (..., 3) 单位法向
        lights: (f, 3) 单位光照方向
        mu, nu, lam: G = [[1,0,0],[0,1,0],[mu,nu,lam]]

    Returns:
        GbrResult，满足 albedo_scale·intensity_scale·(n'·l') = n·l
    """
    g = gbr_matrix(mu, nu, lam)
    g_inv_t = np.linalg.inv(g).T
    n = np.asarray(normals, dtype=np.float64) @ g_inv_t.T
    l = np.asarray(lights, dtype=np.float64) @ g.T
    n_norm = np.linalg.norm(n, axis=-1)
    l_norm = np.linalg.norm(l, axis=-1)
    return GbrResult(n / n_norm[..., None], l / l_norm[..., None], n_norm, l_norm)


def render_lambertian(
    normals: np.ndarray, albedo: np.ndarray, lights: np.ndarray, intensities: np.ndarray
) -> np.ndarray:
    """无阴影的朗伯渲染 (f, ...)：e·ρ·max(n·l, 0)"""
    cos = np.einsum("...k,fk->f...", normals, lights)
    shape = (-1,) + (1,) * (cos.ndim - 1)
    return np.asarray(intensities).reshape(shape) * np.asarray(albedo)[None, ...] * np.clip(cos, 0.0, None)
