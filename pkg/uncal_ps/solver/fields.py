#!/usr/bin/env python3
"""
Coordinate fields: positional encoding, DepthMLP, MaterialMLP and learnable scalars
坐标场：位置编码、深度/材质网络以及全部可学习参数
"""
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from uncal_ps.core import autodiff as ad
from uncal_ps.core.autodiff import Var
from uncal_ps.core.models import LightInit, LightSet, ObservationSet, RunConfig
from uncal_ps.utils.logger import debug, info

# 隐藏层激活函数注册表
ACTIVATIONS: Dict[str, Callable[[Var], Var]] = {
    "softplus": ad.softplus,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "linear": lambda x: x,
}

MIN_LIGHT_Z = 1e-3


def encode(points: np.ndarray, octaves: int) -> np.ndarray:
    """
    位置编码：每个坐标输出 [sin(2^0 π p), cos(2^0 π p), ..., sin(2^{L-1} π p), cos(2^{L-1} π p)]

    Args:
        points: (P, D) 归一化到 [-1, 1] 的坐标（单个点可传 (D,)）
        octaves: 频率个数 L

    Returns:
        (P, 2·L·D) 编码，不包含原始坐标
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    freqs = (2.0 ** np.arange(octaves)) * np.pi  # (L,)
    angles = pts[:, :, None] * freqs[None, None, :]  # (P, D, L)
    code = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (P, D, L, 2)
    out = code.reshape(pts.shape[0], -1)
    return out[0] if np.ndim(points) == 1 else out


class PositionalEncoder:
    """正弦位置编码器，每个标量输出 2L 维"""

    def __init__(self, octaves: int = 10):
        if octaves < 1:
            raise ValueError(f"octaves must be >= 1, got {octaves}")
        self.octaves = octaves

    def output_width(self, dims: int = 2) -> int:
        return 2 * self.octaves * dims

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return encode(points, self.octaves)


class Mlp:
    """全连接网络，权重为可学习 Var，最后一层不加激活"""

    def __init__(
        self,
        widths: Sequence[int],
        activation: str = "softplus",
        rng: Optional[np.random.Generator] = None,
        name: str = "mlp",
        output_scale: float = 1.0,
    ):
        """
        初始化网络

        Args:
            widths: 各层宽度，含输入与输出 [in, h1, ..., out]
            activation: 隐藏层激活函数名
            rng: 随机数生成器，决定初始化
            name: 参数名前缀
            output_scale: 最后一层权重的缩放
        """
        if len(widths) < 2:
            raise ValueError("Mlp needs at least an input and an output width")
        if activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation: {activation}. Available: {list(ACTIVATIONS)}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = [int(w) for w in widths]
        self.activation = activation
        self.name = name
        self.weights: List[Var] = []
        self.biases: List[Var] = []
        last = len(self.widths) - 2
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if i == last:
                w = w * output_scale
            self.weights.append(ad.parameter(w, f"{name}.w{i}"))
            self.biases.append(ad.parameter(np.zeros(fan_out), f"{name}.b{i}"))

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def parameters(self) -> List[Var]:
        params: List[Var] = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def __call__(self, code: ad.ArrayLike) -> Var:
        x = ad.as_var(code)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[-1] != self.in_width:
            raise ad.ShapeError(f"{self.name}", [x.shape, (self.in_width,)], "code width does not match input layer")
        act = ACTIVATIONS[self.activation]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < len(self.weights) - 1:
                x = act(x)
        return x


class DepthMLP(Mlp):
    """逐像素估计深度 w_i"""

    def __init__(self, code_width: int, hidden: Sequence[int], activation: str, rng: np.random.Generator):
        super().__init__([code_width, *hidden, 1], activation, rng, name="depth", output_scale=0.01)

    def __call__(self, code: ad.ArrayLike) -> Var:
        out = super().__call__(code)
        return out.reshape(out.shape[0])


class MaterialMLP(Mlp):
    """逐像素输出漫反射率 ρ^d（每通道）与 ASG 权重 c^k，均经 softplus 保证非负"""

    def __init__(
        self,
        code_width: int,
        hidden: Sequence[int],
        activation: str,
        rng: np.random.Generator,
        channels: int,
        num_bases: int,
        chromatic_specular: bool = False,
    ):
        self.channels = channels
        self.num_bases = num_bases
        self.chromatic_specular = chromatic_specular
        spec_width = num_bases * (channels if chromatic_specular else 1)
        super().__init__([code_width, *hidden, channels + spec_width], activation, rng, name="material")
        # 初始时镜面权重接近 0
        bias = self.biases[-1].value
        bias[:channels] = 0.5
        bias[channels:] = -5.0

    def __call__(self, code: ad.ArrayLike) -> Var:
        return ad.softplus(super().__call__(code))

    def split(self, out: Var) -> "tuple[Var, Var]":
        """把输出拆成 (albedo (P, C), weights (P, C or 1, N_G))"""
        albedo = out[:, : self.channels]
        rows = self.channels if self.chromatic_specular else 1
        weights = out[:, self.channels :].reshape(out.shape[0], rows, self.num_bases)
        return albedo, weights


def depth_mlp(model: DepthMLP, code: np.ndarray) -> Var:
    return model(code)


def material_mlp(model: MaterialMLP, code: np.ndarray) -> "tuple[Var, Var]":
    return model.split(model(code))


def initial_widths(num_bases: int, low: float = 10.0, high: float = 300.0) -> np.ndarray:
    """对数均匀分布在 [low, high] 上的 N_G 个初始宽度"""
    if num_bases == 1:
        return np.array([low])
    k = np.arange(num_bases)
    return 10.0 ** ((math.log10(high) - math.log10(low)) * k / (num_bases - 1) + math.log10(low))


def project_directions(directions: np.ndarray, min_z: float = MIN_LIGHT_Z) -> np.ndarray:
    """归一化为单位向量，并保证 l_z >= min_z"""
    d = directions / np.maximum(np.linalg.norm(directions, axis=-1, keepdims=True), 1e-12)
    low = d[:, 2] < min_z
    if np.any(low):
        xy = d[low, :2]
        xy_norm = np.maximum(np.linalg.norm(xy, axis=1, keepdims=True), 1e-12)
        d[low, :2] = xy / xy_norm * math.sqrt(1.0 - min_z * min_z)
        d[low, 2] = min_z
    return d


def perturb_lights(lights: LightSet, noise_deg: float, intensity_noise: float, rng: np.random.Generator) -> LightSet:
    """对方向施加高斯角度噪声、对光强施加相对噪声"""
    dirs = project_directions(lights.directions.copy())
    helper = np.where(np.abs(dirs[:, 2:3]) < 0.9, np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]))
    t1 = np.cross(dirs, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(dirs, t1)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=len(dirs))
    angle = np.deg2rad(noise_deg) * rng.standard_normal(len(dirs))
    tangent = np.cos(phi)[:, None] * t1 + np.sin(phi)[:, None] * t2
    noisy = np.cos(angle)[:, None] * dirs + np.sin(angle)[:, None] * tangent
    gains = np.maximum(1.0 + intensity_noise * rng.standard_normal(len(dirs)), 0.05)
    return LightSet(project_directions(noisy), lights.scalar_intensities * gains)


def hemisphere_lights(count: int, rng: np.random.Generator) -> LightSet:
    z = rng.uniform(0.0, 1.0, size=count)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=count)
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return LightSet(project_directions(dirs), np.ones(count))


def initial_lights(config: RunConfig, observations: ObservationSet, rng: np.random.Generator) -> LightSet:
    """按配置的模式生成初始光照"""
    count = observations.num_images
    if config.light_init == LightInit.GT_PERTURBED:
        if observations.lights is None:
            raise ValueError("light_init 'gt_perturbed' needs ground-truth lights in the dataset")
        return perturb_lights(observations.lights, config.light_noise_deg, config.intensity_noise, rng)
    if config.light_init == LightInit.HEMISPHERE:
        return hemisphere_lights(count, rng)
    assert config.light_file is not None
    lights = LightSet.from_text(Path(config.light_file).read_text(encoding="utf-8"))
    if len(lights) != count:
        raise ValueError(f"light file {config.light_file} lists {len(lights)} lights for {count} images")
    if np.any(lights.intensities <= 0):
        raise ValueError(f"light file {config.light_file} holds non-positive intensities")
    return LightSet(project_directions(lights.directions), lights.intensities)


class LearnableParams:
    """全部可学习参数的容器：两个网络、光照、ASG 宽度、阴影 α/β"""

    def __init__(self, config: RunConfig, observations: ObservationSet, rng: np.random.Generator):
        self.config = config
        self.encoder = PositionalEncoder(config.encoding_octaves)
        code_width = self.encoder.output_width(2)
        self.depth_mlp = DepthMLP(code_width, config.depth_hidden, config.activation, rng)
        self.material_mlp = MaterialMLP(
            code_width,
            config.material_hidden,
            config.activation,
            rng,
            observations.channels,
            config.num_bases,
            config.chromatic_specular,
        )
        lights = initial_lights(config, observations, rng)
        self.light_directions = ad.parameter(lights.directions, "light.directions")
        self.light_log_intensity = ad.parameter(np.log(lights.scalar_intensities), "light.log_intensity")
        widths = np.log10(initial_widths(config.num_bases, *config.width_init_range))
        self.log_width_x = ad.parameter(widths, "asg.log10_rx")
        self.log_width_y = self.log_width_x if config.isotropic else ad.parameter(widths, "asg.log10_ry")
        self.alpha = ad.parameter(config.alpha_init, "shadow.alpha")
        self.beta = ad.parameter(config.beta_init, "shadow.beta")
        self.log_bounds = (math.log10(config.width_bounds[0]), math.log10(config.width_bounds[1]))
        debug(
            f"initialized {sum(p.size for p in self.parameters())} learnable values "
            f"({len(lights)} lights, {config.num_bases} bases)",
            prefix="SOLVER",
        )

    def parameters(self) -> List[Var]:
        params = self.depth_mlp.parameters() + self.material_mlp.parameters()
        params += [self.light_directions, self.light_log_intensity, self.log_width_x]
        if self.log_width_y is not self.log_width_x:
            params.append(self.log_width_y)
        params += [self.alpha, self.beta]
        return params

    def intensities(self) -> Var:
        return ad.exp(self.light_log_intensity)

    def widths(self) -> "tuple[Var, Var]":
        ln10 = math.log(10.0)
        return ad.exp(self.log_width_x * ln10), ad.exp(self.log_width_y * ln10)

    def project(self) -> None:
        """优化步之后的投影：方向单位化、宽度截断"""
        self.light_directions.value[...] = project_directions(self.light_directions.value)
        lo, hi = self.log_bounds
        np.clip(self.log_width_x.value, lo, hi, out=self.log_width_x.value)
        if self.log_width_y is not self.log_width_x:
            np.clip(self.log_width_y.value, lo, hi, out=self.log_width_y.value)

    def light_set(self) -> LightSet:
        return LightSet(self.light_directions.value.copy(), np.exp(self.light_log_intensity.value))

    def width_table(self) -> np.ndarray:
        return np.stack([10.0**self.log_width_x.value, 10.0**self.log_width_y.value], axis=1)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters() if p.name is not None}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"checkpoint is missing parameter '{p.name}'")
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ad.ShapeError("load_state_dict", [p.value.shape, value.shape], f"parameter '{p.name}'")
            p.value[...] = value
        info(f"restored {len(self.parameters())} parameters", prefix="SOLVER")
