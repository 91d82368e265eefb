#!/usr/bin/env python3
"""
uncal-ps data models
统一的数据模型定义：运行配置、观测数据、光照、求解结果与训练历史
"""
import inspect
import json
import numbers
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar, Union, get_args, get_origin, get_type_hints

import numpy as np

# 类型变量
T = TypeVar("T", bound="SerializableModel")


class ConfigError(ValueError):
    """配置非法：未知键或取值越界"""


class LightInit(Enum):
    """光照初始化方式"""

    GT_PERTURBED = "gt_perturbed"  # 真值 + 角度噪声（合成数据）
    HEMISPHERE = "hemisphere"  # 上半球均匀采样
    FILE = "file"  # 从 "lx ly lz e" 文件读取


class SilhouetteMode(Enum):
    """轮廓法向损失的使用策略"""

    DROP_STAGE3 = "drop_stage3"  # 第三阶段去掉 L_Si（默认）
    FLAT = "flat"  # 轮廓法向替换为 [0,0,1]
    OCCLUDING = "occluding"  # 所有阶段都使用 L_Si
    OFF = "off"


class ShadowMode(Enum):
    """阴影图计算方式"""

    DYNAMIC = "dynamic"  # 每次迭代重新计算
    FROZEN = "frozen"  # 仅在第0轮计算一次
    OFF = "off"  # s ≡ 1


class NormalFitting(Enum):
    """深度到法向的拟合规则"""

    WEIGHTED = "weighted"
    CROSS = "cross"
    TRIANGLE = "triangle"


class SerializableModel:
    """可序列化模型基类"""

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典"""
        return asdict(self)  # type: ignore

    def to_json(self, indent: Optional[int] = None) -> str:
        """转换为JSON字符串"""
        return json.dumps(self.to_dict(), default=self._json_serializer, indent=indent)

    @classmethod
    def from_dict(cls: Type[T], data: Dict[str, Any]) -> T:
        """从字典创建实例，忽略构造函数不接受的键"""
        sig = inspect.signature(cls.__init__)
        valid_params = set(sig.parameters.keys()) - {"self"}

        filtered_data = {k: v for k, v in data.items() if k in valid_params}
        instance = cls(**filtered_data)
        for k, v in cls.__dict__.items():
            if issubclass(v.__class__, Enum):  # 默认值为枚举的字段做类型还原
                value = getattr(instance, k)
                setattr(instance, k, v.__class__(value))
        return instance

    @classmethod
    def from_json(cls: Type[T], json_str: str) -> T:
        """从JSON字符串创建实例"""
        data = json.loads(json_str)
        return cls.from_dict(data)

    @staticmethod
    def _json_serializer(obj: Any) -> Union[Any, str]:
        """JSON序列化器，处理特殊类型"""
        if isinstance(obj, Enum):
            return obj.value
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, np.generic):
            return obj.item()
        elif isinstance(obj, Path):
            return str(obj)
        elif hasattr(obj, "to_dict"):
            return obj.to_dict()
        return str(obj)


_ACTIVATIONS = ("softplus", "tanh", "sigmoid", "linear")


def _matches(value: Any, hint: Any) -> bool:
    """值是否符合字段的类型注解（bool 不算数值，整数值的 float 可作 int）"""
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        return any(_matches(value, arg) for arg in args)
    if hint is type(None):
        return value is None
    if origin in (list, tuple):
        return isinstance(value, (list, tuple)) and all(_matches(item, args[0]) for item in value)
    if isinstance(hint, type) and issubclass(hint, Enum):
        return isinstance(value, hint)
    if hint is bool:
        return isinstance(value, (bool, np.bool_))
    if isinstance(value, (bool, np.bool_)):
        return False
    if hint is int:
        return isinstance(value, numbers.Integral) or (isinstance(value, float) and value.is_integer())
    if hint is float:
        return isinstance(value, numbers.Real)
    return isinstance(value, hint)


@dataclass
class RunConfig(SerializableModel):
    """求解器运行配置（JSON 存储，加载时校验，拒绝未知键）"""

    seed: int = 0
    num_samples: int = 64
    num_bases: int = 12
    encoding_octaves: int = 10
    depth_hidden: List[int] = field(default_factory=lambda: [128, 128, 128, 128])
    material_hidden: List[int] = field(default_factory=lambda: [128, 128, 128, 128])
    activation: str = "softplus"
    stage_epochs: List[int] = field(default_factory=lambda: [500, 1000, 500])
    lambda_smooth: float = 0.01
    lambda_normal: float = 0.02
    lambda_silhouette: float = 0.01
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    adam_betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    alpha_init: float = 400.0
    beta_init: float = 3.0
    width_init_range: List[float] = field(default_factory=lambda: [10.0, 300.0])
    width_bounds: List[float] = field(default_factory=lambda: [1.0, 1000.0])
    annealing: bool = True
    anneal_epochs: Optional[int] = None
    light_init: LightInit = LightInit.GT_PERTURBED
    light_noise_deg: float = 5.0
    intensity_noise: float = 0.05
    light_file: Optional[str] = None
    silhouette_mode: SilhouetteMode = SilhouetteMode.DROP_STAGE3
    percentile_filter: bool = False
    percentile: float = 25.0
    gamma: float = 1.0
    max_resolution: Optional[int] = 128
    pixel_pitch: Optional[float] = None
    shadows: ShadowMode = ShadowMode.DYNAMIC
    isotropic: bool = False
    chromatic_specular: bool = False
    normal_fitting: NormalFitting = NormalFitting.WEIGHTED
    keep_normal_smoothness: bool = False
    drop_material_smoothness: bool = False
    drop_geometry_smoothness: bool = False
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    resume_from: Optional[str] = None
    log_every: int = 50

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")
        try:
            config = super().from_dict(data)
        except ValueError as exc:
            raise ConfigError(f"Invalid config value: {exc}") from exc
        config.validate()
        return config

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        """从 JSON 文件加载配置"""
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        return cls.from_dict(data)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json(indent=2), encoding="utf-8")

    @property
    def total_epochs(self) -> int:
        return int(sum(self.stage_epochs))

    @property
    def effective_anneal_epochs(self) -> int:
        return int(self.anneal_epochs if self.anneal_epochs is not None else self.stage_epochs[0])

    def with_total_epochs(self, total: int) -> "RunConfig":
        """按 1:2:1 的比例把总轮数分配到三个阶段"""
        if total < 0:
            raise ConfigError(f"epochs must be >= 0, got {total}")
        first = total // 4
        last = total // 4
        data = self.to_dict()
        data["stage_epochs"] = [first, total - first - last, last]
        return RunConfig.from_dict(data)

    def validate(self) -> None:
        """检查取值范围，违规时抛出 ConfigError"""

        def require(condition: bool, message: str) -> None:
            if not condition:
                raise ConfigError(message)

        hints = get_type_hints(type(self))
        for item in fields(self):
            value = getattr(self, item.name)
            require(_matches(value, hints[item.name]), f"{item.name} has the wrong type: {value!r}")

        require(len(self.stage_epochs) == 3, "stage_epochs must list exactly 3 stages")
        require(all(int(e) == e and e >= 0 for e in self.stage_epochs), "stage_epochs must be non-negative integers")
        require(self.num_samples >= 1, "num_samples must be >= 1")
        require(self.num_bases >= 1, "num_bases must be >= 1")
        require(self.encoding_octaves >= 1, "encoding_octaves must be >= 1")
        require(all(w >= 1 for w in self.depth_hidden + self.material_hidden), "hidden widths must be >= 1")
        require(self.activation in _ACTIVATIONS, f"activation must be one of {_ACTIVATIONS}")
        for name in ("lambda_smooth", "lambda_normal", "lambda_silhouette"):
            require(getattr(self, name) >= 0, f"{name} must be >= 0")
        require(0 < self.lr_min <= self.lr_max, "learning rates must satisfy 0 < lr_min <= lr_max")
        betas_ok = len(self.adam_betas) == 2 and all(0 <= b < 1 for b in self.adam_betas)
        require(betas_ok, "adam_betas must be 2 values in [0,1)")
        require(self.adam_eps > 0, "adam_eps must be > 0")
        lo, hi = self.width_bounds
        require(0 < lo < hi, "width_bounds must satisfy 0 < low < high")
        init_lo, init_hi = self.width_init_range
        require(lo <= init_lo <= init_hi <= hi, "width_init_range must lie within width_bounds")
        require(self.anneal_epochs is None or self.anneal_epochs >= 1, "anneal_epochs must be >= 1")
        require(self.light_noise_deg >= 0 and self.intensity_noise >= 0, "light noise levels must be >= 0")
        require(self.light_init != LightInit.FILE or bool(self.light_file), "light_init 'file' needs light_file")
        require(0 <= self.percentile < 100, "percentile must lie in [0, 100)")
        require(self.gamma > 0, "gamma must be > 0")
        require(self.max_resolution is None or self.max_resolution >= 4, "max_resolution must be >= 4")
        require(self.pixel_pitch is None or self.pixel_pitch > 0, "pixel_pitch must be > 0")
        require(self.checkpoint_every >= 0, "checkpoint_every must be >= 0")
        require(self.checkpoint_every == 0 or bool(self.checkpoint_dir), "checkpoint_every needs checkpoint_dir")
        require(self.log_every >= 1, "log_every must be >= 1")


@dataclass
class LightSet:
    """f 个单位光照方向和正的光强"""

    directions: np.ndarray  # (f, 3)
    intensities: np.ndarray  # (f,) 或 (f, 3)

    def __post_init__(self) -> None:
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.shape[0] != self.directions.shape[0]:
            raise ValueError(
                f"LightSet: {self.directions.shape[0]} directions but {self.intensities.shape[0]} intensities"
            )

    def __len__(self) -> int:
        return int(self.directions.shape[0])

    @property
    def scalar_intensities(self) -> np.ndarray:
        """每张图一个标量光强（三通道时取均值）"""
        return self.intensities if self.intensities.ndim == 1 else self.intensities.mean(axis=1)

    def normalized(self) -> "LightSet":
        norms = np.linalg.norm(self.directions, axis=1, keepdims=True)
        return LightSet(self.directions / np.maximum(norms, 1e-12), self.intensities.copy())

    def to_text(self) -> str:
        """每行 "lx ly lz e" """
        rows = [
            f"{d[0]:.9f} {d[1]:.9f} {d[2]:.9f} {e:.9f}" for d, e in zip(self.directions, self.scalar_intensities)
        ]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LightSet":
        rows = [line.split() for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
        if not rows or any(len(r) != 4 for r in rows):
            raise ValueError("light file needs one 'lx ly lz e' line per image")
        data = np.array(rows, dtype=np.float64)
        return cls(data[:, :3], data[:, 3])


@dataclass
class ObservationSet:
    """观测图像栈、掩码，以及可选的真值（仅用于评估与初始化）"""

    images: np.ndarray  # (f, H, W, C) 线性强度
    mask: np.ndarray  # (H, W) bool
    lights: Optional[LightSet] = None
    normals_gt: Optional[np.ndarray] = None  # (H, W, 3)
    loss_mask: Optional[np.ndarray] = None  # (f, H, W) bool，None 表示全部参与
    name: str = "observations"

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.images.ndim != 4 or self.images.shape[1:3] != self.mask.shape:
            raise ValueError(f"ObservationSet: images {self.images.shape} do not match mask {self.mask.shape}")
        if self.loss_mask is None:
            self.loss_mask = np.broadcast_to(self.mask, self.images.shape[:3]).copy()
        if self.lights is not None and len(self.lights) != self.num_images:
            raise ValueError(f"ObservationSet: {self.num_images} images but {len(self.lights)} lights")

    @property
    def num_images(self) -> int:
        return int(self.images.shape[0])

    @property
    def height(self) -> int:
        return int(self.mask.shape[0])

    @property
    def width(self) -> int:
        return int(self.mask.shape[1])

    @property
    def channels(self) -> int:
        return int(self.images.shape[3])


@dataclass
class EpochRecord(SerializableModel):
    """单轮训练记录，各分量均已乘以权重，total 等于分量之和"""

    epoch: int = 0
    stage: int = 1
    total: float = 0.0
    ir: float = 0.0
    silhouette: float = 0.0
    smooth_rd: float = 0.0
    smooth_w: float = 0.0
    smooth_n: float = 0.0
    lr: float = 0.0
    active_bases: int = 0

    CSV_FIELDS = (
        "epoch",
        "stage",
        "total",
        "ir",
        "silhouette",
        "smooth_rd",
        "smooth_w",
        "smooth_n",
        "lr",
        "active_bases",
    )

    def to_row(self) -> List[str]:
        return [repr(getattr(self, name)) for name in self.CSV_FIELDS]


@dataclass
class SolveResult:
    """求解结果：全部为 H×W 稠密数组（掩码外为 0）"""

    normals: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    lights: LightSet
    shadow_maps: np.ndarray  # (f, H, W)
    albedo: np.ndarray  # (H, W, C)
    spec_weights: np.ndarray  # (H, W, N_G) 或 (H, W, C, N_G)
    widths: np.ndarray  # (N_G, 2) 列为 r^x, r^y
    alpha: float
    beta: float
    mask: np.ndarray
    history: List[EpochRecord] = field(default_factory=list)
    config: Optional[RunConfig] = None

    def loss_history(self) -> List[Tuple[int, float]]:
        return [(r.epoch, r.total) for r in self.history]
