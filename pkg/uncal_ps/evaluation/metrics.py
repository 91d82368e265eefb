#!/usr/bin/env python3
"""
Evaluation metrics: angular errors, scale-invariant intensity error, shadow IoU
评估指标：平均角度误差（MAE）、尺度无关光强误差 E_int、阴影图 IoU
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from uncal_ps.core.models import LightSet, SerializableModel
from uncal_ps.utils.logger import warning

UNIT_TOLERANCE = 1e-9


def _unit(vectors: np.ndarray, label: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        warning(f"{label} vectors are not unit length; normalizing", prefix="METRICS")
        return vectors / np.maximum(norms, 1e-12)
    return vectors


def angular_errors(est: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """逐向量的夹角（度），arccos 参数截断到 [−1, 1]"""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.shape[-1] != 3:
        raise ValueError(f"angular error needs matching (..., 3) arrays, got {est.shape} and {gt.shape}")
    cos = np.einsum("...k,...k->...", _unit(est, "estimated"), _unit(gt, "ground-truth"))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def mae_degrees(est: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """
    平均角度误差（度）

    Args:
        est: (..., 3) 估计的单位向量（法向图或光照方向列表）
        gt: 与 est 同形状的真值
        mask: 可选，与 est[..., 0] 同形状的布尔掩码

    Returns:
        mean(arccos(clamp(est·gt, −1, 1))) in degrees
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != est.shape[:-1] or est.shape != gt.shape:
            raise ValueError(f"mask shape {mask.shape} does not match {est.shape} and {gt.shape}")
        est, gt = est[mask], gt[mask]
    errors = angular_errors(est, gt)
    if errors.size == 0:
        raise ValueError("no vectors to compare")
    return float(errors.mean())


def e_int(e: np.ndarray, gt: np.ndarray) -> float:
    """
    尺度无关的相对光强误差 E_int = mean(|η e − ẽ| / ẽ)，η 由最小二乘求得

    Args:
        e: (f,) 或 (f, C) 估计光强
        gt: 同形状的真值光强，全部 > 0

    Returns:
        E_int ≥ 0
    """
    e = np.asarray(e, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if e.shape != gt.shape or e.size == 0:
        raise ValueError(f"intensity arrays must match and be non-empty, got {e.shape} and {gt.shape}")
    if np.any(gt <= 0):
        raise ValueError("ground-truth intensities must all be positive")
    denom = float(np.dot(e, e))
    if denom == 0.0:
        raise ValueError("estimated intensities are all zero")
    eta = float(np.dot(e, gt)) / denom
    return float(np.mean(np.abs(eta * e - gt) / gt))


def shadow_iou(
    soft: np.ndarray,
    hard_gt: np.ndarray,
    threshold: float = 0.5,
    mask: Optional[np.ndarray] = None,
) -> float:
    """
    阴影区域的交并比：估计阴影为 soft < threshold，真值阴影为 hard = 0

    Args:
        soft: 软阴影图
        hard_gt: 同形状的 0/1 真值（1 为受光）
        threshold: 二值化阈值
        mask: 可选的评估区域

    Returns:
        IoU ∈ [0, 1]；两者都没有阴影时为 1
    """
    soft = np.asarray(soft, dtype=np.float64)
    hard_gt = np.asarray(hard_gt, dtype=np.float64)
    if soft.shape != hard_gt.shape:
        raise ValueError(f"shadow maps differ in shape: {soft.shape} vs {hard_gt.shape}")
    region = np.ones(soft.shape, dtype=bool)
    if mask is not None:
        region = np.broadcast_to(np.asarray(mask, dtype=bool), soft.shape)
    est = (soft < threshold) & region
    ref = (hard_gt < 0.5) & region
    union = np.count_nonzero(est | ref)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(est & ref) / union)


@dataclass
class EvalReport(SerializableModel):
    """评估报告：不可用的指标为 None，文本输出时省略"""

    dataset: str = ""
    normal_mae: Optional[float] = None
    light_mae: Optional[float] = None
    e_int: Optional[float] = None
    per_light_errors: List[float] = field(default_factory=list)
    shadow_iou: List[float] = field(default_factory=list)

    CSV_FIELDS = ("dataset", "normal_mae", "light_mae", "e_int", "mean_shadow_iou", "num_lights")

    @property
    def mean_shadow_iou(self) -> Optional[float]:
        return float(np.mean(self.shadow_iou)) if self.shadow_iou else None

    def to_text(self) -> str:
        """key: value 文本，每行一个指标"""
        lines = [f"dataset: {self.dataset}"]
        for key in ("normal_mae", "light_mae", "e_int"):
            value = getattr(self, key)
            if value is not None:
                lines.append(f"{key}: {value:.6f}")
        if self.per_light_errors:
            lines.append("per_light_errors: " + " ".join(f"{v:.4f}" for v in self.per_light_errors))
        if self.shadow_iou:
            lines.append(f"mean_shadow_iou: {self.mean_shadow_iou:.6f}")
            lines.append("shadow_iou: " + " ".join(f"{v:.4f}" for v in self.shadow_iou))
        return "\n".join(lines) + "\n"

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_FIELDS)

    def csv_row(self) -> str:
        """批量实验用的一行 CSV，缺失的指标为空"""
        values = {
            "dataset": self.dataset,
            "normal_mae": self.normal_mae,
            "light_mae": self.light_mae,
            "e_int": self.e_int,
            "mean_shadow_iou": self.mean_shadow_iou,
            "num_lights": len(self.per_light_errors) or None,
        }
        cells = []
        for key in self.CSV_FIELDS:
            value = values[key]
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(f"{value:.6f}")
            else:
                cells.append(str(value))
        return ",".join(cells)


def build_report(
    dataset: str = "",
    normals: Optional[np.ndarray] = None,
    normals_gt: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
    lights: Optional[LightSet] = None,
    lights_gt: Optional[LightSet] = None,
    shadows: Optional[np.ndarray] = None,
    shadows_gt: Optional[np.ndarray] = None,
    threshold: float = 0.5,
) -> EvalReport:
    """
    根据可用的估计与真值组装报告，缺少真值的指标保持为 None

    Args:
        normals, normals_gt: (H, W, 3) 法向图
        mask: (H, W) 评估掩码
        lights, lights_gt: 估计与真值光照
        shadows, shadows_gt: (f, H, W) 软阴影与 0/1 真值
    """
    report = EvalReport(dataset=dataset)
    if normals is not None and normals_gt is not None:
        region = mask if mask is not None else np.ones(normals.shape[:2], dtype=bool)
        # GT maps may hold zero vectors outside the object
        valid = region & (np.linalg.norm(normals_gt, axis=-1) > 0.5)
        report.normal_mae = mae_degrees(normals, normals_gt, valid)
    if lights is not None and lights_gt is not None:
        if len(lights) != len(lights_gt):
            raise ValueError(f"{len(lights)} estimated lights but {len(lights_gt)} ground-truth lights")
        errors = angular_errors(lights.directions, lights_gt.directions)
        report.per_light_errors = [float(v) for v in errors]
        report.light_mae = float(errors.mean())
        report.e_int = e_int(lights.scalar_intensities, lights_gt.scalar_intensities)
    if shadows is not None and shadows_gt is not None:
        report.shadow_iou = [shadow_iou(s, h, threshold, mask) for s, h in zip(shadows, shadows_gt)]
    return report
