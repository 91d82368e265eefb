#!/usr/bin/env python3
"""
Inverse-rendering optimisation: losses, three-stage schedule and the solver loop
逆渲染优化：损失函数、三阶段训练计划与求解主循环
"""
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from uncal_ps.core import autodiff as ad
from uncal_ps.core.autodiff import AdamState, Tape, Var
from uncal_ps.core.models import (
    EpochRecord,
    ObservationSet,
    RunConfig,
    ShadowMode,
    SilhouetteMode,
    SolveResult,
)
from uncal_ps.io.dataset import percentile_filter
from uncal_ps.solver.fields import LearnableParams
from uncal_ps.solver.geometry import DepthField, PixelGrid, Vec3, fit_normals, silhouette_targets
from uncal_ps.solver.reflectance import AsgBasisSet, render_stack
from uncal_ps.solver.shadow import soft_shadows
from uncal_ps.utils.logger import debug, info, warning

TERMS = ("ir", "silhouette", "smooth_rd", "smooth_w", "smooth_n")


class SolveError(RuntimeError):
    """训练过程中出现非有限的损失"""

    def __init__(self, epoch: int, term: str, value: float):
        super().__init__(f"non-finite loss at epoch {epoch}: term '{term}' = {value}")
        self.epoch = epoch
        self.term = term


@dataclass
class StageWeights:
    """某一阶段各损失项的权重（L_IR 的权重恒为 1）"""

    silhouette: float
    smooth_rd: float
    smooth_w: float
    smooth_n: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "ir": 1.0,
            "silhouette": self.silhouette,
            "smooth_rd": self.smooth_rd,
            "smooth_w": self.smooth_w,
            "smooth_n": self.smooth_n,
        }


@dataclass
class StageSchedule:
    """三阶段训练计划与余弦学习率"""

    epochs: Tuple[int, int, int] = (500, 1000, 500)
    lambda_smooth: float = 0.01
    lambda_normal: float = 0.02
    lambda_silhouette: float = 0.01
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    silhouette_mode: SilhouetteMode = SilhouetteMode.DROP_STAGE3
    keep_normal_smoothness: bool = False
    drop_material_smoothness: bool = False
    drop_geometry_smoothness: bool = False

    @classmethod
    def from_config(cls, config: RunConfig) -> "StageSchedule":
        e1, e2, e3 = (int(e) for e in config.stage_epochs)
        return cls(
            epochs=(e1, e2, e3),
            lambda_smooth=config.lambda_smooth,
            lambda_normal=config.lambda_normal,
            lambda_silhouette=config.lambda_silhouette,
            lr_max=config.lr_max,
            lr_min=config.lr_min,
            silhouette_mode=config.silhouette_mode,
            keep_normal_smoothness=config.keep_normal_smoothness,
            drop_material_smoothness=config.drop_material_smoothness,
            drop_geometry_smoothness=config.drop_geometry_smoothness,
        )

    @property
    def total(self) -> int:
        return int(sum(self.epochs))

    def boundaries(self) -> List[Tuple[int, int]]:
        """各阶段的 [start, end) 区间，恰好覆盖 [0, total)"""
        starts = np.cumsum((0,) + self.epochs[:-1])
        return [(int(s), int(s + n)) for s, n in zip(starts, self.epochs)]

    def stage_of(self, epoch: int) -> int:
        for stage, (start, end) in enumerate(self.boundaries(), start=1):
            if start <= epoch < end:
                return stage
        raise ValueError(f"epoch {epoch} lies outside the schedule [0, {self.total})")

    def learning_rate(self, epoch: int) -> float:
        if self.total == 0:
            return self.lr_max
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * epoch / self.total))

    def weights(self, stage: int) -> StageWeights:
        lam, lam_n = self.lambda_smooth, self.lambda_normal
        silhouette = self.lambda_silhouette
        mode = self.silhouette_mode
        if mode == SilhouetteMode.OFF or (mode == SilhouetteMode.DROP_STAGE3 and stage == 3):
            silhouette = 0.0
        if stage == 1:
            weights = StageWeights(silhouette, lam, lam, lam_n)
        else:
            # 第二阶段法向平滑的权重取 λ
            normal = lam if stage == 2 else (lam_n if self.keep_normal_smoothness else 0.0)
            weights = StageWeights(silhouette, 0.0, 0.0, normal)
        if self.drop_material_smoothness:
            weights.smooth_rd = 0.0
        if self.drop_geometry_smoothness:
            weights.smooth_w = 0.0
            weights.smooth_n = 0.0
        return weights


def active_bases(epoch: int, num_bases: int, anneal_epochs: int, annealing: bool = True) -> int:
    """退火：激活的 ASG 基个数从 1 线性增加到 N_G"""
    if not annealing or anneal_epochs <= 0:
        return num_bases
    return int(min(num_bases, 1 + (epoch * num_bases) // anneal_epochs))


def loss_ir(rendered: Var, observed: np.ndarray, mask: np.ndarray) -> Var:
    """
    L_IR：参与计算的 (像素, 图像, 通道) 上的平均绝对误差

    Args:
        rendered: (P, f, C) 渲染结果
        observed: (P, f, C) 观测值
        mask: (P, f) 参与损失的 (像素, 图像)

    Returns:
        标量 Var
    """
    observed = np.asarray(observed, dtype=np.float64)
    if rendered.shape != observed.shape:
        raise ad.ShapeError("loss_ir", [rendered.shape, observed.shape], "rendered and observed stacks differ")
    weight = np.broadcast_to(np.asarray(mask, dtype=np.float64)[..., None], observed.shape)
    count = float(weight.sum())
    if count == 0:
        raise ValueError("loss_ir: the loss mask is empty")
    return (ad.absolute(rendered - observed) * weight).sum() / count


def smoothness(grid: PixelGrid, values: Var) -> Var:
    """mean |∂X/∂u + ∂X/∂v|，对像素和分量求平均"""
    du = ad.gather(values, grid.du_hi) - ad.gather(values, grid.du_lo)
    dv = ad.gather(values, grid.dv_hi) - ad.gather(values, grid.dv_lo)
    return ad.absolute(du + dv).mean()


def loss_smooth(
    grid: PixelGrid, albedo: Var, depth: Var, normals: Var, lam: float, lam_n: float
) -> Var:
    """L_smooth = λ·S(R^d) + λ·S(W) + λ_N·S(N)"""
    return smoothness(grid, albedo) * lam + smoothness(grid, depth) * lam + smoothness(grid, normals) * lam_n


def loss_silhouette(normals: Var, index: np.ndarray, targets: np.ndarray) -> Var:
    """L_Si = mean(1 − cos)，目标为空时返回 0 并给出警告"""
    if len(index) == 0:
        warning("no silhouette pixels; silhouette loss is 0", prefix="SOLVER")
        return ad.constant(0.0)
    est = ad.gather(normals, np.asarray(index), axis=0)
    cos = (est * np.asarray(targets, dtype=np.float64)).sum(axis=1)
    return (1.0 - cos).mean()


class Solver:
    """联合估计深度、材质、光照与阴影的求解器"""

    def __init__(self, observations: ObservationSet, config: Optional[RunConfig] = None):
        self.config = config if config is not None else RunConfig()
        if observations.num_images < 3:
            raise ValueError(f"solve needs at least 3 images, got {observations.num_images}")
        if self.config.percentile_filter:
            observations = percentile_filter(observations, self.config.percentile)
        self.observations = observations
        self.schedule = StageSchedule.from_config(self.config)
        self.grid = PixelGrid(observations.mask, self.config.pixel_pitch)
        self.rng = np.random.default_rng(self.config.seed)
        self.params = LearnableParams(self.config, observations, self.rng)
        self.codes = self.params.encoder(self.grid.coordinates())
        g = self.grid
        self.observed = observations.images[:, g.vs, g.us, :].transpose(1, 0, 2)
        assert observations.loss_mask is not None
        self.loss_mask = observations.loss_mask[:, g.vs, g.us].T
        self.silhouette_index, self.silhouette_normals = silhouette_targets(g)
        if self.config.silhouette_mode == SilhouetteMode.FLAT:
            self.silhouette_normals = np.tile([0.0, 0.0, 1.0], (len(self.silhouette_index), 1))
        if not len(self.silhouette_index) and self.config.silhouette_mode != SilhouetteMode.OFF:
            warning("mask has no silhouette pixels; silhouette loss disabled", prefix="SOLVER")
        self.adam = AdamState()
        self.history: List[EpochRecord] = []
        self.epoch = 0
        self.frozen_shadows: Optional[np.ndarray] = None
        self._check_lighting()
        if self.config.resume_from:
            self.load_checkpoint(self.config.resume_from)

    def _check_lighting(self) -> None:
        dirs = self.params.light_directions.value
        if np.all(np.abs(dirs - dirs[0]) < 1e-9):
            warning("all light directions are identical; the problem is degenerate", prefix="SOLVER")

    # ==================== 前向计算 ====================

    def _depth(self) -> Var:
        return self.params.depth_mlp(self.codes)

    def _shadows(self, field: DepthField, dense: Var) -> Union[Var, np.ndarray]:
        mode = self.config.shadows
        p = self.params
        if mode == ShadowMode.OFF:
            return np.ones((self.grid.count, self.observations.num_images))
        if mode == ShadowMode.FROZEN:
            if self.frozen_shadows is None:
                s = soft_shadows(
                    field, p.light_directions.value, p.alpha.value, p.beta.value, self.config.num_samples, dense=dense
                )
                self.frozen_shadows = s.value.copy()
            return self.frozen_shadows
        return soft_shadows(field, p.light_directions, p.alpha, p.beta, self.config.num_samples, dense=dense)

    def evaluate(self, epoch: int) -> Tuple[Var, Dict[str, Var], Dict[str, object]]:
        """
        计算当前参数下的损失

        Returns:
            (加权总损失, 加权分量, 中间结果)
        """
        stage = self.schedule.stage_of(epoch) if self.schedule.total else 3
        weights = self.schedule.weights(stage).as_dict()
        p = self.params
        depth = self._depth()
        if not np.all(np.isfinite(depth.value)):
            raise SolveError(epoch, "depth", float("nan"))
        field = DepthField(self.grid, depth)
        dense = field.dense()
        normals = fit_normals(field, self.config.normal_fitting.value)
        normal_stack = normals.stacked(axis=1)
        albedo, spec = p.material_mlp.split(p.material_mlp(self.codes))
        rx, ry = p.widths()
        active = active_bases(epoch, self.config.num_bases, self.config.effective_anneal_epochs, self.config.annealing)
        shadows = self._shadows(field, dense)
        rendered = render_stack(
            normals, albedo, spec, p.light_directions, p.intensities(), shadows, AsgBasisSet(rx, ry, active)
        )
        terms: Dict[str, Var] = {"ir": loss_ir(rendered, self.observed, self.loss_mask)}
        if weights["silhouette"] > 0 and len(self.silhouette_index):
            terms["silhouette"] = loss_silhouette(normal_stack, self.silhouette_index, self.silhouette_normals)
        if weights["smooth_rd"] > 0:
            terms["smooth_rd"] = smoothness(self.grid, albedo)
        if weights["smooth_w"] > 0:
            terms["smooth_w"] = smoothness(self.grid, depth)
        if weights["smooth_n"] > 0:
            terms["smooth_n"] = smoothness(self.grid, normal_stack)
        weighted = {name: term * weights[name] for name, term in terms.items()}
        for name, term in weighted.items():
            value = float(term.value)
            if not math.isfinite(value):
                raise SolveError(epoch, name, value)
        total = weighted["ir"]
        for name in TERMS[1:]:
            if name in weighted:
                total = total + weighted[name]
        extras = {
            "stage": stage,
            "active": active,
            "depth": depth,
            "normals": normals,
            "albedo": albedo,
            "spec": spec,
            "shadows": shadows,
        }
        return total, weighted, extras

    # ==================== 训练循环 ====================

    def step(self) -> EpochRecord:
        """执行一个 epoch（全图批量）"""
        epoch = self.epoch
        lr = self.schedule.learning_rate(epoch)
        params = self.params.parameters()
        ad.zero_grad(params)
        with Tape():
            total, weighted, extras = self.evaluate(epoch)
            ad.backward(total)
        beta1, beta2 = self.config.adam_betas
        ad.adam_step(params, self.adam, lr, (beta1, beta2), self.config.adam_eps)
        self.params.project()
        values = {name: float(weighted[name].value) if name in weighted else 0.0 for name in TERMS}
        record = EpochRecord(
            epoch=epoch,
            stage=int(extras["stage"]),  # type: ignore[call-overload]
            total=float(total.value),
            lr=lr,
            active_bases=int(extras["active"]),  # type: ignore[call-overload]
            **values,
        )
        self.history.append(record)
        self.epoch += 1
        return record

    def run(self) -> SolveResult:
        """跑完剩余的训练计划并返回结果"""
        total = self.schedule.total
        info(
            f"solving '{self.observations.name}': {self.observations.num_images} images, "
            f"{self.grid.count} pixels, {total} epochs (starting at {self.epoch})",
            prefix="SOLVER",
        )
        every = self.config.checkpoint_every
        while self.epoch < total:
            record = self.step()
            if record.epoch % self.config.log_every == 0 or self.epoch == total:
                info(
                    f"epoch {record.epoch:5d} stage {record.stage} loss {record.total:.6f} "
                    f"ir {record.ir:.6f} lr {record.lr:.2e} bases {record.active_bases}",
                    prefix="SOLVER",
                )
            if every and self.epoch % every == 0:
                assert self.config.checkpoint_dir is not None
                self.save_checkpoint(Path(self.config.checkpoint_dir) / f"checkpoint_{self.epoch:05d}.npz")
        return self.result()

    def result(self) -> SolveResult:
        """用当前参数构造稠密输出"""
        epoch = max(self.epoch - 1, 0)
        _, _, extras = self.evaluate(epoch)
        g = self.grid
        normals: Vec3 = extras["normals"]  # type: ignore[assignment]
        shadows = extras["shadows"]
        shadow_values = shadows.value if isinstance(shadows, Var) else np.asarray(shadows)
        spec = extras["spec"].value  # type: ignore[attr-defined]
        spec = spec[:, 0, :] if spec.shape[1] == 1 else spec
        return SolveResult(
            normals=g.scatter_image(normals.value),
            depth=g.scatter_image(extras["depth"].value),  # type: ignore[attr-defined]
            lights=self.params.light_set(),
            shadow_maps=np.stack([g.scatter_image(column, fill=1.0) for column in shadow_values.T]),
            albedo=g.scatter_image(extras["albedo"].value),  # type: ignore[attr-defined]
            spec_weights=g.scatter_image(spec),
            widths=self.params.width_table(),
            alpha=float(self.params.alpha.value),
            beta=float(self.params.beta.value),
            mask=g.mask.copy(),
            history=list(self.history),
            config=self.config,
        )

    # ==================== 检查点 ====================

    def save_checkpoint(self, path: Union[str, Path]) -> Path:
        """参数、Adam 状态、epoch、历史、随机数状态与配置写入一个 .npz"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays: Dict[str, np.ndarray] = {}
        for name, value in self.params.state_dict().items():
            arrays[f"param/{name}"] = value
        for name, value in self.adam.m.items():
            arrays[f"adam_m/{name}"] = value
        for name, value in self.adam.v.items():
            arrays[f"adam_v/{name}"] = value
        arrays["adam_step"] = np.array(self.adam.step)
        arrays["epoch"] = np.array(self.epoch)
        arrays["history"] = np.array(json.dumps([r.to_dict() for r in self.history]))
        arrays["rng_state"] = np.array(json.dumps(self.rng.bit_generator.state))
        arrays["config"] = np.array(self.config.to_json())
        if self.frozen_shadows is not None:
            arrays["frozen_shadows"] = self.frozen_shadows
        with open(path, "wb") as f:
            np.savez(f, **arrays)
        debug(f"checkpoint written to {path} at epoch {self.epoch}", prefix="SOLVER")
        return path

    def load_checkpoint(self, path: Union[str, Path]) -> None:
        """从检查点恢复，之后的训练与不中断时逐位一致"""
        with np.load(Path(path), allow_pickle=False) as data:
            state = {k[len("param/") :]: data[k] for k in data.files if k.startswith("param/")}
            self.params.load_state_dict(state)
            self.adam = AdamState(
                m={k[len("adam_m/") :]: data[k].copy() for k in data.files if k.startswith("adam_m/")},
                v={k[len("adam_v/") :]: data[k].copy() for k in data.files if k.startswith("adam_v/")},
                step=int(data["adam_step"]),
            )
            self.epoch = int(data["epoch"])
            self.history = [EpochRecord.from_dict(r) for r in json.loads(str(data["history"]))]
            self.rng.bit_generator.state = json.loads(str(data["rng_state"]))
            self.frozen_shadows = data["frozen_shadows"].copy() if "frozen_shadows" in data.files else None
            saved = RunConfig.from_json(str(data["config"]))
        if saved.to_dict() != {**self.config.to_dict(), "resume_from": saved.resume_from}:
            warning("resuming with a config that differs from the checkpoint's", prefix="SOLVER")
        info(f"resumed from {path} at epoch {self.epoch}", prefix="SOLVER")


def solve(observations: ObservationSet, config: Optional[RunConfig] = None) -> SolveResult:
    """运行完整的三阶段求解"""
    return Solver(observations, config).run()
