#!/usr/bin/env python3
"""
Dataset ingestion in the DiLiGenT directory layout
数据集读写（DiLiGenT 目录布局）与预处理

    root/
      filenames.txt            one image file name per line
      light_directions.txt     optional, "lx ly lz" per line
      light_intensities.txt    optional, "e" or "er eg eb" per line
      mask.png                 binary mask
      normal_gt.pfm | .png     optional ground-truth normals
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from uncal_ps.core.models import LightSet, ObservationSet
from uncal_ps.io.images import (
    apply_gamma,
    capped_size,
    read_image,
    read_normal_png,
    read_pfm,
    resize_area,
    write_pfm,
    write_png,
)
from uncal_ps.utils.logger import debug, info

PathLike = Union[str, Path]


class DatasetError(ValueError):
    """数据集布局或内容非法"""


@dataclass
class DatasetLayout:
    """数据集目录中各文件的位置"""

    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    @property
    def filenames_file(self) -> Path:
        return self.root / "filenames.txt"

    @property
    def directions_file(self) -> Path:
        return self.root / "light_directions.txt"

    @property
    def intensities_file(self) -> Path:
        return self.root / "light_intensities.txt"

    @property
    def mask_file(self) -> Path:
        return self.root / "mask.png"

    @property
    def normal_file(self) -> Optional[Path]:
        for name in ("normal_gt.pfm", "normal_gt.png"):
            if (self.root / name).is_file():
                return self.root / name
        return None

    def image_paths(self) -> List[Path]:
        if not self.root.is_dir():
            raise DatasetError(f"dataset directory {self.root} does not exist")
        if not self.filenames_file.is_file():
            raise DatasetError(f"{self.filenames_file} is missing")
        names = [line.strip() for line in self.filenames_file.read_text(encoding="utf-8").splitlines() if line.strip()]
        if not names:
            raise DatasetError(f"{self.filenames_file} lists no images")
        return [self.root / name for name in names]


def _read_table(path: Path, columns: Sequence[int]) -> np.ndarray:
    try:
        rows = [line.split() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        table = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"{path} is not a table of numbers: {exc}") from exc
    if table.ndim != 2 or table.shape[1] not in columns:
        raise DatasetError(f"{path} must hold {' or '.join(map(str, columns))} column(s) per line")
    return table


def _read_lights(layout: DatasetLayout, count: int) -> Optional[LightSet]:
    if not layout.directions_file.is_file():
        debug(f"no light files in {layout.root}; lights unavailable", prefix="IO")
        return None
    directions = _read_table(layout.directions_file, (3,))
    if layout.intensities_file.is_file():
        intensities = _read_table(layout.intensities_file, (1, 3))
        intensities = intensities[:, 0] if intensities.shape[1] == 1 else intensities
    else:
        intensities = np.ones(len(directions))
    if len(directions) != count or len(intensities) != count:
        raise DatasetError(
            f"{count} images but {len(directions)} light directions and {len(intensities)} intensities"
        )
    return LightSet(directions, intensities).normalized()


def _decode(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"image {path} is missing")
    try:
        return read_image(path)
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc


def load_dataset(
    path: PathLike, gamma: float = 1.0, max_resolution: Optional[int] = None, workers: int = 4
) -> ObservationSet:
    """
    读取数据集目录

    Args:
        path: 数据集根目录
        gamma: 图像的 gamma（1.0 表示已是线性）
        max_resolution: 长边上限，超出时做面积平均缩小
        workers: 并行解码线程数（结果顺序与 filenames.txt 一致）

    Returns:
        ObservationSet
    """
    layout = DatasetLayout(Path(path))
    paths = layout.image_paths()
    if not layout.mask_file.is_file():
        raise DatasetError(f"{layout.mask_file} is missing")
    mask_image = _decode(layout.mask_file)
    if mask_image.ndim == 3:
        mask_image = mask_image.mean(axis=2)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        images = list(pool.map(_decode, paths))
    for p, image in zip(paths, images):
        if image.shape[:2] != mask_image.shape:
            raise DatasetError(f"image {p.name} is {image.shape[:2]} but the mask is {mask_image.shape}")
    channels = {1 if im.ndim == 2 else im.shape[2] for im in images}
    if len(channels) != 1:
        raise DatasetError(f"images mix channel counts {sorted(channels)}")
    stack = np.stack([im if im.ndim == 3 else im[:, :, None] for im in images])

    normals = None
    if layout.normal_file is not None:
        reader = read_pfm if layout.normal_file.suffix == ".pfm" else read_normal_png
        normals = reader(layout.normal_file)
        expected = mask_image.shape + (3,)
        if normals.shape != expected:
            raise DatasetError(f"{layout.normal_file.name} has shape {normals.shape}, expected {expected}")

    size = capped_size(*mask_image.shape, max_resolution)
    if size != mask_image.shape:
        info(f"downsampling {mask_image.shape} -> {size}", prefix="IO")
        stack = np.stack([resize_area(im, size) for im in stack])
        mask_image = resize_area(mask_image, size)
        if normals is not None:
            normals = resize_area(normals, size)
            norm = np.linalg.norm(normals, axis=2, keepdims=True)
            normals = np.where(norm > 1e-6, normals / np.maximum(norm, 1e-12), 0.0)

    mask = mask_image > 0.5
    if not mask.any():
        raise DatasetError(f"mask {layout.mask_file} is empty")
    stack = apply_gamma(stack, gamma)
    lights = _read_lights(layout, len(paths))
    info(
        f"loaded {len(paths)} images of {mask.shape} ({int(mask.sum())} masked pixels) from {layout.root}", prefix="IO"
    )
    return ObservationSet(images=stack, mask=mask, lights=lights, normals_gt=normals, name=layout.root.name)


def save_dataset(observations: ObservationSet, path: PathLike, bits: int = 16) -> DatasetLayout:
    """把观测数据写成数据集目录（PNG 图像、掩码、光照文件、normal_gt.pfm）"""
    layout = DatasetLayout(Path(path))
    layout.root.mkdir(parents=True, exist_ok=True)
    names = [f"{j + 1:03d}.png" for j in range(observations.num_images)]
    for name, image in zip(names, observations.images):
        write_png(layout.root / name, image, bits=bits)
    layout.filenames_file.write_text("\n".join(names) + "\n", encoding="utf-8")
    write_png(layout.mask_file, observations.mask.astype(np.float64), bits=8)
    if observations.lights is not None:
        lights = observations.lights
        layout.directions_file.write_text(
            "\n".join(" ".join(f"{x:.9f}" for x in d) for d in lights.directions) + "\n", encoding="utf-8"
        )
        rows = lights.intensities.reshape(len(lights), -1)
        layout.intensities_file.write_text(
            "\n".join(" ".join(f"{x:.9f}" for x in r) for r in rows) + "\n", encoding="utf-8"
        )
    if observations.normals_gt is not None:
        write_pfm(layout.root / "normal_gt.pfm", observations.normals_gt)
    debug(f"dataset with {observations.num_images} images written to {layout.root}", prefix="IO")
    return layout


def percentile_filter(observations: ObservationSet, p: float = 25.0) -> ObservationSet:
    """
    每张图中低于第 p 百分位（lower 取法，严格小于）的掩码像素不参与 L_IR

    Args:
        observations: 观测数据
        p: 百分位，0 表示不过滤

    Returns:
        loss_mask 已更新的新 ObservationSet
    """
    if not 0 <= p < 100:
        raise ValueError(f"percentile must lie in [0, 100), got {p}")
    assert observations.loss_mask is not None
    loss_mask = observations.loss_mask.copy()
    if p > 0:
        intensity = observations.images.mean(axis=3)
        for j in range(observations.num_images):
            values = intensity[j][observations.mask]
            threshold = np.percentile(values, p, method="lower")
            loss_mask[j] &= ~(intensity[j] < threshold)
        removed = int(observations.loss_mask.sum() - loss_mask.sum())
        info(f"percentile filter (p={p}) removed {removed} pixel observations", prefix="IO")
    return ObservationSet(
        images=observations.images,
        mask=observations.mask,
        lights=observations.lights,
        normals_gt=observations.normals_gt,
        loss_mask=loss_mask,
        name=observations.name,
    )
