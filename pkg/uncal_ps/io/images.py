#!/usr/bin/env python3
"""
Image codecs: PNG (8/16-bit), PFM, normal-map PNG encoding and resampling
图像读写：PNG（8/16 位）、PFM（小端浮点）、法向图编码与面积重采样
"""
from pathlib import Path
from typing import Optional, Tuple, Union

import cv2
import numpy as np

from uncal_ps.utils.logger import debug, warning

PathLike = Union[str, Path]
_MAX_CODE = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}


def _to_rgb(image: np.ndarray) -> np.ndarray:
    if image.ndim == 3 and image.shape[2] == 4:
        image = image[:, :, :3]
    if image.ndim == 3 and image.shape[2] == 3:
        image = image[:, :, ::-1]
    return image


def read_png(path: PathLike) -> np.ndarray:
    """读取 PNG（或 OpenCV 支持的其它格式），整数图除以最大码值，返回 float64 RGB"""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"cannot decode image {path}")
    raw = _to_rgb(raw)
    scale = _MAX_CODE.get(raw.dtype)
    image = raw.astype(np.float64)
    return image / scale if scale is not None else image


def write_png(path: PathLike, image: np.ndarray, bits: int = 16) -> None:
    """把 [0,1] 浮点图写成 8 或 16 位 PNG"""
    if bits not in (8, 16):
        raise ValueError(f"PNG bit depth must be 8 or 16, got {bits}")
    image = np.asarray(image, dtype=np.float64)
    if np.any(image > 1.0 + 1e-9) or np.any(image < -1e-9):
        warning(f"values outside [0, 1] clipped while writing {Path(path).name}", prefix="IO")
    scale = 255.0 if bits == 8 else 65535.0
    dtype = np.uint8 if bits == 8 else np.uint16
    codes = np.round(np.clip(image, 0.0, 1.0) * scale).astype(dtype)
    if codes.ndim == 3 and codes.shape[2] == 1:
        codes = codes[:, :, 0]
    if codes.ndim == 3:
        codes = np.ascontiguousarray(codes[:, :, ::-1])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), codes):
        raise ValueError(f"cannot write image {path}")


def read_pfm(path: PathLike) -> np.ndarray:
    """读取 PFM（Pf 单通道 / PF 三通道），返回自上而下的行序"""
    with open(path, "rb") as f:
        tag = f.readline().decode("ascii").strip()
        if tag not in ("PF", "Pf"):
            raise ValueError(f"{path} is not a PFM file (header {tag!r})")
        dims = f.readline().decode("ascii").split()
        while not dims:
            dims = f.readline().decode("ascii").split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().decode("ascii").strip())
        channels = 3 if tag == "PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(width * height * channels * 4), dtype=dtype)
    if data.size != width * height * channels:
        raise ValueError(f"{path} is truncated: expected {width * height * channels} floats, got {data.size}")
    image = np.flipud(data.reshape(height, width, channels)).astype(np.float64)
    return image[:, :, 0] if channels == 1 else image


def write_pfm(path: PathLike, image: np.ndarray) -> None:
    """写小端 PFM；(H,W) 写成 Pf，(H,W,3) 写成 PF"""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        tag = "Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        tag = "PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {image.shape}")
    height, width = image.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"{tag}\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(image)).astype("<f4").tobytes())


def read_image(path: PathLike) -> np.ndarray:
    """按扩展名读取线性浮点图像"""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path)


def encode_normals(normals: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """法向 xyz ∈ [−1,1] 映射为 16 位 RGB 码值，掩码外为 0"""
    codes = np.round((np.clip(normals, -1.0, 1.0) + 1.0) / 2.0 * 65535.0).astype(np.uint16)
    if mask is not None:
        codes[~np.asarray(mask, dtype=bool)] = 0
    return codes


def decode_normals(codes: np.ndarray) -> np.ndarray:
    """16 位码值（或 [0,1] 浮点）还原为单位法向"""
    codes = np.asarray(codes)
    unit = codes.astype(np.float64) / 65535.0 if codes.dtype == np.uint16 else codes.astype(np.float64)
    normals = unit * 2.0 - 1.0
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    return np.where(norm > 1e-6, normals / np.maximum(norm, 1e-12), 0.0)


def write_normal_png(path: PathLike, normals: np.ndarray, mask: Optional[np.ndarray] = None) -> None:
    write_png(path, encode_normals(normals, mask).astype(np.float64) / 65535.0, bits=16)


def read_normal_png(path: PathLike) -> np.ndarray:
    return decode_normals(read_png(path))


def apply_gamma(images: np.ndarray, gamma: float) -> np.ndarray:
    """gamma 编码的图像转为线性：v ** gamma"""
    if gamma == 1.0:
        return images
    debug(f"linearizing images with gamma {gamma}", prefix="IO")
    return np.power(np.clip(images, 0.0, None), gamma)


def capped_size(height: int, width: int, max_resolution: Optional[int]) -> Tuple[int, int]:
    """长边不超过 max_resolution 的 (H, W)"""
    if max_resolution is None or max(height, width) <= max_resolution:
        return height, width
    scale = max_resolution / max(height, width)
    return max(1, int(round(height * scale))), max(1, int(round(width * scale)))


def resize_area(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """面积平均重采样到 (H, W)"""
    height, width = size
    if image.shape[:2] == (height, width):
        return image
    out = cv2.resize(np.asarray(image, dtype=np.float64), (width, height), interpolation=cv2.INTER_AREA)
    if image.ndim == 3 and out.ndim == 2:
        out = out[:, :, None]
    return out
