#!/usr/bin/env python3
"""
Synthetic Scene Generators for Photometric Stereo
Generate JSON scene files (shape, material, lights) at several resolutions
From small (32x32 desk scenes) to large (128x128)
"""
import json
import os.path
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from uncal_ps.utils.logger import error, info

# 分辨率规模配置
SCENE_SCALES = {
    "small": {"resolution": 32, "description": "小尺寸 - 32x32，适合单元测试"},
    "medium": {"resolution": 64, "description": "中尺寸 - 64x64，默认"},
    "large": {"resolution": 128, "description": "大尺寸 - 128x128，与求解器默认上限一致"},
}

DEFAULT_LIGHTS: Dict[str, Any] = {
    "ring": {"count": 12, "elevation_deg": 40.0},
    "random": 4,
    "random_elevation_deg": [25.0, 75.0],
    "intensity_range": [0.8, 1.2],
}


def _lights(**overrides: Any) -> Dict[str, Any]:
    lights = json.loads(json.dumps(DEFAULT_LIGHTS))
    lights.update(overrides)
    return lights


def generate_hemisphere_on_plane(
    radius: float = 0.6, albedo: Optional[List[float]] = None, lobe_weight: float = 0.3, sharpness: float = 80.0
) -> Dict[str, Any]:
    """平面上的半球：朗伯加一个各向同性 SG 瓣，16 盏灯"""
    return {
        "shape": {"type": "hemisphere_on_plane", "center": [0.0, 0.0], "radius": radius},
        "material": {
            "type": "isotropic_sg",
            "albedo": albedo or [0.7],
            "lobes": [{"weight": lobe_weight, "rx": sharpness, "ry": sharpness}],
        },
        "lights": _lights(),
    }


def generate_sphere_on_plane(radius: float = 0.4) -> Dict[str, Any]:
    """放在平面上的球，边缘是遮挡轮廓"""
    return {
        "shape": {"type": "sphere_on_plane", "center": [0.0, 0.0], "radius": radius},
        "material": {"type": "isotropic_sg", "albedo": [0.6], "lobes": [{"weight": 0.2, "rx": 60.0, "ry": 60.0}]},
        "lights": _lights(),
    }


def generate_gaussian_bump(amplitude: float = 0.5, sigma: float = 0.3) -> Dict[str, Any]:
    """单个高斯凸起，朗伯"""
    return {
        "shape": {"type": "gaussian_bump", "center": [0.0, 0.0], "amplitude": amplitude, "sigma": sigma},
        "material": {"type": "lambertian", "albedo": [0.8]},
        "lights": _lights(),
    }


def generate_double_bump() -> Dict[str, Any]:
    """高低两个凸起，高的一个向低的一个投下阴影"""
    return {
        "shape": {"type": "double_bump", "bumps": [[-0.35, 0.0, 0.6, 0.2], [0.35, 0.0, 0.3, 0.25]]},
        "material": {"type": "lambertian", "albedo": [0.8, 0.6, 0.4]},
        "lights": _lights(ring={"count": 12, "elevation_deg": 35.0}),
    }


def generate_plane() -> Dict[str, Any]:
    """纯平面，无阴影"""
    return {
        "shape": {"type": "plane"},
        "material": {"type": "lambertian", "albedo": [0.8]},
        "lights": _lights(random=0),
    }


def generate_anisotropic_hemisphere() -> Dict[str, Any]:
    """各向异性 ASG 材质的半球（拉丝金属一类）"""
    return {
        "shape": {"type": "hemisphere_on_plane", "center": [0.0, 0.0], "radius": 0.6},
        "material": {
            "type": "anisotropic_asg",
            "albedo": [0.5, 0.5, 0.55],
            "lobes": [{"weight": 0.4, "rx": 200.0, "ry": 20.0}, {"weight": 0.1, "rx": 10.0, "ry": 10.0}],
        },
        "lights": _lights(),
    }


SCENE_PRESETS: Dict[str, Dict[str, Any]] = {
    "hemisphere_on_plane": {
        "generator": generate_hemisphere_on_plane,
        "description": "平面上的半球 - 默认场景，带投射阴影和镜面高光",
    },
    "sphere_on_plane": {
        "generator": generate_sphere_on_plane,
        "description": "平面上的球 - 深度不连续的遮挡轮廓",
    },
    "gaussian_bump": {
        "generator": generate_gaussian_bump,
        "description": "高斯凸起 - 光滑表面，朗伯",
    },
    "double_bump": {
        "generator": generate_double_bump,
        "description": "双凸起 - 相互投影，三通道反照率",
    },
    "plane": {
        "generator": generate_plane,
        "description": "平面 - 无阴影的基准",
    },
    "anisotropic_hemisphere": {
        "generator": generate_anisotropic_hemisphere,
        "description": "各向异性半球 - 两个 ASG 瓣",
    },
}


def build_scene_dict(preset: str, scale: str = "medium", seed: int = 7, **kwargs: Any) -> Dict[str, Any]:
    """按预设名生成完整的场景字典（含 scene 头部）"""
    if preset not in SCENE_PRESETS:
        raise ValueError(f"Unknown scene preset: {preset}. Available: {list(SCENE_PRESETS.keys())}")
    if scale not in SCENE_SCALES:
        raise ValueError(f"Unknown scale: {scale}. Available: {list(SCENE_SCALES.keys())}")
    config = SCENE_PRESETS[preset]
    generator: Callable[..., Dict[str, Any]] = config["generator"]
    body = generator(**kwargs)
    size = SCENE_SCALES[scale]["resolution"]
    header = {
        "name": preset,
        "scale": scale,
        "description": f"{config['description']} ({scale}规模)",
        "resolution": [size, size],
        "seed": seed,
    }
    return {"scene": header, **body}


def generate_scene_file(preset: str, output_file: str, scale: str = "medium", seed: int = 7, **kwargs: Any) -> int:
    """
    写出一个场景 JSON 文件

    Returns:
        场景中光源的个数（显式列表或 ring + random）
    """
    data = build_scene_dict(preset, scale, seed, **kwargs)
    Path(output_file).parent.mkdir(parents=True, exist_ok=True)
    with open(output_file, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
    lights = data["lights"]
    if isinstance(lights, list):
        count = len(lights)
    else:
        count = lights.get("ring", {}).get("count", 0) + lights.get("random", 0)
    info(f"Generated scene {preset} ({scale}) with {count} lights: {output_file}", prefix="SCENE")
    return int(count)


def generate_all_scene_files(output_dir: str, scale: str = "medium", seed: int = 7) -> List[Path]:
    """为每个预设生成场景文件"""
    output_path = Path(output_dir)
    output_path.mkdir(parents=True, exist_ok=True)
    written = []
    for preset in SCENE_PRESETS:
        file_path = output_path / f"{preset}.json"
        try:
            generate_scene_file(preset, str(file_path), scale=scale, seed=seed)
            written.append(file_path)
        except (ValueError, OSError) as e:
            error(f"Error generating {preset}: {e}", prefix="SCENE")
    info(f"Generated {len(written)} scene files for {scale} scale in {output_path}", prefix="SCENE")
    return written


def bundled_scene(preset: str) -> Path:
    """随包附带的场景文件路径"""
    path = Path(os.path.dirname(__file__)) / f"{preset}.json"
    if not path.is_file():
        available = sorted(p.stem for p in Path(os.path.dirname(__file__)).glob("*.json"))
        raise ValueError(f"Unknown bundled scene: {preset}. Available: {available}")
    return path


def main() -> None:
    """主函数 - 命令行接口"""
    import argparse

    parser = argparse.ArgumentParser(description="Generate synthetic photometric-stereo scene files")
    parser.add_argument(
        "--scale", type=str, choices=list(SCENE_SCALES), default="medium", help="Image resolution scale"
    )
    parser.add_argument("--preset", type=str, choices=list(SCENE_PRESETS), help="Generate only this preset")
    parser.add_argument("--seed", type=int, default=7, help="Random seed for the random lights")
    parser.add_argument("--output-dir", type=str, default=None, help="Output directory (default: package directory)")
    args = parser.parse_args()

    output_dir = args.output_dir or os.path.dirname(__file__)
    if args.preset:
        generate_scene_file(args.preset, os.path.join(output_dir, f"{args.preset}.json"), args.scale, args.seed)
    else:
        generate_all_scene_files(output_dir, args.scale, args.seed)


if __name__ == "__main__":
    main()
