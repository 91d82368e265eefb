"""
Synthetic scenes: analytic shapes, scene presets and the ground-truth oracle renderer
合成场景：解析形状、场景预设与真值渲染
"""

from uncal_ps.scenes.generators import SCENE_PRESETS, SCENE_SCALES, build_scene_dict, bundled_scene
from uncal_ps.scenes.renderer import (
    AnalyticScene,
    RenderedScene,
    gbr_transform,
    load_scene,
    render_ground_truth,
    render_lambertian,
    save_scene,
)

__all__ = [
    "SCENE_PRESETS",
    "SCENE_SCALES",
    "build_scene_dict",
    "bundled_scene",
    "AnalyticScene",
    "RenderedScene",
    "gbr_transform",
    "load_scene",
    "render_ground_truth",
    "render_lambertian",
    "save_scene",
]
