"""
End-to-end solves on synthetic scenes with the full three-stage schedule

These runs take minutes each; deselect them with ``pytest -m "not slow"``.
"""

from typing import Any, Dict, Optional

import numpy as np
import pytest

from uncal_ps.core.models import RunConfig, ShadowMode, SilhouetteMode
from uncal_ps.evaluation.metrics import EvalReport, build_report
from uncal_ps.scenes.generators import build_scene_dict
from uncal_ps.scenes.renderer import AnalyticScene, RenderedScene, render_ground_truth
from uncal_ps.solver.training import solve

pytestmark = pytest.mark.slow


def render_preset(preset: str, material: Optional[Dict[str, Any]] = None) -> RenderedScene:
    data = build_scene_dict(preset, "medium", seed=7)
    if material is not None:
        data["material"] = material
    return render_ground_truth(AnalyticScene.from_dict(data))


def interior(shape) -> np.ndarray:
    # 图像边缘像素缺少邻居，不计入统计
    mask = np.zeros(shape, dtype=bool)
    mask[1:-1, 1:-1] = True
    return mask


def solve_and_score(rendered: RenderedScene, **overrides: Any) -> EvalReport:
    config = RunConfig(silhouette_mode=SilhouetteMode.FLAT, seed=0, **overrides)
    result = solve(rendered.observations, config)
    return build_report(
        dataset=rendered.scene.name,
        normals=result.normals,
        normals_gt=rendered.normals,
        mask=interior(rendered.normals.shape[:2]),
        lights=result.lights,
        lights_gt=rendered.observations.lights,
    )


def test_hemisphere_on_plane_recovers_shape_and_lights():
    report = solve_and_score(render_preset("hemisphere_on_plane"))
    assert report.normal_mae < 5.0
    assert report.light_mae < 3.0
    assert report.e_int < 0.05


def test_anisotropic_lobes_beat_isotropic_ablation():
    material = {"type": "anisotropic_asg", "albedo": [0.6], "lobes": [{"weight": 0.4, "rx": 20.0, "ry": 200.0}]}
    rendered = render_preset("hemisphere_on_plane", material)
    full = solve_and_score(rendered)
    isotropic = solve_and_score(rendered, isotropic=True)
    assert isotropic.normal_mae - full.normal_mae >= 1.0


def test_dynamic_shadows_beat_frozen_ablation():
    rendered = render_preset("double_bump")
    full = solve_and_score(rendered)
    frozen = solve_and_score(rendered, shadows=ShadowMode.FROZEN)
    assert frozen.normal_mae - full.normal_mae >= 0.5


if __name__ == "__main__":
    pytest.main([__file__, "-v", "-m", "slow"])
