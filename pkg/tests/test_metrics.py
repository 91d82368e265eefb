"""
Tests for the evaluation metrics, the report and the figures
"""

import numpy as np
import pytest

from uncal_ps.core.models import LightSet
from uncal_ps.evaluation.metrics import EvalReport, angular_errors, build_report, e_int, mae_degrees, shadow_iou
from uncal_ps.evaluation.plots import sample_pixels, save_brdf_sphere, save_error_heatmap, save_light_map

# ==================== 角度误差 ====================


def test_orthogonal_normals_give_ninety_degrees():
    est = np.tile([1.0, 0.0, 0.0], (4, 4, 1))
    gt = np.tile([0.0, 0.0, 1.0], (4, 4, 1))
    assert mae_degrees(est, gt) == pytest.approx(90.0)
    assert mae_degrees(gt, gt) == 0.0


def test_mae_is_symmetric_and_masked():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 6, 3))
    a /= np.linalg.norm(a, axis=2, keepdims=True)
    b = rng.normal(size=(5, 6, 3))
    b /= np.linalg.norm(b, axis=2, keepdims=True)
    mask = rng.uniform(size=(5, 6)) > 0.5
    assert mae_degrees(a, b, mask) == pytest.approx(mae_degrees(b, a, mask), abs=1e-12)
    expected = np.degrees(np.arccos(np.clip(np.sum(a * b, axis=2), -1, 1)))[mask].mean()
    assert mae_degrees(a, b, mask) == pytest.approx(expected, abs=1e-12)


def test_antiparallel_vectors_clamp_to_180():
    v = np.array([[0.0, 0.0, 1.0]])
    assert angular_errors(v, -v)[0] == pytest.approx(180.0)


def test_non_unit_vectors_are_normalized_with_warning(capsys):
    est = np.array([[0.0, 0.0, 2.0]])
    gt = np.array([[0.0, 0.0, 1.0]])
    assert mae_degrees(est, gt) == pytest.approx(0.0)
    assert "not unit length" in capsys.readouterr().err


def test_mae_errors():
    with pytest.raises(ValueError, match="mask shape"):
        mae_degrees(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.ones((3, 3), dtype=bool))
    with pytest.raises(ValueError, match="no vectors"):
        mae_degrees(np.ones((2, 2, 3)), np.ones((2, 2, 3)), np.zeros((2, 2), dtype=bool))


# ==================== 光强误差 ====================


def test_e_int_example():
    assert e_int(np.array([1.0, 2.0]), np.array([2.0, 2.0])) == pytest.approx(0.3, abs=1e-9)


def test_e_int_is_scale_invariant():
    rng = np.random.default_rng(1)
    est = rng.uniform(0.5, 2.0, size=10)
    gt = rng.uniform(0.5, 2.0, size=10)
    assert e_int(est * 7.5, gt) == pytest.approx(e_int(est, gt), abs=1e-12)
    assert e_int(gt * 0.2, gt) == pytest.approx(0.0, abs=1e-12)


def test_e_int_errors():
    with pytest.raises(ValueError, match="must match"):
        e_int(np.ones(3), np.ones(4))
    with pytest.raises(ValueError, match="positive"):
        e_int(np.ones(2), np.array([1.0, 0.0]))
    with pytest.raises(ValueError, match="all zero"):
        e_int(np.zeros(2), np.ones(2))


# ==================== 阴影 IoU ====================


def test_shadow_iou_cases():
    hard = np.ones((4, 4))
    hard[:2] = 0.0
    soft = np.where(hard > 0, 0.9, 0.1)
    assert shadow_iou(soft, hard) == 1.0
    assert shadow_iou(1.0 - soft, hard) == 0.0
    assert shadow_iou(np.ones((4, 4)), np.ones((4, 4))) == 1.0
    half = soft.copy()
    half[1] = 0.9
    assert shadow_iou(half, hard) == pytest.approx(0.5)


def test_shadow_iou_respects_mask_and_shape():
    hard = np.zeros((3, 3))
    soft = np.ones((3, 3))
    soft[0, 0] = 0.0
    mask = np.zeros((3, 3), dtype=bool)
    mask[0, 0] = True
    assert shadow_iou(soft, hard, mask=mask) == 1.0
    with pytest.raises(ValueError, match="differ in shape"):
        shadow_iou(np.ones((2, 2)), np.ones((3, 3)))


# ==================== 报告 ====================


def test_report_omits_missing_metrics():
    report = EvalReport(dataset="ball", normal_mae=3.5)
    text = report.to_text()
    assert "normal_mae: 3.500000" in text
    assert "light_mae" not in text
    assert "e_int" not in text
    assert EvalReport.csv_header() == "dataset,normal_mae,light_mae,e_int,mean_shadow_iou,num_lights"
    assert report.csv_row() == "ball,3.500000,,,,"


def test_build_report_with_all_ground_truth():
    normals = np.tile([0.0, 0.0, 1.0], (3, 3, 1))
    lights = LightSet(np.array([[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]]), np.array([1.0, 2.0]))
    shadows = np.ones((2, 3, 3))
    report = build_report("sample", normals, normals, None, lights, lights, shadows, np.ones((2, 3, 3)))
    assert report.normal_mae == 0.0
    assert report.light_mae == pytest.approx(0.0, abs=1e-6)
    assert report.e_int == pytest.approx(0.0, abs=1e-12)
    assert report.shadow_iou == [1.0, 1.0]
    assert report.csv_row().endswith(",1.000000,2")


def test_build_report_skips_zero_ground_truth_normals():
    normals = np.tile([0.0, 0.0, 1.0], (2, 2, 1))
    gt = normals.copy()
    gt[0, 0] = 0.0
    report = build_report("sample", normals, gt)
    assert report.normal_mae == 0.0
    assert report.light_mae is None


def test_build_report_light_count_mismatch():
    one = LightSet(np.array([[0.0, 0.0, 1.0]]), np.ones(1))
    two = LightSet(np.array([[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]]), np.ones(2))
    with pytest.raises(ValueError, match="ground-truth lights"):
        build_report("sample", lights=one, lights_gt=two)


# ==================== 图 ====================


def test_figures_are_written(tmp_path):
    normals = np.tile([0.0, 0.0, 1.0], (6, 6, 1))
    tilted = np.tile([0.6, 0.0, 0.8], (6, 6, 1))
    mask = np.ones((6, 6), dtype=bool)
    mask[0] = False
    errors = save_error_heatmap(tmp_path / "err.png", tilted, normals, mask)
    assert np.isnan(errors[0]).all()
    np.testing.assert_allclose(errors[1:], np.degrees(np.arccos(0.8)))

    lights = LightSet(np.array([[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]]), np.array([1.0, 2.0]))
    save_light_map(tmp_path / "lights.png", lights, lights)
    sphere = save_brdf_sphere(tmp_path / "brdf.png", np.array([0.5]), np.array([0.3]), np.array([[20.0, 20.0]]), 32)
    assert sphere.shape == (32, 32, 1)
    for name in ("err.png", "lights.png", "brdf.png"):
        assert (tmp_path / name).stat().st_size > 0


def test_sample_pixels():
    mask = np.zeros((4, 4), dtype=bool)
    mask[1:3, 1:3] = True
    assert sample_pixels(mask, 2) == [(1, 1), (2, 2)]
    assert sample_pixels(np.zeros((2, 2), dtype=bool)) == []


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
