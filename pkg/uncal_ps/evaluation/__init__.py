"""
Evaluation metrics and figures
评估指标与可视化
"""

from uncal_ps.evaluation.metrics import EvalReport, build_report, e_int, mae_degrees, shadow_iou

__all__ = ["EvalReport", "build_report", "e_int", "mae_degrees", "shadow_iou"]
