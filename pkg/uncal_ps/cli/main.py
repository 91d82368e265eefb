#!/usr/bin/env python3
"""
Command-line interface: render / solve / eval
命令行入口：渲染合成场景、求解、评估

    uncal-ps render <scene-file|preset> <out-dir>
    uncal-ps solve <dataset-dir> --config <file> --out <dir>
    uncal-ps eval <out-dir> <dataset-dir>

Every failure prints a one-line diagnostic and exits with status 1.
"""
import argparse
import csv
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from uncal_ps.core.models import EpochRecord, LightInit, LightSet, RunConfig, SolveResult
from uncal_ps.evaluation.metrics import EvalReport, build_report
from uncal_ps.evaluation.plots import sample_pixels, save_brdf_sphere, save_error_heatmap, save_light_map
from uncal_ps.io.dataset import load_dataset
from uncal_ps.io.images import (
    read_image,
    read_normal_png,
    read_pfm,
    resize_area,
    write_normal_png,
    write_pfm,
    write_png,
)
from uncal_ps.scenes.generators import bundled_scene
from uncal_ps.scenes.renderer import load_scene, render_ground_truth, save_scene
from uncal_ps.solver.training import Solver
from uncal_ps.utils.logger import LogLevel, debug, error, info, set_log_level, timed, warning


# ==================== render ====================


def cmd_render(args: argparse.Namespace) -> int:
    source = Path(args.scene)
    scene_file = source if source.is_file() else bundled_scene(args.scene)
    scene = load_scene(scene_file)
    resolution = (args.resolution, args.resolution) if args.resolution else None
    with timed(f"rendering '{scene.name}'", prefix="CLI"):
        rendered = render_ground_truth(scene, resolution)
    save_scene(rendered, args.out_dir, bits=args.bits)
    return 0


# ==================== solve ====================


def _solve_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    data = config.to_dict()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.light_init is not None:
        data["light_init"] = args.light_init
    if args.light_file is not None:
        data["light_file"] = args.light_file
        if args.light_init is None:
            data["light_init"] = LightInit.FILE.value
    if args.percentile_filter is not None:
        data["percentile_filter"] = args.percentile_filter > 0
        data["percentile"] = args.percentile_filter
    if args.gamma is not None:
        data["gamma"] = args.gamma
    if args.max_resolution is not None:
        data["max_resolution"] = args.max_resolution
    if args.checkpoint_every is not None:
        data["checkpoint_every"] = args.checkpoint_every
        data["checkpoint_dir"] = data.get("checkpoint_dir") or str(Path(args.out) / "checkpoints")
    if args.resume is not None:
        data["resume_from"] = args.resume
    config = RunConfig.from_dict(data)
    if args.epochs is not None:
        config = config.with_total_epochs(args.epochs)
    return config


def write_solve_outputs(result: SolveResult, out: Path, bits: int = 16) -> None:
    """把求解结果写到输出目录"""
    out.mkdir(parents=True, exist_ok=True)
    write_normal_png(out / "normal.png", result.normals, result.mask)
    write_pfm(out / "normal.pfm", result.normals)
    write_pfm(out / "depth.pfm", result.depth)
    for j, shadow in enumerate(result.shadow_maps):
        write_png(out / f"shadow_{j + 1:03d}.png", shadow, bits=bits)
    (out / "lights.txt").write_text(result.lights.to_text(), encoding="utf-8")
    peak = float(result.albedo.max())
    write_png(out / "albedo.png", result.albedo / peak if peak > 1.0 else result.albedo, bits=bits)
    np.savez(
        out / "materials.npz",
        albedo=result.albedo,
        spec_weights=result.spec_weights,
        widths=result.widths,
        alpha=np.array(result.alpha),
        beta=np.array(result.beta),
        mask=result.mask,
    )
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(EpochRecord.CSV_FIELDS)
        for record in result.history:
            writer.writerow(record.to_row())
    if result.config is not None:
        result.config.save(out / "config.json")
    info(f"outputs written to {out}", prefix="CLI")


def cmd_solve(args: argparse.Namespace) -> int:
    config = _solve_config(args)
    observations = load_dataset(args.dataset, gamma=config.gamma, max_resolution=config.max_resolution)
    with timed("solve", prefix="CLI"):
        result = Solver(observations, config).run()
    write_solve_outputs(result, Path(args.out))
    return 0


# ==================== eval ====================


def _read_estimated_normals(out: Path) -> np.ndarray:
    if (out / "normal.pfm").is_file():
        return read_pfm(out / "normal.pfm")
    if (out / "normal.png").is_file():
        return read_normal_png(out / "normal.png")
    raise FileNotFoundError(f"{out} holds no normal.pfm or normal.png")


def _read_maps(directory: Path, pattern: str, size: tuple) -> Optional[np.ndarray]:
    paths = sorted(directory.glob(pattern))
    if not paths:
        return None
    maps = []
    for p in paths:
        image = read_image(p)
        image = image.mean(axis=2) if image.ndim == 3 else image
        maps.append(resize_area(image, size))
    return np.stack(maps)


def cmd_eval(args: argparse.Namespace) -> int:
    out = Path(args.out_dir)
    dataset_dir = Path(args.dataset)
    normals = _read_estimated_normals(out)
    size = normals.shape[:2]
    observations = load_dataset(dataset_dir, max_resolution=max(size))
    if observations.mask.shape != size:
        raise ValueError(f"estimated maps are {size} but the dataset loads as {observations.mask.shape}")
    lights = None
    if (out / "lights.txt").is_file():
        lights = LightSet.from_text((out / "lights.txt").read_text(encoding="utf-8"))
    if observations.normals_gt is None:
        warning("dataset has no ground-truth normals; normal MAE skipped", prefix="CLI")
    if observations.lights is None:
        warning("dataset has no ground-truth lights; light metrics skipped", prefix="CLI")
    shadows = _read_maps(out, "shadow_[0-9]*.png", size)
    shadows_gt = _read_maps(dataset_dir, "shadow_gt_*.png", size)
    if shadows is not None and shadows_gt is not None and len(shadows) != len(shadows_gt):
        warning(f"{len(shadows)} shadow maps but {len(shadows_gt)} ground-truth maps; IoU skipped", prefix="CLI")
        shadows = None
    report = build_report(
        dataset=observations.name,
        normals=normals,
        normals_gt=observations.normals_gt,
        mask=observations.mask,
        lights=lights,
        lights_gt=observations.lights,
        shadows=shadows,
        shadows_gt=shadows_gt,
        threshold=args.threshold,
    )
    _write_report(report, out)
    if observations.normals_gt is not None:
        save_error_heatmap(out / "error_heatmap.png", normals, observations.normals_gt, observations.mask)
    if lights is not None:
        save_light_map(out / "light_map.png", lights, observations.lights)
    if (out / "materials.npz").is_file():
        _write_brdf_spheres(out, args.brdf_pixels)
    return 0


def _write_report(report: EvalReport, out: Path) -> None:
    text = report.to_text()
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.csv").write_text(EvalReport.csv_header() + "\n" + report.csv_row() + "\n", encoding="utf-8")
    sys.stdout.write(text)


def _write_brdf_spheres(out: Path, count: int) -> None:
    with np.load(out / "materials.npz") as data:
        albedo, weights, widths, mask = data["albedo"], data["spec_weights"], data["widths"], data["mask"]
    for k, (row, col) in enumerate(sample_pixels(mask, count)):
        save_brdf_sphere(out / f"brdf_sphere_{k + 1}.png", albedo[row, col], weights[row, col], widths)
        debug(f"BRDF sphere for pixel ({row}, {col})", prefix="CLI")


# ==================== 入口 ====================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uncal-ps", description="Uncalibrated photometric stereo")
    parser.add_argument("--debug", default=False, action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    render = sub.add_parser("render", help="Render a synthetic scene with ground truth")
    render.add_argument("scene", help="Scene JSON file or bundled preset name")
    render.add_argument("out_dir", help="Output dataset directory")
    render.add_argument("--resolution", type=int, default=None, help="Override the scene resolution (square)")
    render.add_argument("--bits", type=int, choices=[8, 16], default=16, help="PNG bit depth")
    render.set_defaults(handler=cmd_render)

    solve = sub.add_parser("solve", help="Recover normals, depth, materials and lights")
    solve.add_argument("dataset", help="Dataset directory")
    solve.add_argument("--config", default=None, help="RunConfig JSON file")
    solve.add_argument("--out", required=True, help="Output directory")
    solve.add_argument("--epochs", type=int, default=None, help="Total epochs, split 1:2:1 over the stages")
    solve.add_argument("--seed", type=int, default=None, help="Random seed")
    solve.add_argument("--light-init", choices=[m.value for m in LightInit], default=None, help="Light initialization")
    solve.add_argument("--light-file", default=None, help="Initial lights, one 'lx ly lz e' line per image")
    solve.add_argument("--percentile-filter", type=float, default=None, help="Drop pixels below this percentile")
    solve.add_argument("--gamma", type=float, default=None, help="Image gamma (1.0 = linear)")
    solve.add_argument("--max-resolution", type=int, default=None, help="Cap on the longer image side")
    solve.add_argument("--checkpoint-every", type=int, default=None, help="Write a checkpoint every K epochs")
    solve.add_argument("--resume", default=None, help="Resume from a checkpoint file")
    solve.set_defaults(handler=cmd_solve)

    evaluate = sub.add_parser("eval", help="Evaluate solve outputs against ground truth")
    evaluate.add_argument("out_dir", help="Directory written by 'solve'")
    evaluate.add_argument("dataset", help="Dataset directory with ground truth")
    evaluate.add_argument("--threshold", type=float, default=0.5, help="Soft-shadow threshold for IoU")
    evaluate.add_argument("--brdf-pixels", type=int, default=3, help="Number of pixels to draw BRDF spheres for")
    evaluate.set_defaults(handler=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数 - 命令行接口，返回退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.debug:
        set_log_level(LogLevel.DEBUG)
        debug("debug logging enabled", prefix="CLI")
    try:
        return int(args.handler(args))
    except KeyboardInterrupt:
        error("interrupted", prefix="CLI")
        return 1
    except Exception as exc:  # noqa: BLE001
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        error(f"{args.command} failed: {message}", prefix="CLI")
        return 1


if __name__ == "__main__":
    sys.exit(main())
