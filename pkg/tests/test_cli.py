"""
Tests for the render / solve / eval command line
"""

import json

import numpy as np
import pytest

from uncal_ps.cli.main import build_parser, main
from uncal_ps.core.models import LightSet

SMALL_CONFIG = {
    "depth_hidden": [8],
    "material_hidden": [8],
    "encoding_octaves": 2,
    "num_bases": 2,
    "num_samples": 8,
    "log_every": 1,
}


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["render", "hemisphere_on_plane", str(out), "--resolution", "16"]) == 0
    return out


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG), encoding="utf-8")
    return path


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_render_writes_dataset(dataset):
    names = (dataset / "filenames.txt").read_text(encoding="utf-8").split()
    assert len(names) == 16
    for name in ("mask.png", "light_directions.txt", "normal_gt.pfm", "depth_gt.pfm", "scene.json"):
        assert (dataset / name).is_file(), name
    assert len(list(dataset.glob("shadow_gt_*.png"))) == 16


def test_solve_then_eval(tmp_path, dataset, config_file):
    out = tmp_path / "run"
    code = main(["solve", str(dataset), "--config", str(config_file), "--out", str(out), "--epochs", "4"])
    assert code == 0
    for name in ("normal.png", "normal.pfm", "depth.pfm", "albedo.png", "materials.npz", "config.json"):
        assert (out / name).is_file(), name
    assert len(list(out.glob("shadow_[0-9]*.png"))) == 16
    lights = LightSet.from_text((out / "lights.txt").read_text(encoding="utf-8"))
    assert len(lights) == 16
    rows = (out / "history.csv").read_text(encoding="utf-8").strip().splitlines()
    assert rows[0].startswith("epoch,stage,total")
    assert len(rows) == 5
    saved = json.loads((out / "config.json").read_text(encoding="utf-8"))
    assert saved["stage_epochs"] == [1, 2, 1]

    assert main(["eval", str(out), str(dataset), "--brdf-pixels", "2"]) == 0
    report = (out / "report.txt").read_text(encoding="utf-8")
    for key in ("normal_mae", "light_mae", "e_int", "mean_shadow_iou"):
        assert key in report
    csv_lines = (out / "report.csv").read_text(encoding="utf-8").splitlines()
    assert csv_lines[0] == "dataset,normal_mae,light_mae,e_int,mean_shadow_iou,num_lights"
    assert csv_lines[1].endswith(",16")
    for name in ("error_heatmap.png", "light_map.png", "brdf_sphere_1.png", "brdf_sphere_2.png"):
        assert (out / name).is_file(), name


def test_solve_checkpoint_and_resume(tmp_path, dataset, config_file):
    out = tmp_path / "run"
    base = ["solve", str(dataset), "--config", str(config_file), "--out", str(out), "--epochs", "4"]
    assert main(base + ["--checkpoint-every", "2"]) == 0
    checkpoint = out / "checkpoints" / "checkpoint_00002.npz"
    assert checkpoint.is_file()
    full = np.load(out / "materials.npz")["widths"]

    again = tmp_path / "resumed"
    resumed = ["solve", str(dataset), "--config", str(config_file), "--out", str(again), "--epochs", "4"]
    assert main(resumed + ["--resume", str(checkpoint)]) == 0
    np.testing.assert_array_equal(np.load(again / "materials.npz")["widths"], full)


def test_solve_with_zero_epochs_keeps_initialization(tmp_path, dataset, config_file):
    out = tmp_path / "run"
    assert main(["solve", str(dataset), "--config", str(config_file), "--out", str(out), "--epochs", "0"]) == 0
    rows = (out / "history.csv").read_text(encoding="utf-8").strip().splitlines()
    assert len(rows) == 1


def test_failures_exit_with_status_one(tmp_path, capsys):
    assert main(["solve", str(tmp_path / "missing"), "--out", str(tmp_path / "out")]) == 1
    assert "solve failed" in capsys.readouterr().err
    assert main(["render", "teapot", str(tmp_path / "x")]) == 1
    assert "Unknown bundled scene" in capsys.readouterr().err
    assert main(["eval", str(tmp_path / "nothing"), str(tmp_path / "missing")]) == 1


def test_bad_config_key_fails(tmp_path, dataset):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"learning_rate": 0.1}), encoding="utf-8")
    assert main(["solve", str(dataset), "--config", str(config), "--out", str(tmp_path / "out")]) == 1


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
