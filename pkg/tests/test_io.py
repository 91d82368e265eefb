"""
Tests for the image codecs, dataset directories, preprocessing and run configs
"""

import numpy as np
import pytest

from uncal_ps.core.models import ConfigError, LightInit, LightSet, ObservationSet, RunConfig
from uncal_ps.evaluation.metrics import mae_degrees
from uncal_ps.io.dataset import DatasetError, load_dataset, percentile_filter, save_dataset
from uncal_ps.io.images import (
    apply_gamma,
    capped_size,
    decode_normals,
    encode_normals,
    read_normal_png,
    read_pfm,
    read_png,
    resize_area,
    write_normal_png,
    write_pfm,
    write_png,
)


def sample_observations(count: int = 3, size: int = 6, channels: int = 3) -> ObservationSet:
    rng = np.random.default_rng(0)
    normals = rng.normal(size=(size, size, 3))
    normals[..., 2] = np.abs(normals[..., 2]) + 0.1
    normals /= np.linalg.norm(normals, axis=2, keepdims=True)
    mask = np.ones((size, size), dtype=bool)
    mask[0, 0] = False
    dirs = np.array([[0.3, 0.0, 0.95], [0.0, 0.3, 0.95], [-0.3, -0.3, 0.9]])[:count]
    return ObservationSet(
        images=rng.uniform(0.0, 1.0, size=(count, size, size, channels)),
        mask=mask,
        lights=LightSet(dirs, np.array([1.0, 0.8, 1.2])[:count]).normalized(),
        normals_gt=normals,
        name="sample",
    )


# ==================== 图像编解码 ====================


@pytest.mark.parametrize("bits", [8, 16])
def test_png_quantization(tmp_path, bits):
    image = np.random.default_rng(1).uniform(size=(5, 7, 3))
    write_png(tmp_path / "x.png", image, bits=bits)
    back = read_png(tmp_path / "x.png")
    assert back.shape == (5, 7, 3)
    step = 1.0 / (255.0 if bits == 8 else 65535.0)
    assert np.max(np.abs(back - image)) <= step / 2 + 1e-12


def test_png_keeps_channel_order(tmp_path):
    image = np.zeros((2, 2, 3))
    image[..., 0] = 1.0
    write_png(tmp_path / "red.png", image)
    back = read_png(tmp_path / "red.png")
    np.testing.assert_array_equal(back[..., 0], 1.0)
    np.testing.assert_array_equal(back[..., 2], 0.0)


def test_png_rejects_odd_bit_depth_and_warns_on_clipping(tmp_path, capsys):
    with pytest.raises(ValueError, match="8 or 16"):
        write_png(tmp_path / "x.png", np.zeros((2, 2)), bits=12)
    write_png(tmp_path / "y.png", np.full((2, 2), 1.5))
    assert "clipped" in capsys.readouterr().err
    np.testing.assert_array_equal(read_png(tmp_path / "y.png"), 1.0)


def test_unreadable_png(tmp_path):
    path = tmp_path / "broken.png"
    path.write_bytes(b"not a png")
    with pytest.raises(ValueError, match="cannot decode"):
        read_png(path)


def test_pfm_single_and_three_channels(tmp_path):
    rng = np.random.default_rng(2)
    gray = rng.normal(size=(4, 5)).astype(np.float32)
    color = rng.normal(size=(4, 5, 3)).astype(np.float32)
    write_pfm(tmp_path / "g.pfm", gray)
    write_pfm(tmp_path / "c.pfm", color)
    np.testing.assert_array_equal(read_pfm(tmp_path / "g.pfm"), gray)
    np.testing.assert_array_equal(read_pfm(tmp_path / "c.pfm"), color)
    assert (tmp_path / "g.pfm").read_bytes().startswith(b"Pf\n5 4\n-1.0\n")


def test_pfm_errors(tmp_path):
    with pytest.raises(ValueError, match="1 or 3 channels"):
        write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))
    (tmp_path / "bad.pfm").write_bytes(b"P6\n2 2\n255\n")
    with pytest.raises(ValueError, match="not a PFM"):
        read_pfm(tmp_path / "bad.pfm")
    (tmp_path / "short.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + b"\x00" * 8)
    with pytest.raises(ValueError, match="truncated"):
        read_pfm(tmp_path / "short.pfm")


def test_normal_png_precision(tmp_path):
    normals = sample_observations().normals_gt
    write_normal_png(tmp_path / "n.png", normals)
    back = read_normal_png(tmp_path / "n.png")
    assert mae_degrees(back, normals) < 0.1


def test_normal_codes_zero_outside_mask():
    normals = np.tile([0.0, 0.0, 1.0], (2, 2, 1))
    mask = np.array([[True, False], [True, True]])
    codes = encode_normals(normals, mask)
    assert codes.dtype == np.uint16
    np.testing.assert_array_equal(codes[0, 1], 0)
    np.testing.assert_allclose(decode_normals(codes)[0, 0], [0.0, 0.0, 1.0], atol=1e-4)


def test_gamma_and_resizing():
    images = np.array([0.25, 0.5])
    assert apply_gamma(images, 1.0) is images
    np.testing.assert_allclose(apply_gamma(images, 2.0), [0.0625, 0.25])
    assert capped_size(300, 200, 128) == (128, 85)
    assert capped_size(64, 32, 128) == (64, 32)
    assert capped_size(64, 32, None) == (64, 32)
    block = np.kron(np.array([[0.0, 1.0], [2.0, 3.0]]), np.ones((2, 2)))
    np.testing.assert_allclose(resize_area(block, (2, 2)), [[0.0, 1.0], [2.0, 3.0]])


# ==================== 数据集 ====================


def test_dataset_round_trip(tmp_path):
    obs = sample_observations()
    save_dataset(obs, tmp_path / "set")
    loaded = load_dataset(tmp_path / "set")
    assert loaded.name == "set"
    assert loaded.images.shape == obs.images.shape
    assert np.max(np.abs(loaded.images - obs.images)) < 1e-4
    np.testing.assert_array_equal(loaded.mask, obs.mask)
    np.testing.assert_allclose(loaded.lights.directions, obs.lights.directions, atol=1e-8)
    np.testing.assert_allclose(loaded.lights.intensities, obs.lights.intensities, atol=1e-8)
    np.testing.assert_allclose(loaded.normals_gt, obs.normals_gt, atol=1e-6)


def test_dataset_without_light_files(tmp_path):
    obs = sample_observations()
    obs.lights = None
    save_dataset(obs, tmp_path / "set")
    assert load_dataset(tmp_path / "set").lights is None


def test_dataset_light_count_mismatch(tmp_path):
    layout = save_dataset(sample_observations(), tmp_path / "set")
    layout.directions_file.write_text("0 0 1\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="3 images but 1 light directions"):
        load_dataset(tmp_path / "set")


def test_dataset_missing_pieces(tmp_path):
    with pytest.raises(DatasetError, match="does not exist"):
        load_dataset(tmp_path / "nowhere")
    layout = save_dataset(sample_observations(), tmp_path / "set")
    (layout.root / "002.png").unlink()
    with pytest.raises(DatasetError, match="002.png is missing"):
        load_dataset(layout.root)


def test_dataset_with_empty_mask(tmp_path):
    obs = sample_observations()
    layout = save_dataset(obs, tmp_path / "set")
    write_png(layout.mask_file, np.zeros(obs.mask.shape), bits=8)
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(layout.root)


def test_dataset_downsampling_and_gamma(tmp_path):
    obs = sample_observations(size=8)
    save_dataset(obs, tmp_path / "set")
    loaded = load_dataset(tmp_path / "set", gamma=2.2, max_resolution=4)
    assert loaded.images.shape == (3, 4, 4, 3)
    assert loaded.normals_gt.shape == (4, 4, 3)
    np.testing.assert_allclose(np.linalg.norm(loaded.normals_gt, axis=2), 1.0, atol=1e-6)
    top_left = np.mean(obs.images[0, :2, :2, 0])
    assert loaded.images[0, 0, 0, 0] == pytest.approx(top_left**2.2, abs=1e-4)


# ==================== 百分位过滤 ====================


def test_percentile_filter_drops_darkest_quarter():
    values = np.arange(1.0, 101.0).reshape(1, 10, 10)
    images = np.concatenate([values, values, values])[..., None]
    obs = ObservationSet(images=images, mask=np.ones((10, 10), dtype=bool))
    filtered = percentile_filter(obs, 25.0)
    kept = filtered.loss_mask[0]
    assert not kept[values[0] < 25].any()
    assert kept[values[0] >= 25].all()
    assert int((~kept).sum()) == 24


def test_percentile_filter_constant_image_and_zero():
    obs = ObservationSet(images=np.full((3, 4, 4, 1), 0.5), mask=np.ones((4, 4), dtype=bool))
    assert percentile_filter(obs, 25.0).loss_mask.all()
    assert percentile_filter(sample_observations(), 0.0).loss_mask.sum() == sample_observations().loss_mask.sum()
    with pytest.raises(ValueError, match="percentile"):
        percentile_filter(obs, 100.0)


# ==================== 配置 ====================


def test_config_round_trip(tmp_path):
    config = RunConfig(seed=5, light_init=LightInit.HEMISPHERE, stage_epochs=[3, 6, 3], num_bases=4)
    path = tmp_path / "config.json"
    config.save(path)
    loaded = RunConfig.load(path)
    assert loaded == config
    assert loaded.light_init is LightInit.HEMISPHERE


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="Unknown config key"):
        RunConfig.from_dict({"seeed": 1})
    with pytest.raises(ConfigError, match="num_samples"):
        RunConfig.from_dict({"num_samples": 0})
    with pytest.raises(ConfigError, match="Invalid config value"):
        RunConfig.from_dict({"light_init": "sun"})
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        RunConfig.load(path)


def test_config_rejects_wrongly_typed_values():
    with pytest.raises(ConfigError, match="lr_max"):
        RunConfig.from_dict({"lr_max": "fast"})
    with pytest.raises(ConfigError, match="num_samples"):
        RunConfig.from_dict({"num_samples": "8"})
    with pytest.raises(ConfigError, match="stage_epochs"):
        RunConfig.from_dict({"stage_epochs": ["a", "b", "c"]})
    with pytest.raises(ConfigError, match="annealing"):
        RunConfig.from_dict({"annealing": "yes"})
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.from_dict({"seed": True})
    with pytest.raises(ConfigError, match="max_resolution"):
        RunConfig.from_dict({"max_resolution": [64]})
    # JSON 整数可作 float，整数值的 float 可作 int，可选字段接受 null
    config = RunConfig.from_dict({"lr_max": 1, "lr_min": 1, "num_samples": 8.0, "max_resolution": None})
    assert config.lr_max == 1 and config.num_samples == 8


def test_with_total_epochs_splits_one_two_one():
    assert RunConfig().with_total_epochs(8).stage_epochs == [2, 4, 2]
    assert RunConfig().with_total_epochs(0).stage_epochs == [0, 0, 0]
    with pytest.raises(ConfigError):
        RunConfig().with_total_epochs(-1)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
