"""
Tests for the loss terms, the three-stage schedule and the solver loop
"""

from dataclasses import replace

import numpy as np
import pytest

from uncal_ps.core import autodiff as ad
from uncal_ps.core.models import LightSet, NormalFitting, ObservationSet, RunConfig, ShadowMode, SilhouetteMode
from uncal_ps.scenes.renderer import AnalyticScene, Material, render_ground_truth, ring_lights
from uncal_ps.solver.geometry import DepthField, PixelGrid, fit_normals, silhouette_targets
from uncal_ps.solver.training import (
    SolveError,
    Solver,
    StageSchedule,
    active_bases,
    loss_ir,
    loss_silhouette,
    loss_smooth,
    smoothness,
    solve,
)


def tiny_config(**overrides) -> RunConfig:
    base = dict(
        depth_hidden=[8],
        material_hidden=[8],
        encoding_octaves=2,
        num_bases=3,
        num_samples=8,
        stage_epochs=[2, 2, 2],
        log_every=1,
        seed=3,
    )
    base.update(overrides)
    return RunConfig(**base)


def tiny_scene(count: int = 4) -> AnalyticScene:
    lights = LightSet(ring_lights(count, 50.0, 10.0), np.ones(count))
    return AnalyticScene("tiny", {"type": "hemisphere_on_plane"}, Material(), lights, resolution=(8, 8))


def tiny_observations(count: int = 4) -> ObservationSet:
    return render_ground_truth(tiny_scene(count)).observations


# ==================== 训练计划 ====================


def test_default_stage_boundaries():
    schedule = StageSchedule()
    assert schedule.total == 2000
    assert schedule.boundaries() == [(0, 500), (500, 1500), (1500, 2000)]
    assert schedule.stage_of(0) == 1
    assert schedule.stage_of(499) == 1
    assert schedule.stage_of(500) == 2
    assert schedule.stage_of(1999) == 3
    with pytest.raises(ValueError, match="outside the schedule"):
        schedule.stage_of(2000)


def test_cosine_learning_rate():
    schedule = StageSchedule()
    assert schedule.learning_rate(0) == pytest.approx(1e-3)
    assert schedule.learning_rate(1000) == pytest.approx(5.5e-4)
    assert schedule.learning_rate(2000) == pytest.approx(1e-4)
    rates = [schedule.learning_rate(e) for e in range(0, 2000, 100)]
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_stage_weights():
    schedule = StageSchedule()
    assert schedule.weights(1).as_dict() == pytest.approx(
        {"ir": 1.0, "silhouette": 0.01, "smooth_rd": 0.01, "smooth_w": 0.01, "smooth_n": 0.02}
    )
    assert schedule.weights(2).as_dict() == pytest.approx(
        {"ir": 1.0, "silhouette": 0.01, "smooth_rd": 0.0, "smooth_w": 0.0, "smooth_n": 0.01}
    )
    third = schedule.weights(3)
    assert third.silhouette == 0.0
    assert third.smooth_n == 0.0


def test_stage_weight_variants():
    assert StageSchedule(silhouette_mode=SilhouetteMode.OCCLUDING).weights(3).silhouette == pytest.approx(0.01)
    assert StageSchedule(silhouette_mode=SilhouetteMode.OFF).weights(1).silhouette == 0.0
    assert StageSchedule(keep_normal_smoothness=True).weights(3).smooth_n == pytest.approx(0.02)


def test_dropping_material_smoothness_from_the_start():
    schedule = StageSchedule(drop_material_smoothness=True)
    assert schedule.weights(1).as_dict() == pytest.approx(
        {"ir": 1.0, "silhouette": 0.01, "smooth_rd": 0.0, "smooth_w": 0.01, "smooth_n": 0.02}
    )
    assert all(schedule.weights(stage).smooth_rd == 0.0 for stage in (1, 2, 3))
    assert schedule.weights(2).smooth_n == pytest.approx(0.01)


def test_dropping_geometry_smoothness_from_the_start():
    schedule = StageSchedule(drop_geometry_smoothness=True, keep_normal_smoothness=True)
    assert schedule.weights(1).as_dict() == pytest.approx(
        {"ir": 1.0, "silhouette": 0.01, "smooth_rd": 0.01, "smooth_w": 0.0, "smooth_n": 0.0}
    )
    for stage in (1, 2, 3):
        assert schedule.weights(stage).smooth_w == 0.0
        assert schedule.weights(stage).smooth_n == 0.0


def test_smoothness_ablations_reach_the_solver_history():
    result = solve(tiny_observations(), tiny_config(drop_material_smoothness=True, drop_geometry_smoothness=True))
    for record in result.history:
        assert record.smooth_rd == 0.0
        assert record.smooth_w == 0.0
        assert record.smooth_n == 0.0


def test_schedule_from_config():
    schedule = StageSchedule.from_config(tiny_config(stage_epochs=[1, 3, 2], lambda_smooth=0.5))
    assert schedule.boundaries() == [(0, 1), (1, 4), (4, 6)]
    assert schedule.weights(1).smooth_w == 0.5
    ablated = StageSchedule.from_config(tiny_config(drop_material_smoothness=True, drop_geometry_smoothness=True))
    assert ablated.drop_material_smoothness and ablated.drop_geometry_smoothness


def test_active_bases_annealing():
    assert active_bases(0, 12, 500) == 1
    assert active_bases(250, 12, 500) == 7
    assert active_bases(500, 12, 500) == 12
    assert active_bases(1800, 12, 500) == 12
    assert active_bases(0, 12, 500, annealing=False) == 12


# ==================== 损失项 ====================


def test_loss_ir_values():
    rng = np.random.default_rng(0)
    observed = rng.uniform(size=(5, 4, 3))
    mask = np.ones((5, 4), dtype=bool)
    assert float(loss_ir(ad.Var(observed.copy()), observed, mask).value) == 0.0
    shifted = loss_ir(ad.Var(observed + 0.1), observed, mask)
    assert float(shifted.value) == pytest.approx(0.1, abs=1e-12)


def test_loss_ir_matches_scalar_loop():
    rng = np.random.default_rng(1)
    rendered = rng.uniform(size=(6, 3, 2))
    observed = rng.uniform(size=(6, 3, 2))
    mask = rng.uniform(size=(6, 3)) > 0.4
    total, count = 0.0, 0
    for i in range(6):
        for j in range(3):
            if not mask[i, j]:
                continue
            for c in range(2):
                total += abs(rendered[i, j, c] - observed[i, j, c])
                count += 1
    value = float(loss_ir(ad.Var(rendered), observed, mask).value)
    assert value == pytest.approx(total / count, abs=1e-12)


def test_loss_ir_errors():
    with pytest.raises(ValueError, match="empty"):
        loss_ir(ad.Var(np.ones((2, 2, 1))), np.ones((2, 2, 1)), np.zeros((2, 2), dtype=bool))
    with pytest.raises(ad.ShapeError):
        loss_ir(ad.Var(np.ones((2, 2, 1))), np.ones((2, 3, 1)), np.ones((2, 2), dtype=bool))


def test_smoothness_of_a_ramp():
    grid = PixelGrid(np.ones((5, 6), dtype=bool), pitch=1.0)
    ramp = ad.Var(grid.us.astype(np.float64))
    assert float(smoothness(grid, ramp).value) == pytest.approx(1.0)
    zeros_rd = ad.Var(np.zeros((grid.count, 3)))
    zeros_n = ad.Var(np.zeros((grid.count, 3)))
    assert float(loss_smooth(grid, zeros_rd, ramp, zeros_n, 0.01, 0.02).value) == pytest.approx(0.01)


def test_silhouette_loss_values(capsys):
    normals = ad.Var(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    index = np.array([0, 1])
    same = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    orthogonal = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    assert float(loss_silhouette(normals, index, same).value) == pytest.approx(0.0)
    assert float(loss_silhouette(normals, index, orthogonal).value) == pytest.approx(1.0)
    empty = loss_silhouette(normals, np.array([], dtype=np.int64), np.zeros((0, 3)))
    assert float(empty.value) == 0.0
    assert "no silhouette pixels" in capsys.readouterr().err


def test_hemisphere_normals_nearly_satisfy_silhouette_targets():
    size, radius = 100, 40.0
    rows, cols = np.mgrid[0:size, 0:size]
    dx, dy = cols - 50.0, rows - 50.0
    mask = np.hypot(dx, dy) <= radius
    grid = PixelGrid(mask)
    nx, ny = dx[grid.vs, grid.us] / radius, dy[grid.vs, grid.us] / radius
    nz = np.sqrt(np.clip(1.0 - nx**2 - ny**2, 0.0, None))
    normals = ad.Var(np.stack([nx, ny, nz], axis=1))
    index, targets = silhouette_targets(grid)
    assert float(loss_silhouette(normals, index, targets).value) < 0.05


# ==================== 求解器 ====================


def test_solver_needs_three_images():
    obs = tiny_observations()
    two = ObservationSet(images=obs.images[:2], mask=obs.mask)
    with pytest.raises(ValueError, match="at least 3 images"):
        Solver(two, tiny_config())


def test_identical_lights_warn(capsys):
    obs = tiny_observations()
    same = LightSet(np.tile([0.3, 0.0, np.sqrt(0.91)], (4, 1)), np.ones(4))
    obs = ObservationSet(images=obs.images, mask=obs.mask, lights=same)
    Solver(obs, tiny_config(light_noise_deg=0.0, intensity_noise=0.0))
    assert "identical" in capsys.readouterr().err


def test_non_finite_loss_aborts():
    solver = Solver(tiny_observations(), tiny_config())
    solver.params.light_log_intensity.value[0] = np.nan
    with pytest.raises(SolveError, match="'ir'") as info:
        solver.step()
    assert info.value.epoch == 0
    assert solver.epoch == 0


def _loss_with_branches(solver: Solver, epoch: int):
    with ad.Tape() as tape:
        total, _, _ = solver.evaluate(epoch)
    return float(total.value), tape


def test_full_loss_gradient_matches_finite_differences():
    obs = tiny_observations()
    h = 1e-4
    compared = kinked = 0
    for config_index in range(100):
        rng = np.random.default_rng(config_index)
        solver = Solver(obs, tiny_config(seed=config_index))
        epoch = int(rng.integers(0, solver.schedule.total))
        params = solver.params.parameters()
        ad.zero_grad(params)
        with ad.Tape() as base:
            total, _, _ = solver.evaluate(epoch)
            ad.backward(total)
        grads = {p.name: np.array(p.grad) for p in params}
        for j in range(3):
            p = params[(3 * config_index + j) % len(params)]
            idx = tuple(int(rng.integers(0, n)) for n in p.value.shape)
            original = float(p.value[idx])
            values = {}
            same_side = True
            for step in (h, -h, h / 2, -h / 2):
                p.value[idx] = original + step
                values[step], tape = _loss_with_branches(solver, epoch)
                same_side &= tape.same_branches(base)
            p.value[idx] = original
            if not same_side:
                # 扰动跨过了 |·|、max、min、网格单元或掩码的拐点
                kinked += 1
                continue
            coarse = (values[h] - values[-h]) / (2.0 * h)
            fine = (values[h / 2] - values[-h / 2]) / h
            numeric = (4.0 * fine - coarse) / 3.0
            analytic = float(grads[p.name][idx])
            scale = max(abs(analytic), abs(numeric), 1e-4)
            assert abs(analytic - numeric) / scale < 1e-4, (config_index, p.name, idx, analytic, numeric)
            compared += 1
    assert compared + kinked == 300
    assert compared >= 150


def test_stage_one_loss_keeps_falling_window_by_window():
    config = tiny_config(stage_epochs=[200, 0, 0], annealing=False, log_every=50)
    result = solve(tiny_observations(), config)
    totals = np.array([r.total for r in result.history])
    assert len(totals) == 200 and all(r.stage == 1 for r in result.history)
    window_means = totals.reshape(4, 50).mean(axis=1)
    assert np.all(np.diff(window_means) <= 0.0), window_means
    assert totals[-50:].max() < totals[:50].max()


class FixedMaterial:
    """固定的漫反射率，镜面权重全为 0"""

    def __init__(self, albedo: np.ndarray, num_bases: int):
        self.albedo = albedo
        self.spec = np.zeros((albedo.shape[0], 1, num_bases))

    def __call__(self, codes):
        return None

    def split(self, out):
        return ad.constant(self.albedo), ad.constant(self.spec)


def test_image_loss_is_invariant_under_bas_relief_transform(monkeypatch):
    obs = tiny_observations()
    config = tiny_config(shadows=ShadowMode.OFF, silhouette_mode=SilhouetteMode.OFF, normal_fitting=NormalFitting.CROSS)
    solver = Solver(obs, config)
    grid = solver.grid
    rng = np.random.default_rng(4)
    depth = grid.gather_image(render_ground_truth(tiny_scene()).depth)
    albedo = rng.uniform(0.3, 0.9, size=(grid.count, 1))
    lights = obs.lights.directions
    intensities = rng.uniform(0.5, 1.5, size=len(lights))

    def image_loss(w, rho, directions, e):
        monkeypatch.setattr(solver, "_depth", lambda: ad.constant(w))
        monkeypatch.setattr(solver.params, "material_mlp", FixedMaterial(rho, config.num_bases))
        solver.params.light_directions = ad.parameter(directions, "light.directions")
        solver.params.light_log_intensity = ad.parameter(np.log(e), "light.log_intensity")
        _, weighted, _ = solver.evaluate(0)
        assert "silhouette" not in weighted
        return float(weighted["ir"].value)

    # z' = λz + μx + νy，即 w' = λw − μx − νy；法向 m' = A m，光照 l' ∝ A^{-T} l
    mu, nu, lam = 0.2, -0.1, 1.3
    a = np.array([[lam, 0.0, -mu], [0.0, lam, -nu], [0.0, 0.0, 1.0]])
    moved_depth = lam * depth - mu * grid.us * grid.pitch - nu * grid.vs * grid.pitch
    normals = fit_normals(DepthField(grid, ad.constant(depth)), "cross").value
    albedo_scale = np.linalg.norm(normals @ a.T, axis=1, keepdims=True)
    moved_lights = lights @ np.linalg.inv(a)
    light_scale = np.linalg.norm(moved_lights, axis=1)
    assert np.all(moved_lights[:, 2] > 0)

    before = image_loss(depth, albedo, lights, intensities)
    after = image_loss(
        moved_depth, albedo * albedo_scale, moved_lights / light_scale[:, None], intensities * light_scale
    )
    assert after == pytest.approx(before, rel=1e-9, abs=1e-12)
    # 只变换深度时损失会变
    assert abs(image_loss(moved_depth, albedo, lights, intensities) - before) > 1e-4


def test_history_total_is_sum_of_components():
    result = solve(tiny_observations(), tiny_config())
    assert len(result.history) == 6
    assert [r.stage for r in result.history] == [1, 1, 2, 2, 3, 3]
    assert [r.active_bases for r in result.history] == [1, 2, 3, 3, 3, 3]
    for record in result.history:
        parts = record.ir + record.silhouette + record.smooth_rd + record.smooth_w + record.smooth_n
        assert record.total == pytest.approx(parts, rel=1e-12)
        assert record.smooth_rd > 0 if record.stage == 1 else record.smooth_rd == 0.0


def test_result_shapes():
    obs = tiny_observations()
    result = solve(obs, tiny_config())
    assert result.normals.shape == (8, 8, 3)
    assert result.depth.shape == (8, 8)
    assert result.shadow_maps.shape == (4, 8, 8)
    assert result.albedo.shape == (8, 8, 1)
    assert result.spec_weights.shape == (8, 8, 3)
    assert result.widths.shape == (3, 2)
    np.testing.assert_allclose(np.linalg.norm(result.normals, axis=2), 1.0, atol=1e-9)
    assert np.all((result.shadow_maps >= 0) & (result.shadow_maps <= 1))


def test_same_seed_gives_identical_history():
    obs = tiny_observations()
    first = solve(obs, tiny_config())
    second = solve(obs, tiny_config())
    assert [r.to_dict() for r in first.history] == [r.to_dict() for r in second.history]
    np.testing.assert_array_equal(first.normals, second.normals)


def test_zero_epochs_returns_initialization():
    obs = tiny_observations()
    config = tiny_config(stage_epochs=[0, 0, 0])
    result = solve(obs, config)
    assert result.history == []
    initial = Solver(obs, config).params.light_set()
    np.testing.assert_array_equal(result.lights.directions, initial.directions)
    assert result.alpha == 400.0 and result.beta == 3.0


def test_checkpoint_resume_is_bit_identical(tmp_path):
    obs = tiny_observations()
    config = tiny_config()
    uninterrupted = Solver(obs, config)
    uninterrupted.run()

    first_half = Solver(obs, config)
    for _ in range(3):
        first_half.step()
    path = first_half.save_checkpoint(tmp_path / "half.npz")

    resumed = Solver(obs, replace(config, resume_from=str(path)))
    assert resumed.epoch == 3
    resumed.run()
    assert [r.to_dict() for r in resumed.history] == [r.to_dict() for r in uninterrupted.history]
    expected = uninterrupted.params.state_dict()
    for name, value in resumed.params.state_dict().items():
        np.testing.assert_array_equal(value, expected[name], err_msg=name)


def test_periodic_checkpoints_are_written(tmp_path):
    config = tiny_config(checkpoint_every=2, checkpoint_dir=str(tmp_path / "ckpt"))
    solve(tiny_observations(), config)
    names = sorted(p.name for p in (tmp_path / "ckpt").iterdir())
    assert names == ["checkpoint_00002.npz", "checkpoint_00004.npz", "checkpoint_00006.npz"]


def test_frozen_shadows_are_computed_once():
    solver = Solver(tiny_observations(), tiny_config(shadows=ShadowMode.FROZEN))
    solver.step()
    frozen = solver.frozen_shadows.copy()
    solver.step()
    np.testing.assert_array_equal(solver.frozen_shadows, frozen)
    assert solver.params.alpha.grad is None or float(np.abs(solver.params.alpha.grad)) == 0.0


def test_disabled_shadows_are_all_lit():
    result = solve(tiny_observations(), tiny_config(shadows=ShadowMode.OFF))
    np.testing.assert_array_equal(result.shadow_maps, 1.0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
