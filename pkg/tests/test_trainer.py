import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surfelight import io, lighting, rasterizer, sh, trainer
from surfelight.errors import ContractViolation
from surfelight.losses import LossWeights
from surfelight.scene import LightModel, Scene, Surfels, logit, mlp_forward, sigmoid, surfel_normal

from scenes import random_scene

ZERO_LRS = dict(lr_mlp=0, lr_mlp_stage2=0, lr_sh=0, lr_position=0, lr_rotation=0, lr_scale=0, lr_opacity=0, lr_albedo=0)


def small_problem(seed=0, k=10, size=8, num_images=2):
    rng = np.random.default_rng(seed)
    s, cam = random_scene(rng, k=k, size=size, facing=True)
    lights = LightModel.create(num_images, rng, dc_init=1.0)
    scene = Scene(s, lights, 1.0, s.position.min(axis=0), s.position.max(axis=0))
    batches = []
    for i in range(num_images):
        img = np.clip(rng.normal(0.5, 0.1, size=(size, size, 3)), 0, 1)
        batches.append(trainer.Batch(i, cam, img, None))
    return scene, batches


def quick_config(**kw):
    base = dict(
        total_iters=12, stage1_iters=6, densify_interval=4, densify_from_iter=4, densify_until_iter=10,
        opacity_reset_interval=8, normal_reg_from_iter=0, distortion_reg_from_iter=0,
        weights=LossWeights(mc_samples=16),
    )
    base.update(kw)
    return trainer.TrainConfig(**base)


class TestConfig:
    def test_stage1_longer_than_total(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(total_iters=10, stage1_iters=20)

    def test_negative_lr(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(lr_sh=-1.0)

    def test_desk_scale_divides_counts(self):
        cfg = trainer.TrainConfig(desk_scale=10).scaled()
        assert (cfg.total_iters, cfg.stage1_iters) == (5000, 3000)
        assert (cfg.densify_interval, cfg.opacity_reset_interval) == (50, 300)
        assert cfg.desk_scale == 1

    def test_json_round_trip(self):
        cfg = trainer.TrainConfig(seed=3, weights=LossWeights(lambda_01=0.5))
        again = trainer.TrainConfig.from_json(json.loads(json.dumps(cfg.to_json())))
        assert again == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            trainer.TrainConfig.from_json({"total_iter": 5})

    def test_published_defaults(self):
        cfg = trainer.TrainConfig()
        w = cfg.weights
        assert (cfg.total_iters, cfg.stage1_iters) == (50000, 30000)
        assert (cfg.lr_mlp, cfg.lr_mlp_stage2, cfg.lr_sh) == (0.002, 0.0001, 0.002)
        assert (cfg.densify_interval, cfg.opacity_reset_interval) == (500, 3000)
        assert (w.lambda_shadow_stage1, w.lambda_shadow_stage2) == (10.0, 0.001)


class TestSchedule:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 49999))
    def test_stage_weights(self, it):
        cfg = trainer.TrainConfig()
        sw = cfg.weights.stage_weights(cfg.stage(it))
        lrs = cfg.learning_rates(it, 1.0)
        if it < cfg.stage1_iters:
            assert sw["rec_shadowed"] == 0.0 and sw["shadow"] == 10.0 and lrs["mlp"] == 0.002
        else:
            assert sw["shadow"] == 0.001 and lrs["mlp"] == 0.0001

    def test_position_lr_decays(self):
        cfg = trainer.TrainConfig()
        assert cfg.learning_rates(0, 2.0)["position"] == pytest.approx(3.2e-4)
        assert cfg.learning_rates(cfg.total_iters, 2.0)["position"] == pytest.approx(3.2e-6)


class TestStep:
    def test_zero_learning_rates_leave_scene_unchanged(self):
        scene, batches = small_problem()
        before = scene.copy()
        state = trainer.TrainState(scene, quick_config(**ZERO_LRS))
        for _ in range(3):
            trainer.train_step(state, batches[0])
        for name, arr in before.surfels.arrays().items():
            assert np.array_equal(arr, getattr(state.scene.surfels, name)), name
        for name, arr in before.lights.params().items():
            assert np.array_equal(arr, state.scene.lights.params()[name]), name

    @pytest.mark.parametrize("it, channels", [(0, slice(3, 6)), (10, slice(0, 3))])
    def test_matched_target_has_no_photometric_gradient(self, it, channels):
        rng = np.random.default_rng(2)
        s, cam = random_scene(rng, k=1, size=8, facing=True, scale=(0.0, 0.3))
        s.transfer = sh.clamped_cosine_coeffs(surfel_normal(s))  # shadowed == unshadowed
        scene = Scene(s, LightModel.create(1, rng, dc_init=1.0), 1.0, s.position[0], s.position[0])
        light = mlp_forward(scene.lights, 0)
        # Same attribute stack as the training step, so the images agree bit for bit.
        sd = lighting.shade(s, light, cam)
        attrs = np.concatenate([sd.radiance_shadowed, sd.radiance_unshadowed, sd.normal], axis=1)
        target = rasterizer.render(s, attrs, cam).features[..., channels]
        # Only the photometric term of the image the stage fits is left on.
        no_reg = LossWeights(lambda_01=0, lambda_positive=0, lambda_transfer_match=0, lambda_shadow_stage1=0,
                             lambda_shadow_stage2=0, lambda_normal=0, lambda_distortion=0, rec_unshadowed_stage2=0)
        cfg = quick_config(weights=no_reg)
        step = trainer.compute_loss_and_grads(scene, trainer.Batch(0, cam, target), cfg, it)
        assert step.report.total < 1e-12
        for name, g in step.surfel_grads.items():
            assert np.abs(g).max() < 1e-9, name
        for name, g in step.light_grads.items():
            assert np.abs(g).max() < 1e-9, name

    def test_nonfinite_term_is_named(self):
        scene, batches = small_problem()
        bad = trainer.Batch(0, batches[0].camera, np.full_like(batches[0].image, np.nan))
        with pytest.raises(trainer.TrainingError, match="rec_unshadowed"):
            trainer.compute_loss_and_grads(scene, bad, quick_config(), 0)

    def test_geometric_terms_start_late(self):
        scene, batches = small_problem()
        cfg = quick_config(normal_reg_from_iter=5, distortion_reg_from_iter=3)
        early = trainer.compute_loss_and_grads(scene, batches[0], cfg, 2).report.weights
        late = trainer.compute_loss_and_grads(scene, batches[0], cfg, 5).report.weights
        assert early["normal_consistency"] == 0 and early["depth_distortion"] == 0
        assert late["normal_consistency"] == 0.05 and late["depth_distortion"] == 100.0

    def test_rotations_stay_unit(self):
        scene, batches = small_problem()
        state = trainer.TrainState(scene, quick_config(lr_rotation=0.1))
        trainer.train_step(state, batches[0])
        np.testing.assert_allclose(np.linalg.norm(state.scene.surfels.rotation, axis=1), 1.0, atol=1e-12)

    def test_empty_batches(self):
        scene, _ = small_problem()
        with pytest.raises(ContractViolation):
            trainer.train(trainer.TrainState(scene, quick_config()), [])


def run(seed, out=None, cfg=None):
    scene, batches = small_problem(seed)
    state = trainer.TrainState(scene, cfg or quick_config(seed=seed))
    reports = []
    trainer.train(state, batches, out, progress=lambda it, rep: reports.append(rep.terms))
    return state, reports


def test_determinism():
    a, ra = run(1)
    b, rb = run(1)
    assert ra == rb
    for name, arr in a.scene.surfels.arrays().items():
        assert np.array_equal(arr, getattr(b.scene.surfels, name))


def test_log_and_checkpoint(tmp_path):
    state, _ = run(0, tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 12
    rec = json.loads(lines[0])
    assert set(rec) >= {"step", "stage", "terms", "weights", "total", "learning_rates"}
    assert [json.loads(l)["stage"] for l in lines] == [1] * 6 + [2] * 6
    loaded = io.load_checkpoint(tmp_path / "checkpoint")
    assert loaded.iteration == 12
    for name, arr in state.scene.surfels.arrays().items():
        assert np.array_equal(arr, getattr(loaded.scene.surfels, name))


def test_resume_is_bit_exact(tmp_path):
    full, _ = run(4, tmp_path / "full")
    scene, batches = small_problem(4)
    first = trainer.TrainState(scene, quick_config(seed=4))
    trainer.train(first, batches, tmp_path / "half", until=7)
    resumed = io.load_checkpoint(tmp_path / "half" / "checkpoint")
    assert resumed.iteration == 7
    trainer.train(resumed, batches, tmp_path / "half")
    for name, arr in full.scene.surfels.arrays().items():
        assert np.array_equal(arr, getattr(resumed.scene.surfels, name)), name
    a = (tmp_path / "full" / "train_log.jsonl").read_text()
    b = (tmp_path / "half" / "train_log.jsonl").read_text()
    assert a == b


def test_image_order_visits_every_image_each_epoch():
    for epoch in range(3):
        seen = sorted(trainer.image_order(5, epoch * 7 + i, 7) for i in range(7))
        assert seen == list(range(7))


# ---------------------------------------------------------------------------
# Density control
# ---------------------------------------------------------------------------


def density_state(k=20, scale=-3.0, opacity=0.5, threshold=1.0, **kw):
    rng = np.random.default_rng(0)
    s, _ = random_scene(rng, k=k)
    s.log_scale[:] = scale
    s.opacity_logit[:] = logit(opacity)
    scene = Scene(s, LightModel.create(1, rng), 1.0, np.zeros(3), np.ones(3))
    cfg = trainer.TrainConfig(densify_grad_threshold=threshold, **kw)
    state = trainer.TrainState(scene, cfg)
    state.grad_count[:] = 1
    return state


def test_densify_no_change():
    state = density_state()
    before = state.scene.surfels.copy()
    trainer.densify_and_prune(state)
    for name, arr in before.arrays().items():
        assert np.array_equal(arr, getattr(state.scene.surfels, name))


def test_densify_clone():
    state = density_state(scale=math.log(0.005))
    state.grad_accum[3] = 2.0
    parent = state.scene.surfels.subset([3])
    trainer.densify_and_prune(state)
    s = state.scene.surfels
    assert len(s) == 21
    for name, arr in parent.arrays().items():
        assert np.array_equal(getattr(s, name)[-1], arr[0]), name
    assert np.all(state.grad_accum == 0) and np.all(state.grad_count == 0)


def test_densify_split_keeps_transfer_and_shrinks_scale():
    state = density_state(scale=math.log(0.2))
    state.grad_accum[5] = 2.0
    parent = state.scene.surfels.subset([5])
    trainer.densify_and_prune(state)
    s = state.scene.surfels
    assert len(s) == 21
    kids = s.subset([19, 20])
    np.testing.assert_array_equal(kids.transfer, np.repeat(parent.transfer, 2, axis=0))
    np.testing.assert_allclose(kids.scale, np.repeat(parent.scale / 1.6, 2, axis=0), rtol=1e-12)


def test_split_footprint_matches_parent():
    # Child centers are draws from the parent density; their spread recovers it.
    sigma = np.array([0.3, 0.1])
    pts = []
    for i in range(2000):
        state = density_state(k=16, scale=np.log(0.3))
        s = state.scene.surfels
        s.log_scale[0] = np.log(sigma)
        s.rotation[0] = [1.0, 0.0, 0.0, 0.0]
        s.position[0] = 0.0
        state.grad_accum[0] = 2.0
        trainer.densify_and_prune(state, rng=np.random.default_rng([i]))
        kids = state.scene.surfels.subset([15, 16])
        np.testing.assert_allclose(kids.scale, [sigma / 1.6] * 2, rtol=1e-12)
        assert np.all(kids.position[:, 2] == 0)
        pts.append(kids.position[:, :2])
    pts = np.concatenate(pts)
    np.testing.assert_allclose(np.cov(pts.T), np.diag(sigma**2), atol=3e-3)
    assert np.abs(pts.mean(axis=0)).max() < 0.015


def test_prune_transparent():
    state = density_state(k=30)
    state.scene.surfels.opacity_logit[:5] = logit(0.001)
    trainer.densify_and_prune(state)
    assert len(state.scene.surfels) == 25


def test_prune_floor():
    state = density_state(k=30, opacity=0.001)
    state.scene.surfels.opacity_logit[7] = logit(0.004)
    trainer.densify_and_prune(state)
    assert len(state.scene.surfels) == trainer.MIN_SURFELS
    assert state.scene.surfels.opacity.max() == pytest.approx(0.004)


def test_densify_respects_budget():
    state = density_state(k=20, scale=math.log(0.005), max_surfels=23)
    state.grad_accum[:] = np.arange(20) + 1.0
    trainer.densify_and_prune(state)
    assert len(state.scene.surfels) == 23


def test_split_keeps_optimizer_rows():
    scene, batches = small_problem(k=20)
    state = trainer.TrainState(scene, quick_config())
    trainer.train_step(state, batches[0])
    m_before = state.optimizer.m["transfer"].copy()
    state.grad_accum[:] = 0
    state.grad_accum[2] = 10.0
    state.grad_count[:] = 1
    trainer.densify_and_prune(state)
    keep = [i for i in range(20) if i != 2]
    expected = np.concatenate([m_before[keep], np.zeros((2, m_before.shape[1]))])
    assert np.array_equal(state.optimizer.m["transfer"], expected)


class TestResetOpacity:
    def test_low_unchanged(self):
        s, _ = random_scene(np.random.default_rng(0))
        s.opacity_logit[:] = logit(0.005)
        before = s.opacity_logit.copy()
        trainer.reset_opacity(s)
        assert np.array_equal(s.opacity_logit, before)

    def test_high_clamped(self):
        s, _ = random_scene(np.random.default_rng(0), k=1)
        s.opacity_logit[:] = logit(0.9)
        trainer.reset_opacity(s)
        assert s.opacity[0] == pytest.approx(0.01, rel=1e-12)

    def test_finite_logits_across_range(self):
        s, _ = random_scene(np.random.default_rng(0), k=200)
        s.opacity_logit[:] = logit(np.clip(np.linspace(0, 1, 200), 1e-300, 1 - 1e-16))
        trainer.reset_opacity(s)
        assert np.all(np.isfinite(s.opacity_logit))
        assert np.all(sigmoid(s.opacity_logit) <= 0.01 + 1e-15)

    def test_resets_adam_moments(self):
        scene, batches = small_problem()
        state = trainer.TrainState(scene, quick_config())
        trainer.train_step(state, batches[0])
        trainer.reset_opacity(state)
        assert np.all(state.optimizer.m["opacity_logit"] == 0)


def test_surfel_count_never_below_floor():
    scene, batches = small_problem(k=20)
    state = trainer.TrainState(scene, quick_config(prune_opacity_threshold=0.99))
    counts = []
    trainer.train(state, batches, progress=lambda it, rep: counts.append(len(state.scene.surfels)))
    assert min(counts) == trainer.MIN_SURFELS
