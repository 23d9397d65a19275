"""Tests for model assembly, losses, training, and checkpoints."""

import dataclasses

import numpy as np
import pytest

import fwdsynth.autodiff as ad
import fwdsynth.checkpoint as ckpt
import fwdsynth.pipeline as pl
from fwdsynth.errors import (
    DomainError,
    EmptyInputError,
    FormatError,
    MissingDepthError,
    ShapeError,
    TrainingDivergedError,
)
from fwdsynth.pipeline import (
    VARIANTS,
    FwdModel,
    LossConfig,
    ModelConfig,
    ViewInput,
    compute_loss,
    evaluate,
    init_train_state,
    load_model,
    loss_terms,
    save_model,
    synthesize,
    train,
)
from fwdsynth.scenes import SceneBundle, generate_synthetic


def small_scene(resolution=(16, 24), n_views=3, seed=3, geometry="plane",
                texture="checker", arc_deg=8.0):
    return generate_synthetic(geometry, texture, n_views=n_views,
                              resolution=resolution, seed=seed,
                              arc_deg=arc_deg)


def small_config(**kw):
    kw.setdefault("width", 0.25)
    kw.setdefault("n_input_views", 2)
    kw.setdefault("seed", 1)
    return ModelConfig(**kw)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.lambda_l2 == 5.0
        assert cfg.lambda_c == 1.0
        assert cfg.lambda_s == 5.0
        assert cfg.content_loss == "off"

    def test_negative_weight_rejected(self):
        with pytest.raises(DomainError):
            LossConfig(lambda_l2=-1.0)
        with pytest.raises(DomainError):
            LossConfig(lambda_s=-0.5)

    def test_unknown_content_loss_rejected(self):
        with pytest.raises(DomainError):
            LossConfig(content_loss="vgg")


class TestModelConfig:
    def test_optimizer_defaults(self):
        cfg = ModelConfig()
        assert cfg.lr == 1e-4
        assert cfg.beta1 == 0.9
        assert cfg.beta2 == 0.999
        assert cfg.adam_eps == 1e-8

    def test_splat_defaults(self):
        cfg = ModelConfig()
        assert cfg.radius_px == 1.5
        assert cfg.k_blend == 16
        assert cfg.alpha_min_clamp == 1e-3
        assert cfg.depth_mode == "alpha_sum"
        scfg = cfg.splat_config()
        assert scfg.radius_px == cfg.radius_px
        assert scfg.k_blend == cfg.k_blend
        assert scfg.alpha_min_clamp == cfg.alpha_min_clamp
        assert scfg.depth_mode == cfg.depth_mode

    def test_variant_validation(self):
        for v in VARIANTS:
            kw = {"stage1_steps": 5} if v == "fwd-u" else {}
            ModelConfig(variant=v, **kw)
        with pytest.raises(DomainError):
            ModelConfig(variant="bwd-d")

    def test_scalar_validation(self):
        with pytest.raises(DomainError):
            ModelConfig(width=0.0)
        with pytest.raises(DomainError):
            ModelConfig(n_input_views=0)
        with pytest.raises(DomainError):
            ModelConfig(depth_prior=-1.0)
        with pytest.raises(DomainError):
            ModelConfig(dtype="float16")
        with pytest.raises(DomainError):
            ModelConfig(variant="fwd-u", stage1_steps=-1)

    def test_two_stage_requires_unsupervised_variant(self):
        cfg = ModelConfig(variant="fwd-u", stage1_steps=100)
        assert cfg.two_stage
        assert not ModelConfig(variant="fwd-u").two_stage
        with pytest.raises(DomainError):
            ModelConfig(variant="fwd-d", stage1_steps=100)

    def test_feature_dim_scales_with_width(self):
        assert ModelConfig(width=1.0).feature_dim == 64
        assert ModelConfig(width=0.25).feature_dim == 16


def oracle_components(pred, gt, cfg, depth_pred=None, depth_sensor=None,
                      mask=None):
    """Loss components computed with plain numpy, no shared code paths."""
    l2 = float(np.mean((pred - gt) ** 2))
    content = 0.0
    if cfg.content_loss == "gradient_diff":
        gx_p = pred[:, 1:, :] - pred[:, :-1, :]
        gy_p = pred[1:, :, :] - pred[:-1, :, :]
        gx_g = gt[:, 1:, :] - gt[:, :-1, :]
        gy_g = gt[1:, :, :] - gt[:-1, :, :]
        content = 0.5 * float(np.mean(np.abs(gx_p - gx_g)))
        content += 0.5 * float(np.mean(np.abs(gy_p - gy_g)))
    depth = 0.0
    if depth_pred is not None and depth_sensor is not None:
        m = np.ones_like(depth_sensor) if mask is None else mask
        if m.sum() > 0:
            depth = float(np.sum(np.abs(depth_pred - depth_sensor) * m) / m.sum())
    total = cfg.lambda_l2 * l2 + cfg.lambda_c * content + cfg.lambda_s * depth
    return {"l2": l2, "content": content, "depth": depth, "total": total}


class TestComputeLoss:
    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(0)
        cfg = LossConfig(content_loss="gradient_diff")
        for _ in range(10):
            h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            pred = rng.uniform(0, 1, size=(h, w, 3))
            gt = rng.uniform(0, 1, size=(h, w, 3))
            dp = rng.uniform(0.5, 3.0, size=(h, w))
            ds = rng.uniform(0.5, 3.0, size=(h, w))
            m = (rng.uniform(size=(h, w)) > 0.3).astype(np.float64)
            comps = compute_loss(pred, gt, cfg, depth_pred=dp,
                                 depth_sensor=ds, mask=m)
            want = oracle_components(pred, gt, cfg, dp, ds, m)
            for key in ("l2", "content", "depth", "total"):
                np.testing.assert_allclose(comps[key], want[key], rtol=1e-12,
                                           err_msg=key)

    def test_content_off_is_exact_zero(self):
        rng = np.random.default_rng(1)
        pred = rng.uniform(0, 1, size=(5, 6, 3))
        gt = rng.uniform(0, 1, size=(5, 6, 3))
        comps = compute_loss(pred, gt, LossConfig())
        assert comps["content"] == 0.0
        np.testing.assert_allclose(comps["total"], 5.0 * comps["l2"], rtol=1e-12)

    def test_empty_mask_skips_depth_term(self):
        rng = np.random.default_rng(2)
        pred = rng.uniform(0, 1, size=(4, 4, 3))
        gt = rng.uniform(0, 1, size=(4, 4, 3))
        dp = rng.uniform(1, 2, size=(4, 4))
        ds = rng.uniform(1, 2, size=(4, 4))
        comps = compute_loss(pred, gt, LossConfig(), depth_pred=dp,
                             depth_sensor=ds, mask=np.zeros((4, 4)))
        assert comps["depth"] == 0.0

    def test_weights_scale_linearly(self):
        rng = np.random.default_rng(3)
        pred = rng.uniform(0, 1, size=(4, 5, 3))
        gt = rng.uniform(0, 1, size=(4, 5, 3))
        base = compute_loss(pred, gt, LossConfig(lambda_l2=1.0, lambda_c=0.0,
                                                 lambda_s=0.0))
        scaled = compute_loss(pred, gt, LossConfig(lambda_l2=7.0, lambda_c=0.0,
                                                   lambda_s=0.0))
        np.testing.assert_allclose(scaled["total"], 7.0 * base["total"],
                                   rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            compute_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), LossConfig())
        with pytest.raises(ShapeError):
            compute_loss(np.zeros((4, 4)), np.zeros((4, 4)), LossConfig())


class TestLossTermsDecomposition:
    def test_total_is_weighted_sum_of_components(self):
        rng = np.random.default_rng(4)
        h, w = 6, 7
        cfg = LossConfig(lambda_l2=2.0, lambda_c=3.0, lambda_s=0.5,
                         content_loss="gradient_diff")
        pred = ad.constant(rng.uniform(0, 1, size=(h * w, 3)))
        gt = rng.uniform(0, 1, size=(h * w, 3))
        dp = ad.constant(rng.uniform(1, 2, size=h * w))
        ds = rng.uniform(1, 2, size=(h, w))
        m = np.ones((h, w))
        pv = pl.PerViewData(positions=None, features=None, depth=dp,
                            intr=None, pose=None, depth_sensor=ds, mask=m,
                            has_depth_params=True)
        total, comps = loss_terms(pred, gt, [pv], cfg, h, w)
        want = (cfg.lambda_l2 * comps["l2"] + cfg.lambda_c * comps["content"]
                + cfg.lambda_s * comps["depth"])
        np.testing.assert_allclose(float(total.data), want, rtol=1e-12)
        np.testing.assert_allclose(comps["total"], want, rtol=1e-12)
        assert comps["l2"] > 0 and comps["content"] > 0 and comps["depth"] > 0

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        h, w = 4, 5
        cfg = LossConfig(lambda_l2=1.5, lambda_c=0.7, content_loss="gradient_diff")
        base = rng.uniform(0.2, 0.8, size=(h * w, 3))
        gt = rng.uniform(0, 1, size=(h * w, 3))

        def f(x):
            t, _ = loss_terms(ad.constant(x), gt, None, cfg, h, w)
            return float(t.data)

        with ad.Tape() as tape:
            pred = ad.Tensor(base, requires_grad=True)
            total, _ = loss_terms(pred, gt, None, cfg, h, w)
            ad.backward(total, tape)
        eps = 1e-6
        for idx in [(0, 0), (7, 1), (19, 2)]:
            hi = base.copy()
            lo = base.copy()
            hi[idx] += eps
            lo[idx] -= eps
            fd = (f(hi) - f(lo)) / (2 * eps)
            np.testing.assert_allclose(pred.grad[idx], fd, rtol=1e-5, atol=1e-9)


class TestVariantForwards:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_forward_shapes_and_finiteness(self, variant):
        scene = small_scene()
        model = FwdModel(small_config(variant=variant))
        model.eval()
        inputs = [ViewInput.from_scene_view(v) for v in scene.views[:2]]
        target = scene.views[2]
        image, aux = model.forward(inputs, target.intr, target.pose)
        h, w = target.intr.height, target.intr.width
        assert image.data.shape == (h * w, 3)
        assert np.all(np.isfinite(image.data))
        assert aux["coverage"].shape == (h, w)
        assert aux["coverage"].sum() > 0
        assert len(aux["per_view"]) == 2

    def test_depth_supervised_variant_requires_depth(self):
        scene = small_scene()
        model = FwdModel(small_config(variant="fwd-d"))
        view = scene.views[0]
        no_depth = ViewInput(image=view.image, intr=view.intr, pose=view.pose)
        with pytest.raises(MissingDepthError):
            model.forward([no_depth], view.intr, view.pose)

    def test_unsupervised_variant_accepts_missing_depth(self):
        scene = small_scene()
        model = FwdModel(small_config(variant="fwd-u"))
        model.eval()
        view = scene.views[0]
        no_depth = ViewInput(image=view.image, intr=view.intr, pose=view.pose)
        image, _ = model.forward([no_depth], view.intr, view.pose)
        assert np.all(np.isfinite(image.data))

    def test_stage1_renders_raw_rgb_clouds(self):
        scene = small_scene()
        model = FwdModel(small_config(variant="fwd-u", stage1_steps=10))
        model.eval()
        inputs = [ViewInput.from_scene_view(v) for v in scene.views[:2]]
        target = scene.views[2]
        image, aux = model.forward(inputs, target.intr, target.pose, stage=1)
        assert image.data.shape == (target.intr.height * target.intr.width, 3)
        covered = aux["coverage"].reshape(-1) > 0
        assert image.data[covered].max() <= 1.0 + 1e-9

    def test_render_variant_override_needs_fusion_module(self):
        scene = small_scene()
        model = FwdModel(small_config(variant="ablate-no-transformer"))
        model.eval()
        inputs = [ViewInput.from_scene_view(v) for v in scene.views[:2]]
        target = scene.views[2]
        per_view = model.encode_views(inputs)
        with pytest.raises(DomainError):
            model.render_target(per_view, target.intr, target.pose,
                                variant="fwd-d")
        with pytest.raises(DomainError):
            model.render_target(per_view, target.intr, target.pose,
                                variant="sideways")

    def test_view_conditioning_is_identity_at_init(self):
        # The conditioner starts as an exact identity, so disabling it at
        # render time must not change a freshly initialized model's output.
        scene = small_scene()
        model = FwdModel(small_config(variant="fwd-d"))
        model.eval()
        inputs = [ViewInput.from_scene_view(v) for v in scene.views[:2]]
        target = scene.views[2]
        per_view = model.encode_views(inputs)
        base, _ = model.render_target(per_view, target.intr, target.pose)
        off, _ = model.render_target(per_view, target.intr, target.pose,
                                     variant="ablate-no-viewdep")
        np.testing.assert_array_equal(base.data, off.data)

        rng = np.random.default_rng(0)
        for name, p in model.named_parameters():
            if name.startswith("view_mlp."):
                p.data[...] += rng.normal(0, 0.05, size=p.data.shape).astype(
                    p.data.dtype)
        base2, _ = model.render_target(per_view, target.intr, target.pose)
        off2, _ = model.render_target(per_view, target.intr, target.pose,
                                      variant="ablate-no-viewdep")
        assert np.max(np.abs(base2.data - off2.data)) > 0
        np.testing.assert_array_equal(off.data, off2.data)

    def test_empty_inputs_rejected(self):
        model = FwdModel(small_config())
        scene = small_scene()
        with pytest.raises(EmptyInputError):
            model.encode_views([])
        with pytest.raises(EmptyInputError):
            model.render_target([], scene.views[0].intr, scene.views[0].pose)


class TestTraining:
    def test_zero_steps_is_a_no_op(self):
        scene = small_scene(resolution=(12, 16))
        model = FwdModel(small_config())
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        state = train(model, [scene], 0, seed=0)
        assert state.step == 0
        assert state.loss_history == []
        for name, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[name])

    def test_empty_scene_list_rejected(self):
        model = FwdModel(small_config())
        with pytest.raises(EmptyInputError):
            train(model, [], 10)

    def test_loss_decreases(self):
        scene = small_scene(resolution=(12, 16))
        model = FwdModel(small_config())
        state = train(model, [scene], 100, seed=0)
        first = float(np.mean(state.loss_history[:10]))
        last = float(np.mean(state.loss_history[-10:]))
        assert last < 0.5 * first

    def test_divergence_raises_with_step(self):
        scene = small_scene(resolution=(12, 16))
        model = FwdModel(small_config())
        p = model.parameters()[0]
        p.data[...] = np.nan
        with pytest.raises(TrainingDivergedError) as excinfo:
            train(model, [scene], 5, seed=0)
        assert excinfo.value.step == 0

    def test_resume_matches_single_run_bitwise(self):
        scene = small_scene(resolution=(12, 16))
        model_a = FwdModel(small_config())
        state_a = train(model_a, [scene], 20, seed=5)

        model_b = FwdModel(small_config())
        state_b = train(model_b, [scene], 10, seed=5)
        state_b = train(model_b, [scene], 10, state=state_b)

        assert state_a.step == state_b.step == 20
        assert state_a.loss_history == state_b.loss_history
        for (na, pa), (nb, pb) in zip(model_a.named_parameters(),
                                      model_b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_curve_records_windowed_means(self):
        scene = small_scene(resolution=(12, 16))
        model = FwdModel(small_config())
        state = train(model, [scene], 12, seed=0, curve_every=5)
        assert state.curve_steps == [5, 10]
        np.testing.assert_allclose(state.curve_losses[0],
                                   np.mean(state.loss_history[:5]), rtol=1e-12)
        np.testing.assert_allclose(state.curve_losses[1],
                                   np.mean(state.loss_history[5:10]), rtol=1e-12)

    def test_on_step_callback_sees_every_step(self):
        scene = small_scene(resolution=(12, 16))
        model = FwdModel(small_config())
        seen = []
        train(model, [scene], 4, seed=0,
              on_step=lambda step, comps: seen.append((step, comps["total"])))
        assert [s for s, _ in seen] == [1, 2, 3, 4]
        assert all(np.isfinite(v) for _, v in seen)

    def test_stage_schedule(self):
        model = FwdModel(small_config(variant="fwd-u", stage1_steps=6))
        state = init_train_state(model, seed=0)
        assert state.stage_boundaries == [6]
        assert state.stage == 1
        state.step = 5
        assert state.stage == 1
        state.step = 6
        assert state.stage == 2

    def test_every_parameter_receives_gradient(self):
        # Two steps so attention weights downstream of the first update
        # also see a nonzero gradient. The wide arc leaves uncovered pixels
        # in warped views, which is what trains the fill-in token.
        scene = small_scene(resolution=(12, 16), geometry="two-planes",
                            arc_deg=30.0)
        model = FwdModel(small_config())
        state = init_train_state(model, seed=0)
        model.train()
        seen = {name: 0.0 for name, _ in model.named_parameters()}
        for _ in range(2):
            sc, input_idx, target_idx = pl._sample_batch([scene], model.cfg,
                                                         state.rng)
            inputs = [ViewInput.from_scene_view(sc.views[i]) for i in input_idx]
            target = sc.views[target_idx]
            with ad.Tape() as tape:
                image, aux = model.forward(inputs, target.intr, target.pose,
                                           rng=state.rng, stage=state.stage)
                total, _ = loss_terms(image, target.image.reshape(-1, 3),
                                      aux["per_view"], model.cfg.loss,
                                      target.intr.height, target.intr.width)
                ad.backward(total, tape)
            params = model.parameters()
            for (name, p) in model.named_parameters():
                if p.grad is not None:
                    seen[name] = max(seen[name], float(np.max(np.abs(p.grad))))
            ad.adam_step(params, [p.grad for p in params], state.adam,
                         lr=model.cfg.lr)
            model.zero_grad()
            state.step += 1
        dead = sorted(name for name, g in seen.items() if g == 0.0)
        assert dead == []


class TestSynthesizeEvaluate:
    def test_synthesize_returns_image_grid(self):
        scene = small_scene()
        model = FwdModel(small_config())
        target = scene.views[2]
        image, aux = synthesize(model, scene, target.pose)
        assert image.shape == (target.intr.height, target.intr.width, 3)
        assert image.dtype == np.float64
        assert np.all(np.isfinite(image))
        assert len(aux["per_view"]) == 2

    def test_synthesize_explicit_indices(self):
        scene = small_scene()
        model = FwdModel(small_config())
        target = scene.views[0]
        _, aux = synthesize(model, scene, target.pose, input_indices=[1, 2])
        assert len(aux["per_view"]) == 2
        np.testing.assert_array_equal(aux["per_view"][0].pose.R,
                                      scene.views[1].pose.R)

    def test_synthesize_custom_target_resolution(self):
        scene = small_scene()
        model = FwdModel(small_config())
        half = scene.views[0].intr.scaled(0.5, 0.5)
        image, _ = synthesize(model, scene, scene.views[2].pose,
                              target_intr=half)
        assert image.shape == (half.height, half.width, 3)

    def test_synthesize_empty_scene_rejected(self):
        model = FwdModel(small_config())
        with pytest.raises(EmptyInputError):
            synthesize(model, SceneBundle("empty", []), None)

    def test_evaluate_rows_and_timing(self):
        scene = small_scene()
        model = FwdModel(small_config())
        rows = evaluate(model, [scene], min_timed_renders=2)
        assert len(rows) == 1
        row = rows[0]
        assert row["scene"] == scene.name
        assert row["view"] == 2
        assert np.isfinite(row["psnr_db"])
        assert row["ssim"] <= 1.0
        assert row["ms_per_frame"] > 0

    def test_evaluate_requires_scenes(self):
        model = FwdModel(small_config())
        with pytest.raises(EmptyInputError):
            evaluate(model, [])


class TestSaveLoad:
    def test_round_trip_without_optimizer(self, tmp_path):
        model = FwdModel(small_config())
        path = tmp_path / "model.fwdc"
        save_model(path, model)
        loaded, state = load_model(path)
        assert state is None
        assert loaded.cfg == model.cfg
        for (na, pa), (nb, pb) in zip(model.named_parameters(),
                                      loaded.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        for (na, ba), (nb, bb) in zip(model.named_buffers(),
                                      loaded.named_buffers()):
            assert na == nb
            np.testing.assert_array_equal(ba, bb)
        meta = ckpt.checkpoint_meta(path)
        assert meta["kind"] == "fwd-model"
        assert meta["has_optimizer"] is False
        assert meta["step"] == 0

    def test_round_trip_with_optimizer_resumes_bitwise(self, tmp_path):
        scene = small_scene(resolution=(12, 16))
        model_a = FwdModel(small_config())
        state_a = train(model_a, [scene], 10, seed=7)
        path = tmp_path / "mid.fwdc"
        save_model(path, model_a, state_a)

        model_b, state_b = load_model(path)
        assert state_b is not None
        assert state_b.step == 10
        assert state_b.adam.t == state_a.adam.t
        assert state_b.rng.bit_generator.state == state_a.rng.bit_generator.state

        state_a = train(model_a, [scene], 5, state=state_a)
        state_b = train(model_b, [scene], 5, state=state_b)
        assert state_a.step == state_b.step == 15
        for (na, pa), (nb, pb) in zip(model_a.named_parameters(),
                                      model_b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "other.fwdc"
        ckpt.save_checkpoint(path, {"a": np.zeros(3)}, {"kind": "something"})
        with pytest.raises(FormatError):
            load_model(path)

    def test_missing_parameter_rejected(self, tmp_path):
        model = FwdModel(small_config())
        path = tmp_path / "model.fwdc"
        save_model(path, model)
        arrays, meta = ckpt.load_checkpoint(path)
        victim = next(k for k in arrays if k.startswith("param/"))
        del arrays[victim]
        broken = tmp_path / "broken.fwdc"
        ckpt.save_checkpoint(broken, arrays, meta)
        with pytest.raises(FormatError):
            load_model(broken)

    def test_unknown_config_field_rejected(self, tmp_path):
        model = FwdModel(small_config())
        path = tmp_path / "model.fwdc"
        save_model(path, model)
        arrays, meta = ckpt.load_checkpoint(path)
        meta = dict(meta)
        meta["config"] = dict(meta["config"])
        meta["config"]["bogus_knob"] = 1
        broken = tmp_path / "broken.fwdc"
        ckpt.save_checkpoint(broken, arrays, meta)
        with pytest.raises(FormatError):
            load_model(broken)

    def test_config_survives_json_round_trip(self):
        cfg = small_config(variant="fwd-u", stage1_steps=50,
                           loss=LossConfig(content_loss="gradient_diff"))
        d = pl._config_to_jsonable(cfg)
        back = pl._config_from_jsonable(d)
        assert back == cfg
        assert dataclasses.asdict(back) == dataclasses.asdict(cfg)
