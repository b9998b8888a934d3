import numpy as np
import pytest

from gaussianhead.synthetic import ScenePreset, synth_scene
from gaussianhead.trainer import (HeadModel, MotionModel, TrainingConfig,
                                  config_from_ini, config_to_ini, evaluate_view,
                                  fingerprint, lip_sync_stats, mouth_region_l1,
                                  rebuild_from_checkpoint,
                                  save_training_checkpoint, train_stage1,
                                  train_stage2)


def _preset(name="static-head", n_frames=4):
    return ScenePreset(name=name, resolution=16, n_frames=n_frames,
                       local_resolution=16, local_channels=9,
                       global_channels=8, audio_dim=6)


def _config(**kw):
    base = dict(iterations=4, eval_every=2, plane_resolution=8, feat_dim=4,
                conv_hidden=(4,), mlp_hidden=(8,), motion_hidden=(8,),
                hash_levels=2, hash_table_size=256, hash_base_resolution=4,
                audio_dim=6, seed=0)
    base.update(kw)
    return TrainingConfig(**base)


def _tensor_data(model, motion=None):
    out = {k: v.data.copy() for k, v in model.named_tensors().items()}
    if motion is not None:
        out.update({k: v.data.copy() for k, v in motion.named_tensors().items()})
    return out


class TestConfig:
    def test_ini_round_trip_all_fields(self):
        cfg = TrainingConfig(iterations=123, lr=3e-5, seed=9,
                             lambda_lifting=0.25, conv_hidden=(7, 5),
                             mlp_hidden=(64,), motion_hidden=(16, 16, 16),
                             no_completion_branch=True, use_holdout=False,
                             hash_growth=1.5, background=0.125)
        back = config_from_ini(config_to_ini(cfg))
        assert back == cfg

    def test_overrides_applied(self):
        cfg = config_from_ini(config_to_ini(TrainingConfig()),
                              overrides={"iterations": 7, "lr": "2e-3"})
        assert cfg.iterations == 7 and cfg.lr == 2e-3

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainingConfig(iterations=0)
        with pytest.raises(ValueError):
            TrainingConfig(lr=0.0)

    def test_float_round_trip_exact(self):
        cfg = TrainingConfig(lr=1.0 / 3.0)
        assert config_from_ini(config_to_ini(cfg)).lr == cfg.lr


class TestFingerprint:
    def test_order_independent(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0, 1, (3, 3))
        b = rng.normal(0, 1, 4)
        assert fingerprint({"x": a, "y": b}) == fingerprint({"y": b, "x": a})

    def test_sensitive_to_values(self):
        a = np.zeros(3)
        assert fingerprint({"x": a}) != fingerprint({"x": a + 1e-12})


class TestStage1:
    def test_short_run_produces_log_and_holdout_metric(self):
        bundle = synth_scene(0, _preset())
        result = train_stage1(_config(), bundle)
        assert result.iteration == 4
        assert [row[0] for row in result.log] == [2, 4]
        assert result.log[-1][5] is not None  # holdout PSNR present

    def test_adopts_bundle_channels(self):
        bundle = synth_scene(0, _preset())
        result = train_stage1(_config(local_channels=99, global_channels=99),
                              bundle)
        assert result.config.local_channels == 9
        assert result.config.global_channels == 8

    def test_fixed_seed_bitwise_repeatable(self):
        bundle = synth_scene(1, _preset())
        a = train_stage1(_config(), bundle)
        b = train_stage1(_config(), bundle)
        ta, tb = _tensor_data(a.model), _tensor_data(b.model)
        assert all(np.array_equal(ta[k], tb[k]) for k in ta)

    def test_resume_matches_uninterrupted_10_steps(self, tmp_path):
        bundle = synth_scene(2, _preset())
        full = train_stage1(_config(iterations=10, eval_every=100), bundle)
        half = train_stage1(_config(iterations=5, eval_every=100), bundle)
        ckpt = tmp_path / "half.ckpt"
        save_training_checkpoint(ckpt, 1, 5, half.config, half.model,
                                 optimizer=half.optimizer)
        resumed = train_stage1(_config(iterations=10, eval_every=100), bundle,
                               resume_path=ckpt)
        tf, tr = _tensor_data(full.model), _tensor_data(resumed.model)
        assert set(tf) == set(tr)
        for k in tf:
            assert np.array_equal(tf[k], tr[k]), k

    def test_resume_rejects_wrong_stage(self, tmp_path):
        bundle = synth_scene(0, _preset())
        r = train_stage1(_config(), bundle)
        ckpt = tmp_path / "s2.ckpt"
        save_training_checkpoint(ckpt, 2, 4, r.config, r.model,
                                 optimizer=r.optimizer)
        with pytest.raises(ValueError):
            train_stage1(_config(), bundle, resume_path=ckpt)

    def test_evaluate_view_returns_metrics(self):
        bundle = synth_scene(0, _preset())
        r = train_stage1(_config(), bundle)
        p, s = evaluate_view(r.model, bundle, 3)
        assert np.isfinite(p) and -1.0 <= s <= 1.0


class TestCheckpointRebuild:
    def test_rebuild_restores_tensors_bitwise(self, tmp_path):
        bundle = synth_scene(3, _preset())
        r = train_stage1(_config(), bundle)
        ckpt = tmp_path / "s1.ckpt"
        save_training_checkpoint(ckpt, 1, 4, r.config, r.model,
                                 optimizer=r.optimizer)
        stage, it, cfg, model, motion, _ = rebuild_from_checkpoint(ckpt)
        assert (stage, it) == (1, 4)
        assert motion is None
        ta, tb = _tensor_data(r.model), _tensor_data(model)
        assert all(np.array_equal(ta[k], tb[k]) for k in ta)

    def test_save_load_save_byte_identical(self, tmp_path):
        bundle = synth_scene(3, _preset())
        r = train_stage1(_config(), bundle)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_training_checkpoint(p1, 1, 4, r.config, r.model,
                                 optimizer=r.optimizer)
        stage, it, cfg, model, motion, tensors = rebuild_from_checkpoint(p1)
        from gaussianhead.formats import save_checkpoint
        from gaussianhead.trainer import config_to_ini
        save_checkpoint(p2, stage, it, tensors, config_to_ini(cfg))
        assert p1.read_bytes() == p2.read_bytes()


class TestStage2:
    def _stage1_ckpt(self, tmp_path, bundle):
        r = train_stage1(_config(), bundle)
        ckpt = tmp_path / "s1.ckpt"
        save_training_checkpoint(ckpt, 1, 4, r.config, r.model,
                                 optimizer=r.optimizer)
        return ckpt

    def test_requires_audio(self, tmp_path):
        static = synth_scene(0, _preset())
        ckpt = self._stage1_ckpt(tmp_path, static)
        with pytest.raises(ValueError):
            train_stage2(_config(), static, ckpt)

    def test_rejects_non_stage1_source(self, tmp_path):
        static = synth_scene(0, _preset())
        talking = synth_scene(0, _preset("talking-head"))
        r = train_stage1(_config(), static)
        bad = tmp_path / "s2src.ckpt"
        save_training_checkpoint(bad, 2, 4, r.config, r.model,
                                 optimizer=r.optimizer)
        with pytest.raises(ValueError):
            train_stage2(_config(), talking, bad)

    def test_stage1_weights_frozen_bitwise(self, tmp_path):
        static = synth_scene(0, _preset())
        talking = synth_scene(0, _preset("talking-head"))
        ckpt = self._stage1_ckpt(tmp_path, static)
        before = rebuild_from_checkpoint(ckpt)[3]
        r = train_stage2(_config(), talking, ckpt)
        ta = _tensor_data(before)
        tb = {k: v.data for k, v in r.model.named_tensors().items()}
        assert all(np.array_equal(ta[k], tb[k]) for k in ta)

    def test_adopts_audio_dim_from_bundle(self, tmp_path):
        static = synth_scene(0, _preset())
        talking = synth_scene(0, _preset("talking-head"))
        ckpt = self._stage1_ckpt(tmp_path, static)
        r = train_stage2(_config(audio_dim=99), talking, ckpt)
        assert r.config.audio_dim == 6

    def test_resume_matches_uninterrupted(self, tmp_path):
        static = synth_scene(1, _preset())
        talking = synth_scene(1, _preset("talking-head"))
        ckpt = self._stage1_ckpt(tmp_path, static)
        full = train_stage2(_config(iterations=6, eval_every=100), talking,
                            ckpt)
        half = train_stage2(_config(iterations=3, eval_every=100), talking,
                            ckpt)
        mid = tmp_path / "mid.ckpt"
        save_training_checkpoint(mid, 2, 3, half.config, half.model,
                                 motion=half.motion, optimizer=half.optimizer)
        resumed = train_stage2(_config(iterations=6, eval_every=100), talking,
                               ckpt, resume_path=mid)
        tf = _tensor_data(full.model, full.motion)
        tr = _tensor_data(resumed.model, resumed.motion)
        assert set(tf) == set(tr)
        for k in tf:
            assert np.array_equal(tf[k], tr[k]), k

    def test_no_fine_field_has_single_branch(self, tmp_path):
        static = synth_scene(0, _preset())
        talking = synth_scene(0, _preset("talking-head"))
        ckpt = self._stage1_ckpt(tmp_path, static)
        r = train_stage2(_config(no_fine_field=True), talking, ckpt)
        assert r.motion.fine is None
        assert not any(k.startswith("motion/fine")
                       for k in r.motion.named_tensors())


class TestEvaluation:
    def test_lip_sync_stats_and_mouth_l1_finite(self, tmp_path):
        static = synth_scene(0, _preset())
        talking = synth_scene(0, _preset("talking-head"))
        r1 = train_stage1(_config(), static)
        ckpt = tmp_path / "s1.ckpt"
        save_training_checkpoint(ckpt, 1, 4, r1.config, r1.model,
                                 optimizer=r1.optimizer)
        r2 = train_stage2(_config(iterations=2, eval_every=100), talking, ckpt)
        r, lmd = lip_sync_stats(r2.model, r2.motion, talking)
        assert -1.0 <= r <= 1.0 and lmd >= 0.0
        assert mouth_region_l1(r2.model, r2.motion, talking) >= 0.0

    def test_identity_motion_has_zero_correlation(self, tmp_path):
        # untrained motion fields output exact zero deltas, so the rendered
        # aperture is constant and correlation defaults to zero
        static = synth_scene(0, _preset())
        talking = synth_scene(0, _preset("talking-head"))
        r1 = train_stage1(_config(), static)
        model = r1.model
        motion = MotionModel(r1.config, np.random.default_rng(5))
        r, _ = lip_sync_stats(model, motion, talking)
        assert r == 0.0
