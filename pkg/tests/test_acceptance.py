"""Acceptance suite: one test per acceptance criterion, at stated scales.

The two full-scale training runs (2000 iterations each) are shared
session fixtures; the whole suite is CPU-only and deterministic.
"""
import filecmp
import time

import numpy as np
import pytest

from gaussianhead.cli import main
from gaussianhead.core import CameraPose, GaussianCloud
from gaussianhead.formats import (load_checkpoint, load_ply, save_checkpoint,
                                  save_ply)
from gaussianhead.gradcheck import run_suite
from gaussianhead.motion import (MotionFieldParams, dual_branch_animate,
                                 split_delta)
from gaussianhead.objectives import lifting_loss, psnr, ssim
from gaussianhead.rasterizer import RasterConfig, rasterize_forward, render_benchmark
from gaussianhead.synthetic import synth_scene
from gaussianhead.trainer import (MotionModel, TrainingConfig, animate,
                                  evaluate_view, lip_sync_stats,
                                  mouth_region_l1, rebuild_from_checkpoint,
                                  save_training_checkpoint, train_stage1,
                                  train_stage2)
from gaussianhead.autodiff import Tensor

DESK = dict(iterations=2000, lr=1e-4, eval_every=500, seed=0)


@pytest.fixture(scope="session")
def static_bundle():
    return synth_scene(0, "static-head")      # 8 views, 64x64, P=64


@pytest.fixture(scope="session")
def talking_bundle():
    return synth_scene(0, "talking-head")     # 32 frames, 64x64


@pytest.fixture(scope="session")
def stage1(static_bundle, tmp_path_factory):
    t0 = time.time()
    result = train_stage1(TrainingConfig(**DESK), static_bundle)
    elapsed = time.time() - t0
    ckpt = tmp_path_factory.mktemp("acc") / "stage1.ckpt"
    save_training_checkpoint(ckpt, 1, result.iteration, result.config,
                             result.model, optimizer=result.optimizer)
    return result, ckpt, elapsed


@pytest.fixture(scope="session")
def stage2(stage1, talking_bundle):
    _, ckpt, _ = stage1
    return train_stage2(TrainingConfig(**DESK), talking_bundle, ckpt)


@pytest.fixture(scope="session")
def ablated(static_bundle, talking_bundle, tmp_path_factory):
    cfg = TrainingConfig(no_completion_branch=True, **DESK)
    r1 = train_stage1(cfg, static_bundle)
    ckpt = tmp_path_factory.mktemp("abl") / "stage1_nocb.ckpt"
    save_training_checkpoint(ckpt, 1, r1.iteration, r1.config, r1.model,
                             optimizer=r1.optimizer)
    return train_stage2(cfg, talking_bundle, ckpt)


class TestGradcheck:
    def test_suite_passes_within_two_minutes(self):
        t0 = time.time()
        ok, rows = run_suite(seed=0, instances=20)
        elapsed = time.time() - t0
        for name, worst, tol, passed in rows:
            assert passed, f"{name}: worst rel err {worst:.3e} > tol {tol:.0e}"
        assert ok
        assert elapsed < 120.0, f"gradcheck took {elapsed:.0f}s"


class TestIdentityAtInit:
    def test_animate_equals_static_render_exactly(self, stage1, talking_bundle):
        result, _, _ = stage1
        model = result.model
        motion = MotionModel(result.config, np.random.default_rng(99))
        cam = talking_bundle.cameras[0]
        static = model.reconstruct_cloud(
            talking_bundle.f_local, talking_bundle.f_global,
            talking_bundle.priors[talking_bundle.source_index])
        reference = model.render_cloud_rgb(static, cam)
        frames = animate(model, motion, talking_bundle, talking_bundle.audio,
                         cam)
        assert len(frames) == talking_bundle.n_frames
        for frame in frames:
            assert np.array_equal(frame, reference)


class TestDeformationAndLifting:
    def test_zero_delta_is_bitwise_identity(self):
        rng = np.random.default_rng(0)
        n = 50
        cloud = GaussianCloud(mu=rng.normal(0, 0.4, (n, 3)),
                              scale_log=rng.normal(-2, 0.3, (n, 3)),
                              rot=rng.normal(0, 1, (n, 4)),
                              opacity_logit=rng.normal(0, 1, n),
                              feat=rng.random((n, 8)),
                              branch_tag=np.zeros(n, dtype=np.uint8))
        field = MotionFieldParams("coarse", 8, rng=np.random.default_rng(1))
        out = dual_branch_animate(cloud, rng.normal(0, 1, 8), field, None)
        for a, b in ((out.mu, cloud.mu), (out.scale_log, cloud.scale_log),
                     (out.rot, cloud.rot),
                     (out.opacity_logit, cloud.opacity_logit),
                     (out.feat, cloud.feat)):
            assert np.array_equal(a, b)

    def test_lifting_zero_when_coincident(self):
        rng = np.random.default_rng(2)
        mu = rng.normal(0, 1, (30, 3))
        verts = mu[rng.choice(30, 10, replace=False)]
        assert lifting_loss(verts, Tensor(mu)).item() == 0.0

    def test_lifting_matches_brute_force_100_scenes(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            verts = rng.normal(0, 1, (rng.integers(1, 25), 3))
            mu = rng.normal(0, 1, (rng.integers(1, 40), 3))
            expected = np.mean([np.linalg.norm(mu - v, axis=1).min()
                                for v in verts])
            got = lifting_loss(verts, Tensor(mu)).item()
            assert abs(got - expected) <= 1e-12 * max(expected, 1.0)


class TestStage1Overfit:
    def test_holdout_psnr_and_ssim(self, stage1, static_bundle):
        result, _, elapsed = stage1
        holdout = result.config.holdout_view % static_bundle.n_frames
        p, s = evaluate_view(result.model, static_bundle, holdout)
        assert p >= 25.0, f"held-out PSNR {p:.2f} dB < 25 dB"
        assert s >= 0.85, f"held-out SSIM {s:.3f} < 0.85"
        assert elapsed <= 1800.0, f"stage 1 took {elapsed:.0f}s > 30 min"


class TestStage2LipSync:
    def test_aperture_correlation_and_anchor_distance(self, stage2,
                                                      talking_bundle):
        r, lmd = lip_sync_stats(stage2.model, stage2.motion, talking_bundle)
        assert r >= 0.9, f"aperture/driving-curve correlation {r:.3f} < 0.9"
        assert lmd <= 2.0, f"anchor distance {lmd:.2f} px > 2.0 px"


class TestAblationDirection:
    def test_no_completion_branch_mouth_l1_at_least_5pct_worse(
            self, stage2, ablated, talking_bundle):
        full = mouth_region_l1(stage2.model, stage2.motion, talking_bundle)
        without = mouth_region_l1(ablated.model, ablated.motion,
                                  talking_bundle)
        assert without >= 1.05 * full, (
            f"mouth L1 without completion branch {without:.5f} is not >= 5% "
            f"worse than full model {full:.5f}")


class TestThroughput:
    def _cloud(self, n, rng):
        return GaussianCloud(mu=rng.normal(0.0, 0.5, (n, 3)),
                             scale_log=rng.normal(np.log(0.02), 0.3, (n, 3)),
                             rot=rng.normal(0.0, 1.0, (n, 4)),
                             opacity_logit=rng.normal(0.0, 1.0, n),
                             feat=rng.uniform(0.0, 1.0, (n, 8)),
                             branch_tag=np.zeros(n, dtype=np.uint8))

    def _cam(self, s=128):
        return CameraPose.look_at(eye=[0, 0, 2.5], target=[0, 0, 0],
                                  up=[0, 1, 0], fx=float(s), fy=float(s),
                                  cx=s / 2, cy=s / 2, image_w=s, image_h=s)

    def test_10k_primitives_at_128px_at_least_24_fps(self):
        report = render_benchmark(self._cloud(10_000,
                                              np.random.default_rng(0)),
                                  self._cam(), 20)
        assert report["fps"] >= 24.0, f"{report['fps']:.1f} FPS < 24"

    def test_cost_monotone_in_primitive_count(self):
        rng = np.random.default_rng(1)
        times = []
        for n in (1000, 4000, 16000):
            rep = render_benchmark(self._cloud(n, rng), self._cam(), 10)
            times.append(1.0 / rep["fps"])
        assert times[0] <= times[1] <= times[2], times


class TestFormatRoundTrips:
    def test_ply_save_load_save_byte_identical(self, stage1, static_bundle,
                                               tmp_path):
        result, _, _ = stage1
        cloud = result.model.reconstruct_cloud(static_bundle.f_local,
                                               static_bundle.f_global,
                                               static_bundle.priors[0])
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        save_ply(cloud, p1)
        save_ply(load_ply(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_checkpoint_save_load_save_byte_identical(self, stage1, tmp_path):
        _, ckpt, _ = stage1
        stage, it, tensors, cfg_text = load_checkpoint(ckpt)
        again = tmp_path / "again.ckpt"
        save_checkpoint(again, stage, it, tensors, cfg_text)
        assert ckpt.read_bytes() == again.read_bytes()

    def test_resume_bitwise_equals_uninterrupted_for_10_steps(
            self, static_bundle, tmp_path):
        cfg = dict(DESK, iterations=10, eval_every=100)
        full = train_stage1(TrainingConfig(**cfg), static_bundle)
        half = train_stage1(TrainingConfig(**dict(cfg, iterations=5)),
                            static_bundle)
        mid = tmp_path / "mid.ckpt"
        save_training_checkpoint(mid, 1, 5, half.config, half.model,
                                 optimizer=half.optimizer)
        resumed = train_stage1(TrainingConfig(**cfg), static_bundle,
                               resume_path=mid)
        tf = {k: v.data for k, v in full.model.named_tensors().items()}
        tr = {k: v.data for k, v in resumed.model.named_tensors().items()}
        assert set(tf) == set(tr)
        for k in tf:
            assert np.array_equal(tf[k], tr[k]), k


class TestDeterminism:
    def test_synth_scene_byte_identical_across_runs(self, tmp_path):
        for name in ("a", "b"):
            rc = main(["synth-scene", "--preset", "talking-head", "--seed",
                       "3", "--resolution", "32", "--frames", "6",
                       "--out", str(tmp_path / name)])
            assert rc == 0
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files
        for sub in ("frames", "priors"):
            assert not filecmp.dircmp(tmp_path / "a" / sub,
                                      tmp_path / "b" / sub).diff_files

    def test_render_bitwise_identical_across_tile_parallelism(
            self, stage1, static_bundle):
        result, _, _ = stage1
        cloud = result.model.reconstruct_cloud(static_bundle.f_local,
                                               static_bundle.f_global,
                                               static_bundle.priors[0])
        cam = static_bundle.cameras[0]
        images = []
        for par in (1, 2, 4):
            img, _ = rasterize_forward(cloud, cam, RasterConfig(parallel=par))
            images.append(img.data.copy())
        assert np.array_equal(images[0], images[1])
        assert np.array_equal(images[0], images[2])

    def test_training_bitwise_repeatable(self, static_bundle):
        cfg = TrainingConfig(**dict(DESK, iterations=5, eval_every=100))
        a = train_stage1(cfg, static_bundle)
        b = train_stage1(cfg, static_bundle)
        ta = {k: v.data for k, v in a.model.named_tensors().items()}
        tb = {k: v.data for k, v in b.model.named_tensors().items()}
        assert all(np.array_equal(ta[k], tb[k]) for k in ta)
