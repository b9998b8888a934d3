"""Two-stage training: reconstruction first, motion fields second.

Stage 1 optimizes the reconstruction branches, per-vertex weights, and the
RGB decoder against ground-truth frames (completion anchored to each
frame's prior). Stage 2 freezes all of that and optimizes only the two
motion fields, with the completion branch anchored to the source-frame
prior. Both loops are bitwise deterministic under a fixed seed, and
checkpoints round-trip exactly, so interrupted training resumes on the
same trajectory.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .autodiff import Tensor
from .core import GaussianCloud, CameraPose, VISIBLE, OCCLUDED, merge_clouds
from .encoding import HashGridConfig
from .motion import (COARSE, FINE, AudioFeatureTrack, MotionFieldParams,
                     dual_branch_animate, motion_field_forward_tensor)
from .nn import Adam
from .objectives import (LossWeights, lifting_loss, lip_loss,
                         lip_mask_from_landmarks, psnr, ssim, stage1_loss,
                         stage2_loss)
from .rasterizer import RasterConfig, RgbDecoder, rasterize, rasterize_forward
from .reconstruction import (FeaturePlane, PriorMesh, ReconConfig, ReconParams,
                             bilinear_resize, completion_branch_tensors,
                             init_feature_plane, reconstruct, visible_branch,
                             visible_branch_tensors)
from .synthetic import SceneBundle, lip_anchor_projections, lip_aperture_px


@dataclass
class TrainingConfig:
    stage: int = 1
    iterations: int = 2000
    lr: float = 1e-4
    seed: int = 0
    lambda_perceptual: float = 0.0
    lambda_lifting: float = 0.1
    lambda_lip: float = 1.0
    eval_every: int = 500
    holdout_view: int = 3        # interior ring view; train on all others
    use_holdout: bool = True
    plane_resolution: int = 64
    feat_dim: int = 8
    local_channels: int = 64
    global_channels: int = 64
    conv_hidden: tuple = (48, 48)
    mlp_hidden: tuple = (128, 128)
    motion_hidden: tuple = (64, 64)
    audio_dim: int = 32
    hash_levels: int = 4
    hash_features: int = 2
    hash_table_size: int = 16384
    hash_base_resolution: int = 16
    hash_growth: float = 2.0
    box_extent: float = 1.2
    half_depth: float = 0.8
    tile_size: int = 16
    parallel: int = 1
    background: float = 0.0
    no_completion_branch: bool = False
    no_fine_field: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def weights(self) -> LossWeights:
        return LossWeights(perceptual=self.lambda_perceptual,
                           lifting=self.lambda_lifting, lip=self.lambda_lip)

    def raster(self) -> RasterConfig:
        return RasterConfig(tile_size=self.tile_size, parallel=self.parallel,
                            background=self.background)

    def hash_grid(self) -> HashGridConfig:
        e = self.box_extent
        return HashGridConfig(levels=self.hash_levels,
                              features_per_level=self.hash_features,
                              table_size=self.hash_table_size,
                              base_resolution=self.hash_base_resolution,
                              growth=self.hash_growth,
                              box_min=np.array([-e, -e, -e]),
                              box_max=np.array([e, e, e]))


_TUPLE_FIELDS = ("conv_hidden", "mlp_hidden", "motion_hidden")


def config_to_ini(cfg: TrainingConfig) -> str:
    parser = configparser.ConfigParser()
    parser["training"] = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _TUPLE_FIELDS:
            v = ",".join(str(x) for x in v)
        parser["training"][f.name] = repr(v) if isinstance(v, float) else str(v)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_from_ini(text_or_path, overrides: dict | None = None) -> TrainingConfig:
    parser = configparser.ConfigParser()
    if "\n" in str(text_or_path) or "[" in str(text_or_path)[:1]:
        parser.read_string(str(text_or_path))
    else:
        if not parser.read(text_or_path):
            raise FileNotFoundError(f"config file not found: {text_or_path}")
    values = dict(parser["training"]) if parser.has_section("training") else {}
    if overrides:
        values.update({k: str(v) for k, v in overrides.items() if v is not None})
    kwargs = {}
    for f in fields(TrainingConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        if f.name in _TUPLE_FIELDS:
            kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x)
        elif f.type == "bool" or isinstance(getattr(TrainingConfig, f.name, None), bool):
            kwargs[f.name] = raw.lower() in ("1", "true", "yes")
        elif f.type == "int" or isinstance(getattr(TrainingConfig, f.name, None), int):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = float(raw)
    return TrainingConfig(**kwargs)


class HeadModel:
    """Reconstruction parameters + decoder + lifting plane (Stage-1 state)."""

    def __init__(self, config: TrainingConfig, n_completion: int,
                 rng: np.random.Generator):
        self.config = config
        recon_cfg = ReconConfig(plane_resolution=config.plane_resolution,
                                feat_dim=config.feat_dim,
                                local_channels=config.local_channels,
                                global_channels=config.global_channels,
                                conv_hidden=tuple(config.conv_hidden),
                                mlp_hidden=tuple(config.mlp_hidden))
        self.recon = ReconParams(recon_cfg, n_completion, rng)
        self.decoder = RgbDecoder(config.feat_dim, rng=rng)
        self.plane = init_feature_plane(config.plane_resolution,
                                        half_depth=config.half_depth)

    def fit_local(self, f_local: np.ndarray) -> np.ndarray:
        """Resample a local feature map to the plane resolution if needed."""
        p = self.config.plane_resolution
        if f_local.shape[:2] != (p, p):
            return bilinear_resize(f_local, p, p)
        return np.asarray(f_local, dtype=np.float64)

    def parameters(self):
        return self.recon.parameters() + self.decoder.parameters()

    def named_tensors(self) -> dict:
        out = {}
        for prefix, net in (("recon/conv0", self.recon.conv0),
                            ("recon/conv1", self.recon.conv1),
                            ("recon/mlp", self.recon.completion_mlp)):
            for i, layer in enumerate(net.layers):
                out[f"{prefix}/layer{i}/weight"] = layer.weight
                out[f"{prefix}/layer{i}/bias"] = layer.bias
        out["recon/vertex_weights"] = self.recon.vertex_weights
        out["recon/plane_offset"] = self.recon.plane_offset
        out["decoder/weight"] = self.decoder.weight
        out["decoder/bias"] = self.decoder.bias
        if self.decoder.refiner is not None:
            out["decoder/refiner/weight"] = self.decoder.refiner.weight
            out["decoder/refiner/bias"] = self.decoder.refiner.bias
        return out

    def render_frame(self, f_local: Tensor, f_global: Tensor, prior: PriorMesh,
                     cam: CameraPose):
        """Differentiable reconstruct-and-render; returns (rgb, vis_mu)."""
        cfg = self.config
        vis = visible_branch_tensors(f_local, self.plane, self.recon)
        n_vis = vis[0].data.shape[0]
        if cfg.no_completion_branch:
            mu, slog, rot, opa, feat = vis
            tags = np.zeros(n_vis, dtype=np.uint8)
        else:
            occ = completion_branch_tensors(f_global, prior, self.recon)
            from .autodiff import concat
            mu, slog, rot, opa, feat = (
                concat([v, o], axis=0) for v, o in zip(vis, occ))
            tags = np.concatenate([
                np.full(n_vis, VISIBLE, dtype=np.uint8),
                np.full(occ[0].data.shape[0], OCCLUDED, dtype=np.uint8)])
        raster = rasterize(mu, slog, rot, opa, feat, cam, cfg.raster(), tags)
        rgb = self._composite_rgb(raster[:, :, :cfg.feat_dim],
                                  raster[:, :, cfg.feat_dim:cfg.feat_dim + 1])
        vis_mu = mu if cfg.no_completion_branch else mu[0:n_vis]
        return rgb, vis_mu

    def _composite_rgb(self, feat, alpha):
        """Decode features and blend against the background by coverage.

        Without the alpha blend, empty pixels decode to sigmoid(0) = 0.5
        instead of the background color.
        """
        rgb = self.decoder(feat) * alpha
        bg = self.config.background
        if bg != 0.0:
            rgb = rgb + (Tensor(np.ones_like(alpha.data)) - alpha) * bg
        return rgb

    def reconstruct_cloud(self, f_local: np.ndarray, f_global: np.ndarray,
                          prior: PriorMesh) -> GaussianCloud:
        """Non-differentiable full reconstruction."""
        f_local = self.fit_local(f_local)
        if self.config.no_completion_branch:
            return visible_branch(f_local, self.plane, self.recon)
        return reconstruct(f_local, f_global, self.plane, prior, self.recon)

    def render_cloud_rgb(self, cloud: GaussianCloud, cam: CameraPose) -> np.ndarray:
        img, _ = rasterize_forward(cloud, cam, self.config.raster())
        return self._composite_rgb(Tensor(img.data),
                                   Tensor(img.alpha[:, :, None])).data


class MotionModel:
    """Coarse + fine motion fields (Stage-2 state)."""

    def __init__(self, config: TrainingConfig, rng: np.random.Generator):
        self.config = config
        grid = config.hash_grid()
        self.coarse = MotionFieldParams(COARSE, config.audio_dim, grid,
                                        tuple(config.motion_hidden), rng)
        self.fine = None if config.no_fine_field else MotionFieldParams(
            FINE, config.audio_dim, config.hash_grid(),
            tuple(config.motion_hidden), rng)

    def parameters(self):
        params = self.coarse.parameters()
        if self.fine is not None:
            params += self.fine.parameters()
        return params

    def named_tensors(self) -> dict:
        out = {}
        branches = [("coarse", self.coarse)]
        if self.fine is not None:
            branches.append(("fine", self.fine))
        for name, f in branches:
            out[f"motion/{name}/tables"] = f.tables
            for i, layer in enumerate(f.mlp.layers):
                out[f"motion/{name}/mlp/layer{i}/weight"] = layer.weight
                out[f"motion/{name}/mlp/layer{i}/bias"] = layer.bias
        return out


def fingerprint(tensors: dict) -> str:
    """Order-independent hash of named arrays, for freeze assertions."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(np.ascontiguousarray(data, dtype=np.float64).tobytes())
    return h.hexdigest()


def save_training_checkpoint(path, stage: int, iteration: int,
                             config: TrainingConfig, model: HeadModel,
                             motion: MotionModel | None = None,
                             optimizer: Adam | None = None):
    from .formats import save_checkpoint
    tensors = {k: v.data for k, v in model.named_tensors().items()}
    if motion is not None:
        tensors.update({k: v.data for k, v in motion.named_tensors().items()})
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    save_checkpoint(path, stage, iteration, tensors, config_to_ini(config))


def load_training_checkpoint(path):
    """Returns (stage, iteration, config, tensors)."""
    from .formats import load_checkpoint
    stage, iteration, tensors, cfg_text = load_checkpoint(path)
    return stage, iteration, config_from_ini(cfg_text), tensors


def _load_named(named: dict, tensors: dict, prefix: str | None = None):
    for name, t in named.items():
        if prefix is not None and not name.startswith(prefix):
            continue
        if name not in tensors:
            raise KeyError(f"checkpoint missing tensor {name}")
        t.data[...] = tensors[name].reshape(t.data.shape)


def rebuild_from_checkpoint(path):
    """Reconstruct models (and optimizer state) from a checkpoint file."""
    stage, iteration, config, tensors = load_training_checkpoint(path)
    n_completion = tensors["recon/vertex_weights"].shape[0]
    rng = np.random.default_rng(config.seed)
    model = HeadModel(config, n_completion, rng)
    _load_named(model.named_tensors(), tensors)
    motion = None
    if any(k.startswith("motion/") for k in tensors):
        motion = MotionModel(config, np.random.default_rng(config.seed + 1))
        _load_named(motion.named_tensors(), tensors)
    return stage, iteration, config, model, motion, tensors


@dataclass
class TrainResult:
    model: HeadModel
    motion: MotionModel | None
    optimizer: Adam
    iteration: int
    log: list                    # rows: (iteration, total, l1, lifting, lip, psnr)
    config: TrainingConfig


def _train_views(config: TrainingConfig, n_frames: int):
    if not config.use_holdout:
        return list(range(n_frames)), None
    holdout = config.holdout_view % n_frames
    return [i for i in range(n_frames) if i != holdout], holdout


def train_stage1(config: TrainingConfig, bundle: SceneBundle,
                 resume_path=None, progress=None) -> TrainResult:
    """Optimize reconstruction + decoder on ground-truth frames.

    Feature dimensions come from the bundle; the config echo stored in
    checkpoints records the adopted values.
    """
    config = replace(config, stage=1,
                     local_channels=bundle.f_local.shape[2],
                     global_channels=int(np.asarray(bundle.f_global).size))
    n_completion = bundle.priors[0].completion_indices.size
    rng = np.random.default_rng(config.seed)
    model = HeadModel(config, n_completion, rng)
    opt = Adam(model.parameters(), lr=config.lr)
    start = 0
    if resume_path is not None:
        stage, start, ckpt_cfg, tensors = load_training_checkpoint(resume_path)
        if stage != 1:
            raise ValueError(f"cannot resume stage 1 from a stage-{stage} checkpoint")
        _load_named(model.named_tensors(), tensors)
        opt.load_state_tensors(tensors)

    views, holdout = _train_views(config, bundle.n_frames)
    f_local = Tensor(model.fit_local(bundle.f_local))
    f_global = Tensor(bundle.f_global)
    weights = config.weights()
    log = []
    for it in range(start, config.iterations):
        fi = views[it % len(views)]
        prior = bundle.priors[fi]
        rgb, vis_mu = model.render_frame(f_local, f_global, prior,
                                         bundle.cameras[fi])
        target = Tensor(bundle.frames[fi])
        l1 = (rgb - target).abs().mean()
        lift = lifting_loss(prior.vertices, vis_mu)
        loss = l1 + weights.lifting * lift
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (it + 1) % config.eval_every == 0 or it + 1 == config.iterations:
            eval_psnr = None
            if holdout is not None:
                eval_psnr = evaluate_view(model, bundle, holdout)[0]
            log.append((it + 1, loss.item(), l1.item(), lift.item(), 0.0,
                        eval_psnr))
            if progress is not None:
                progress(log[-1])
    return TrainResult(model=model, motion=None, optimizer=opt,
                       iteration=config.iterations, log=log, config=config)


def evaluate_view(model: HeadModel, bundle: SceneBundle, view: int):
    """(PSNR, SSIM) of the reconstructed render against one ground-truth view."""
    cloud = model.reconstruct_cloud(bundle.f_local, bundle.f_global,
                                    bundle.priors[view])
    rgb = model.render_cloud_rgb(cloud, bundle.cameras[view])
    return psnr(rgb, bundle.frames[view]), ssim(rgb, bundle.frames[view])


def _deformed_tensors(static: GaussianCloud, f_a: np.ndarray,
                      motion: MotionModel):
    """Differentiable deformation of a static cloud (visible block first)."""
    from .autodiff import concat
    vis_mask = static.branch_tag == VISIBLE
    n_vis = int(vis_mask.sum())
    if not np.all(vis_mask[:n_vis]):
        raise ValueError("cloud must be ordered visible-then-occluded")
    parts = []
    d_vis = motion_field_forward_tensor(static.mu[:n_vis], f_a, motion.coarse)
    parts.append((static.mu[:n_vis], static.scale_log[:n_vis],
                  static.rot[:n_vis], static.opacity_logit[:n_vis], d_vis))
    if n_vis < len(static):
        occ_field = motion.coarse if motion.fine is None else motion.fine
        d_occ = motion_field_forward_tensor(static.mu[n_vis:], f_a, occ_field)
        parts.append((static.mu[n_vis:], static.scale_log[n_vis:],
                      static.rot[n_vis:], static.opacity_logit[n_vis:], d_occ))

    mu = concat([Tensor(p[0]) + p[4][:, 0:3] for p in parts], axis=0)
    slog = concat([Tensor(p[1]) + p[4][:, 3:6] for p in parts], axis=0)
    rot = concat([Tensor(p[2]) + p[4][:, 6:10] for p in parts], axis=0)
    opa = concat([Tensor(p[3]) + p[4][:, 10] for p in parts], axis=0)
    feat = Tensor(static.feat)
    return mu, slog, rot, opa, feat, n_vis


def train_stage2(config: TrainingConfig, bundle: SceneBundle,
                 stage1_path, resume_path=None, progress=None) -> TrainResult:
    """Optimize the motion fields on a talking bundle; Stage-1 weights frozen."""
    if bundle.audio is None:
        raise ValueError("stage 2 requires a bundle with an audio track")
    stage, _, s1_config, tensors = load_training_checkpoint(stage1_path)
    if stage != 1:
        raise ValueError(f"stage 2 must start from a stage-1 checkpoint, got stage {stage}")
    # head architecture comes from the stage-1 checkpoint; training
    # hyperparameters and motion-field shape come from the caller
    config = replace(config, stage=2,
                     plane_resolution=s1_config.plane_resolution,
                     feat_dim=s1_config.feat_dim,
                     local_channels=s1_config.local_channels,
                     global_channels=s1_config.global_channels,
                     conv_hidden=s1_config.conv_hidden,
                     mlp_hidden=s1_config.mlp_hidden,
                     half_depth=s1_config.half_depth,
                     no_completion_branch=s1_config.no_completion_branch,
                     audio_dim=bundle.audio.frames.shape[1])
    n_completion = tensors["recon/vertex_weights"].shape[0]
    model = HeadModel(config, n_completion, np.random.default_rng(config.seed))
    _load_named(model.named_tensors(), tensors)
    for t in model.parameters():
        t.requires_grad = False
    frozen_before = fingerprint(model.named_tensors())

    motion = MotionModel(config, np.random.default_rng(config.seed + 1))
    opt = Adam(motion.parameters(), lr=config.lr)
    start = 0
    if resume_path is not None:
        rstage, start, _, rtensors = load_training_checkpoint(resume_path)
        if rstage != 2:
            raise ValueError("stage-2 resume needs a stage-2 checkpoint")
        _load_named(motion.named_tensors(), rtensors)
        _load_named(model.named_tensors(), rtensors)
        opt.load_state_tensors(rtensors)

    # reconstruction runs once, anchored to the source-frame prior
    source_prior = bundle.priors[bundle.source_index]
    static = model.reconstruct_cloud(bundle.f_local, bundle.f_global,
                                     source_prior)
    weights = config.weights()
    raster_cfg = config.raster()
    z = config.feat_dim
    log = []
    for it in range(start, config.iterations):
        t = it % bundle.n_frames
        prior_t = bundle.priors[t]
        cam = bundle.cameras[t]
        mu, slog, rot, opa, feat, n_vis = _deformed_tensors(
            static, bundle.audio.frames[t], motion)
        raster = rasterize(mu, slog, rot, opa, feat, cam, raster_cfg,
                           static.branch_tag)
        rgb = model._composite_rgb(raster[:, :, :z], raster[:, :, z:z + 1])
        target = Tensor(bundle.frames[t])
        mask = lip_mask_from_landmarks(prior_t.lip_vertices, cam)
        l1 = (rgb - target).abs().mean()
        lift = lifting_loss(prior_t.vertices, mu[0:n_vis])
        lip = lip_loss(rgb, target, mask)
        loss = l1 + weights.lifting * lift + weights.lip * lip
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (it + 1) % config.eval_every == 0 or it + 1 == config.iterations:
            log.append((it + 1, loss.item(), l1.item(), lift.item(),
                        lip.item(), None))
            if progress is not None:
                progress(log[-1])

    if fingerprint(model.named_tensors()) != frozen_before:
        raise AssertionError("frozen stage-1 parameters changed during stage 2")
    return TrainResult(model=model, motion=motion, optimizer=opt,
                       iteration=config.iterations, log=log, config=config)


def animate(model: HeadModel, motion: MotionModel, bundle: SceneBundle,
            track: AudioFeatureTrack, cam: CameraPose):
    """Render one RGB frame per audio frame; reconstruction runs once."""
    static = model.reconstruct_cloud(bundle.f_local, bundle.f_global,
                                     bundle.priors[bundle.source_index])
    frames = []
    for t in range(len(track)):
        deformed = dual_branch_animate(static, track.frames[t],
                                       motion.coarse, motion.fine)
        frames.append(model.render_cloud_rgb(deformed, cam))
    return frames


def lip_sync_stats(model: HeadModel, motion: MotionModel, bundle: SceneBundle):
    """(pearson_r, mean_lmd_px) of rendered lip anchors vs ground truth.

    Each designated lip landmark is tracked through its nearest primitive
    in the static cloud (for lip landmarks that is the completion primitive
    instantiated at that prior vertex); apertures are measured from the
    tracked projections.
    """
    static = model.reconstruct_cloud(bundle.f_local, bundle.f_global,
                                     bundle.priors[bundle.source_index])
    src_prior = bundle.priors[bundle.source_index]
    anchors = src_prior.lip_vertices
    d2 = ((anchors[:, None, :] - static.mu[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)

    apertures, lmds = [], []
    for t in range(bundle.n_frames):
        cam = bundle.cameras[t]
        deformed = dual_branch_animate(static, bundle.audio.frames[t],
                                       motion.coarse, motion.fine)
        pts = deformed.mu[nearest]
        tc = cam.world_to_cam(pts)
        proj = np.stack([cam.fx * tc[:, 0] / tc[:, 2] + cam.cx,
                         cam.fy * tc[:, 1] / tc[:, 2] + cam.cy], axis=1)
        apertures.append(lip_aperture_px(proj))
        gt = lip_anchor_projections(bundle.priors[t], cam)
        lmds.append(float(np.linalg.norm(proj - gt, axis=1).mean()))
    apertures = np.array(apertures)
    curve = bundle.driving_curve
    if np.std(apertures) == 0 or np.std(curve) == 0:
        r = 0.0
    else:
        r = float(np.corrcoef(apertures, curve)[0, 1])
    return r, float(np.mean(lmds))


def mouth_region_l1(model: HeadModel, motion: MotionModel,
                    bundle: SceneBundle) -> float:
    """Mean L1 over lip-mask pixels across all frames of a talking bundle."""
    static = model.reconstruct_cloud(bundle.f_local, bundle.f_global,
                                     bundle.priors[bundle.source_index])
    total, count = 0.0, 0
    for t in range(bundle.n_frames):
        cam = bundle.cameras[t]
        deformed = dual_branch_animate(static, bundle.audio.frames[t],
                                       motion.coarse, motion.fine)
        rgb = model.render_cloud_rgb(deformed, cam)
        mask = lip_mask_from_landmarks(bundle.priors[t].lip_vertices, cam)
        if mask.sum() == 0:
            continue
        total += float(np.abs(rgb - bundle.frames[t])[mask].sum())
        count += int(mask.sum()) * 3
    return total / max(count, 1)
