"""Audio-conditioned dual-branch motion fields.

Each branch owns a tri-plane hash encoder and a small MLP that maps
(encoded position ++ audio feature) to per-primitive deltas for position,
log-scale, rotation, and opacity logit. Deltas are added in unconstrained
parameter space; features are never deformed. The final MLP layer is
zero-initialized so a fresh field is exactly the identity.

The coarse field drives visible-tagged primitives, the fine field the
occluded ones. Conditioning is per frame: frame t depends only on the
static cloud and the audio vector at t.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat
from .core import GaussianCloud, CameraPose, OCCLUDED, VISIBLE
from .encoding import HashGridConfig, encode, make_tables
from .nn import MLP, zero_init_last_layer

COARSE = "coarse"
FINE = "fine"

# delta layout: d_mu(3) + d_scale_log(3) + d_rot(4) + d_opacity_logit(1)
DELTA_DIM = 11

# Fixed output gains per delta component: position deltas at full gain,
# appearance deltas (scale/rotation/opacity) strongly attenuated. A moving
# region can be explained either by translating primitives or by
# crossfading their appearance in place; attenuating the appearance
# channels makes translation the cheaper solution, so the learned motion
# is geometric and tracked landmarks follow the actual surface.
APPEARANCE_GAIN = 0.05
DELTA_GAINS = np.concatenate([np.ones(3), np.full(8, APPEARANCE_GAIN)])


@dataclass
class AudioFeatureTrack:
    """Per-frame audio conditioning vectors."""

    frames: np.ndarray    # (N_t, D_a)
    frame_rate: float     # Hz

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be (N_t, D_a)")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class DeformationDelta:
    d_mu: np.ndarray             # (N, 3)
    d_scale_log: np.ndarray      # (N, 3)
    d_rot: np.ndarray            # (N, 4)
    d_opacity_logit: np.ndarray  # (N,)

    @property
    def count(self) -> int:
        return self.d_mu.shape[0]


class MotionFieldParams:
    """One motion field: hash tables + deformation MLP, identity at init."""

    def __init__(self, branch: str, audio_dim: int,
                 grid: HashGridConfig | None = None,
                 hidden=(64, 64), rng: np.random.Generator | None = None):
        if branch not in (COARSE, FINE):
            raise ValueError(f"branch must be '{COARSE}' or '{FINE}'")
        rng = rng or np.random.default_rng(0)
        self.branch = branch
        self.grid = grid or HashGridConfig()
        self.audio_dim = audio_dim
        self.tables = make_tables(self.grid, rng)
        self.mlp = MLP([self.grid.out_dim + audio_dim, *hidden, DELTA_DIM], rng=rng)
        zero_init_last_layer(self.mlp)

    def parameters(self):
        return [self.tables] + self.mlp.parameters()


def motion_field_forward_tensor(positions: np.ndarray, f_a: np.ndarray,
                                params: MotionFieldParams) -> Tensor:
    """Differentiable field evaluation: (N, 11) delta tensor."""
    f_a = np.asarray(f_a, dtype=np.float64).ravel()
    if f_a.size != params.audio_dim:
        raise ValueError(f"audio dim {f_a.size} != field dim {params.audio_dim}")
    n = np.asarray(positions).reshape(-1, 3).shape[0]
    enc = encode(positions, params.tables, params.grid)
    audio = Tensor(np.broadcast_to(f_a, (n, f_a.size)).copy())
    return params.mlp(concat([enc, audio], axis=1)) * Tensor(
        DELTA_GAINS.reshape(1, DELTA_DIM))


def motion_field_forward(positions: np.ndarray, f_a: np.ndarray,
                         params: MotionFieldParams) -> DeformationDelta:
    out = motion_field_forward_tensor(positions, f_a, params).data
    return split_delta(out)


def split_delta(out: np.ndarray) -> DeformationDelta:
    return DeformationDelta(d_mu=out[:, 0:3].copy(),
                            d_scale_log=out[:, 3:6].copy(),
                            d_rot=out[:, 6:10].copy(),
                            d_opacity_logit=out[:, 10].copy())


def apply_deformation(cloud: GaussianCloud, delta: DeformationDelta) -> GaussianCloud:
    """Additive update in unconstrained space; features stay untouched."""
    if delta.count != len(cloud):
        raise ValueError(f"delta count {delta.count} != cloud size {len(cloud)}")
    return GaussianCloud(
        mu=cloud.mu + delta.d_mu,
        scale_log=cloud.scale_log + delta.d_scale_log,
        rot=cloud.rot + delta.d_rot,
        opacity_logit=cloud.opacity_logit + delta.d_opacity_logit,
        feat=cloud.feat.copy(),
        branch_tag=cloud.branch_tag.copy(),
    )


def dual_branch_delta(cloud: GaussianCloud, f_a: np.ndarray,
                      coarse: MotionFieldParams,
                      fine: MotionFieldParams | None) -> DeformationDelta:
    """Coarse field on visible primitives, fine field on occluded ones.

    With ``fine=None`` (the no-fine-field ablation) the coarse field drives
    every primitive.
    """
    n = len(cloud)
    out = np.zeros((n, DELTA_DIM))
    vis = cloud.branch_tag == VISIBLE
    occ = ~vis
    if fine is None:
        out[:] = motion_field_forward_tensor(cloud.mu, f_a, coarse).data
    else:
        if np.any(vis):
            out[vis] = motion_field_forward_tensor(cloud.mu[vis], f_a, coarse).data
        if np.any(occ):
            out[occ] = motion_field_forward_tensor(cloud.mu[occ], f_a, fine).data
    return split_delta(out)


def dual_branch_animate(cloud: GaussianCloud, f_a: np.ndarray,
                        coarse: MotionFieldParams,
                        fine: MotionFieldParams | None) -> GaussianCloud:
    """Deform a tagged cloud for one audio frame; ordering is preserved."""
    return apply_deformation(cloud, dual_branch_delta(cloud, f_a, coarse, fine))


def animate_sequence(cloud: GaussianCloud, track: AudioFeatureTrack,
                     coarse: MotionFieldParams, fine: MotionFieldParams | None,
                     cam: CameraPose, render_fn):
    """Deform-then-render every frame of a track with a prebuilt static cloud.

    ``render_fn(cloud, cam)`` produces one frame; reconstruction is not
    re-run here, the static cloud is reused for every frame.
    """
    if len(track) == 0:
        raise ValueError("empty audio track")
    frames = []
    for t in range(len(track)):
        deformed = dual_branch_animate(cloud, track.frames[t], coarse, fine)
        frames.append(render_fn(deformed, cam))
    return frames


def synthetic_audio_embedding(curve: np.ndarray, dim: int,
                              seed: int = 1234) -> np.ndarray:
    """Map a scalar driving curve to D_a-dim vectors via a fixed random affine map.

    Stand-in for a pretrained speech feature extractor; the same seed always
    yields the same embedding so tracks are reproducible.
    """
    curve = np.asarray(curve, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    gain = rng.normal(0.0, 1.0, dim)
    offset = rng.normal(0.0, 0.3, dim)
    return curve[:, None] * gain[None, :] + offset[None, :]
