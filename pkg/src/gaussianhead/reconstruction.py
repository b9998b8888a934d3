"""One-shot Gaussian-head reconstruction from image features.

Two branches build the head: the visible branch lifts a planar grid of
points along +/- the plane normal using two conv heads (two sheets of
Gaussians, 2*P*P total), and the completion branch anchors Gaussians at
mouth/eye vertices of a prior head mesh, regressing their non-positional
parameters from a global feature. Feature extraction itself is a synthetic
stand-in: a pretrained image backbone is out of scope here, so local maps
are downsampled color + gradient channels and the global vector is built
from channel moments.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat
from .core import GaussianCloud, merge_clouds, OCCLUDED, VISIBLE
from .nn import ConvStack, MLP

REGION_OTHER = "other"
REGION_MOUTH = "mouth"
REGION_EYE = "eye"
REGIONS = (REGION_OTHER, REGION_MOUTH, REGION_EYE)


@dataclass
class PriorMesh:
    """Labeled head-mesh prior: vertices, regions, landmarks, learnable weights."""

    vertices: np.ndarray          # (V, 3)
    regions: list                 # V region labels from REGIONS
    landmarks: np.ndarray         # ordered indices into vertices
    lip_indices: np.ndarray       # ordered subset of landmark vertices (lips)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.landmarks = np.asarray(self.landmarks, dtype=np.int64).ravel()
        self.lip_indices = np.asarray(self.lip_indices, dtype=np.int64).ravel()
        v = self.vertices.shape[0]
        if len(self.regions) != v:
            raise ValueError("one region label per vertex required")
        bad = set(self.regions) - set(REGIONS)
        if bad:
            raise ValueError(f"unknown region labels: {bad}")
        for idx in (self.landmarks, self.lip_indices):
            if idx.size and (idx.min() < 0 or idx.max() >= v):
                raise ValueError("landmark index out of range")

    @property
    def completion_indices(self) -> np.ndarray:
        """Indices of mouth and eye vertices, in vertex order."""
        return np.array([i for i, r in enumerate(self.regions)
                         if r in (REGION_MOUTH, REGION_EYE)], dtype=np.int64)

    @property
    def lip_vertices(self) -> np.ndarray:
        return self.vertices[self.lip_indices]


@dataclass
class FeaturePlane:
    """Regular P x P grid of lifting anchors with a shared unit normal."""

    points: np.ndarray   # (P*P, 3)
    normal: np.ndarray   # (3,), unit length
    resolution: int
    half_depth: float    # tanh offset scale, half the head depth

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.normal)
        if abs(n - 1.0) > 1e-9:
            self.normal = self.normal / n


def init_feature_plane(resolution: int, center=(0.0, 0.0, 0.35),
                       extent=(0.85, 1.0), normal=(0.0, 0.0, 1.0),
                       half_depth: float = 0.8) -> FeaturePlane:
    """Regular grid on the head-box front plane.

    ``extent`` gives the half-width along the plane's two in-plane axes;
    the grid spans [-extent, extent] around ``center``.
    """
    if resolution < 8:
        raise ValueError("plane resolution must be >= 8")
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    # in-plane basis orthogonal to the normal
    ref = np.array([0.0, 1.0, 0.0]) if abs(normal[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(ref, normal)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    xs = np.linspace(-extent[0], extent[0], resolution)
    ys = np.linspace(-extent[1], extent[1], resolution)
    gu, gv = np.meshgrid(xs, ys)
    pts = (np.asarray(center, dtype=np.float64)
           + gu.reshape(-1, 1) * u + gv.reshape(-1, 1) * v)
    return FeaturePlane(points=pts, normal=normal, resolution=resolution,
                        half_depth=half_depth)


# visible-branch per-pixel channels: offset, scale_log(3), rot(4), opacity(1), feat(Z)
VIS_HEAD_CHANNELS = 9
# completion-branch outputs: scale_log(3), rot(4), opacity(1), feat(Z)
OCC_HEAD_CHANNELS = 8


@dataclass
class ReconConfig:
    plane_resolution: int = 64
    feat_dim: int = 8           # Z
    local_channels: int = 64    # C_l
    global_channels: int = 64   # C_g
    conv_hidden: tuple = (48, 48)
    mlp_hidden: tuple = (128, 128)
    init_scale_log: float = np.log(0.03)
    init_opacity_logit: float = 1.0
    occ_init_scale_log: float = np.log(0.03)
    # predicted log-scales are init + span*tanh(raw): an unbounded raw
    # scale head can overflow exp() in the projector once training pushes
    # a splat to grow, which poisons every gradient with NaNs
    scale_span: float = 4.0


class ReconParams:
    """All trainable reconstruction parameters (Stage 1)."""

    def __init__(self, config: ReconConfig, n_completion: int,
                 rng: np.random.Generator):
        self.config = config
        z = config.feat_dim
        channels = [config.local_channels, *config.conv_hidden, VIS_HEAD_CHANNELS + z]
        self.conv0 = ConvStack(channels, rng=rng)
        self.conv1 = ConvStack(channels, rng=rng)
        dims = [1 + config.global_channels, *config.mlp_hidden, OCC_HEAD_CHANNELS + z]
        self.completion_mlp = MLP(dims, rng=rng)
        self.vertex_weights = Tensor(rng.normal(0.0, 0.1, (n_completion, 1)),
                                     requires_grad=True)
        self.plane_offset = Tensor(np.zeros(3), requires_grad=True)
        for net in (self.conv0, self.conv1):
            self._init_vis_head(net, z)
        self._init_occ_head(z)

    def _init_vis_head(self, net: ConvStack, z: int):
        # zero final weights + structured bias: flat sheets of small gray
        # blobs with identity rotations at initialization
        last = net.layers[-1]
        last.weight.data[...] = 0.0
        bias = np.zeros(VIS_HEAD_CHANNELS + z)
        bias[4] = 1.0  # quaternion w
        bias[8] = self.config.init_opacity_logit
        last.bias.data[...] = bias

    def _init_occ_head(self, z: int):
        last = self.completion_mlp.layers[-1]
        last.weight.data[...] = 0.0
        bias = np.zeros(OCC_HEAD_CHANNELS + z)
        bias[3] = 1.0
        bias[7] = self.config.init_opacity_logit
        last.bias.data[...] = bias

    def parameters(self):
        return (self.conv0.parameters() + self.conv1.parameters()
                + self.completion_mlp.parameters()
                + [self.vertex_weights, self.plane_offset])


def _split_vis_head(out: Tensor, p2: int, z: int):
    """Split a (P, P, 9+Z) conv output into per-primitive parameter tensors."""
    flat = out.reshape(p2, VIS_HEAD_CHANNELS + z)
    return (flat[:, 0:1], flat[:, 1:4], flat[:, 4:8], flat[:, 8],
            flat[:, 9:9 + z])


def visible_branch_tensors(f_local: Tensor, plane: FeaturePlane,
                           params: ReconParams):
    """Differentiable visible branch: returns per-primitive parameter tensors.

    Output order: all 2*P*P primitives, head-0 sheet (+normal) first.
    """
    p = plane.resolution
    if f_local.data.shape[:2] != (p, p):
        raise ValueError(f"local feature map must be {p}x{p}, "
                         f"got {f_local.data.shape[:2]}")
    z = params.config.feat_dim
    p2 = p * p
    anchors = Tensor(plane.points) + params.plane_offset
    normal = Tensor(plane.normal.reshape(1, 3))
    outputs = []
    for head, sign in ((params.conv0, 1.0), (params.conv1, -1.0)):
        raw = head(f_local)
        off, slog_raw, rot, opa, feat = _split_vis_head(raw, p2, z)
        offset = off.tanh() * plane.half_depth
        cfg = params.config
        slog = slog_raw.tanh() * cfg.scale_span + Tensor(
            np.full((1, 1), cfg.init_scale_log))
        mu = anchors + (sign * offset) * normal
        outputs.append((mu, slog, rot, opa, feat))
    mu = concat([o[0] for o in outputs], axis=0)
    slog = concat([o[1] for o in outputs], axis=0)
    rot = concat([o[2] for o in outputs], axis=0)
    opa = concat([o[3] for o in outputs], axis=0)
    feat = concat([o[4] for o in outputs], axis=0)
    return mu, slog, rot, opa, feat


def completion_branch_tensors(f_global: Tensor, prior: PriorMesh,
                              params: ReconParams):
    """Differentiable completion branch on the mouth/eye vertex set."""
    sel = prior.completion_indices
    if sel.size == 0:
        raise ValueError("prior mesh has no mouth/eye vertices to complete")
    if params.vertex_weights.data.shape[0] != sel.size:
        raise ValueError(f"vertex weight count {params.vertex_weights.data.shape[0]} "
                         f"does not match completion set {sel.size}")
    cg = params.config.global_channels
    if f_global.data.shape != (cg,):
        raise ValueError(f"global feature must have shape ({cg},)")
    z = params.config.feat_dim
    g = Tensor(np.broadcast_to(f_global.data, (sel.size, cg)).copy()) \
        if not f_global.requires_grad else None
    if g is None:
        g = f_global.reshape(1, cg) * Tensor(np.ones((sel.size, 1)))
    x = concat([params.vertex_weights, g], axis=1)
    out = params.completion_mlp(x)
    slog = out[:, 0:3].tanh() * params.config.scale_span + Tensor(
        np.full((1, 1), params.config.occ_init_scale_log))
    rot = out[:, 3:7]
    opa = out[:, 7]
    feat = out[:, 8:8 + z]
    mu = Tensor(prior.vertices[sel])  # positions fixed to the prior mesh
    return mu, slog, rot, opa, feat


def _cloud_from_tensors(tensors, tag: int) -> GaussianCloud:
    mu, slog, rot, opa, feat = tensors
    n = mu.data.shape[0]
    return GaussianCloud(mu.data.copy(), slog.data.copy(), rot.data.copy(),
                         opa.data.copy(), feat.data.copy(),
                         np.full(n, tag, dtype=np.uint8))


def visible_branch(f_local: np.ndarray, plane: FeaturePlane,
                   params: ReconParams) -> GaussianCloud:
    return _cloud_from_tensors(
        visible_branch_tensors(Tensor(f_local), plane, params), VISIBLE)


def completion_branch(f_global: np.ndarray, prior: PriorMesh,
                      params: ReconParams) -> GaussianCloud:
    return _cloud_from_tensors(
        completion_branch_tensors(Tensor(f_global), prior, params), OCCLUDED)


def reconstruct(f_local: np.ndarray, f_global: np.ndarray, plane: FeaturePlane,
                prior: PriorMesh, params: ReconParams) -> GaussianCloud:
    """Full head: visible sheets merged with the completion set."""
    return merge_clouds(visible_branch(f_local, plane, params),
                        completion_branch(f_global, prior, params))


def reconstruct_tensors(f_local: Tensor, f_global: Tensor, plane: FeaturePlane,
                        prior: PriorMesh, params: ReconParams):
    """Differentiable merge: concatenated parameter tensors plus branch tags."""
    vis = visible_branch_tensors(f_local, plane, params)
    occ = completion_branch_tensors(f_global, prior, params)
    n_vis = vis[0].data.shape[0]
    n_occ = occ[0].data.shape[0]
    tags = np.concatenate([np.full(n_vis, VISIBLE, dtype=np.uint8),
                           np.full(n_occ, OCCLUDED, dtype=np.uint8)])
    merged = tuple(concat([v, o], axis=0) for v, o in zip(vis, occ))
    return merged, tags


# ------------------------------------------------- synthetic feature extraction

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of an (H, W, C) array using pixel-center alignment."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    a = img[y0][:, x0]
    b = img[y0][:, x1]
    c = img[y1][:, x0]
    d = img[y1][:, x1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def extract_local_features(image: np.ndarray, resolution: int,
                           channels: int = 64) -> np.ndarray:
    """Synthetic local feature map: downsampled RGB plus gradient channels,
    tiled to the requested channel count."""
    small = bilinear_resize(image, resolution, resolution)
    gy = np.gradient(small, axis=0)
    gx = np.gradient(small, axis=1)
    base = np.concatenate([small, gx, gy], axis=2)  # 9 channels
    reps = int(np.ceil(channels / base.shape[2]))
    return np.tile(base, (1, 1, reps))[:, :, :channels].copy()


def extract_global_features(image: np.ndarray, channels: int = 64) -> np.ndarray:
    """Synthetic global feature: channel-wise moments of the image and a
    coarse 4x4 intensity grid, tiled to the requested length."""
    img = np.asarray(image, dtype=np.float64)
    moments = []
    for ch in range(img.shape[2]):
        c = img[..., ch]
        moments += [c.mean(), c.std(), np.abs(np.gradient(c, axis=0)).mean(),
                    np.abs(np.gradient(c, axis=1)).mean()]
    coarse = bilinear_resize(img.mean(axis=2, keepdims=True), 4, 4).ravel()
    base = np.concatenate([np.asarray(moments), coarse])
    reps = int(np.ceil(channels / base.size))
    return np.tile(base, reps)[:channels].copy()
