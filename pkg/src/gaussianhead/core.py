"""Gaussian primitives, clouds, cameras, and the covariance/projection math.

Primitive parameters are stored in unconstrained space: log-scales,
opacity logits, and unnormalized quaternions. Constraints (exp, sigmoid,
quaternion normalization) are applied at use sites so additive deformation
deltas stay well-defined.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VISIBLE = 0
OCCLUDED = 1


class DegenerateRotationError(ValueError):
    """Raised for a zero-norm quaternion."""


class SingularCovarianceError(ValueError):
    """Raised when a covariance matrix cannot be inverted."""


@dataclass
class GaussianPrimitive:
    """A single Gaussian: mean, log-scale, quaternion, opacity logit, feature vector."""

    mu: np.ndarray          # (3,) world position
    scale_log: np.ndarray   # (3,) log of per-axis scale
    rot: np.ndarray         # (4,) quaternion (w, x, y, z), unnormalized storage
    opacity_logit: float
    feat: np.ndarray        # (Z,) color/feature embedding

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.scale_log = np.asarray(self.scale_log, dtype=np.float64).reshape(3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(4)
        self.feat = np.asarray(self.feat, dtype=np.float64).ravel()
        self.opacity_logit = float(self.opacity_logit)


@dataclass
class GaussianCloud:
    """Ordered collection of Gaussians stored as stacked arrays.

    ``branch_tag`` holds VISIBLE (0) or OCCLUDED (1) per primitive; ordering
    is stable across save/load.
    """

    mu: np.ndarray             # (N, 3)
    scale_log: np.ndarray      # (N, 3)
    rot: np.ndarray            # (N, 4)
    opacity_logit: np.ndarray  # (N,)
    feat: np.ndarray           # (N, Z)
    branch_tag: np.ndarray     # (N,) uint8

    def __post_init__(self):
        n = self.mu.shape[0]
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64).reshape(n, 3)
        self.scale_log = np.ascontiguousarray(self.scale_log, dtype=np.float64).reshape(n, 3)
        self.rot = np.ascontiguousarray(self.rot, dtype=np.float64).reshape(n, 4)
        self.opacity_logit = np.ascontiguousarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.feat = np.ascontiguousarray(self.feat, dtype=np.float64)
        if self.feat.ndim != 2:
            # reshape(0, -1) is invalid, so empty 1-D input keeps zero width
            self.feat = self.feat.reshape(n, -1) if n else self.feat.reshape(0, 0)
        self.branch_tag = np.ascontiguousarray(self.branch_tag, dtype=np.uint8).reshape(n)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feat.shape[1]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.mu[i], self.scale_log[i], self.rot[i],
                                 float(self.opacity_logit[i]), self.feat[i])

    @classmethod
    def from_primitives(cls, prims, branch_tags=None) -> "GaussianCloud":
        prims = list(prims)
        if branch_tags is None:
            branch_tags = np.zeros(len(prims), dtype=np.uint8)
        return cls(
            mu=np.stack([p.mu for p in prims]) if prims else np.zeros((0, 3)),
            scale_log=np.stack([p.scale_log for p in prims]) if prims else np.zeros((0, 3)),
            rot=np.stack([p.rot for p in prims]) if prims else np.zeros((0, 4)),
            opacity_logit=np.array([p.opacity_logit for p in prims]),
            feat=np.stack([p.feat for p in prims]) if prims else np.zeros((0, 1)),
            branch_tag=np.asarray(branch_tags, dtype=np.uint8),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.mu.copy(), self.scale_log.copy(), self.rot.copy(),
                             self.opacity_logit.copy(), self.feat.copy(), self.branch_tag.copy())

    def subset(self, mask) -> "GaussianCloud":
        return GaussianCloud(self.mu[mask], self.scale_log[mask], self.rot[mask],
                             self.opacity_logit[mask], self.feat[mask], self.branch_tag[mask])


@dataclass
class CameraPose:
    """Pinhole camera: world-to-camera rigid transform plus intrinsics.

    Camera space looks down +z; a point is visible when its camera-space z
    exceeds ``near``.
    """

    rotation: np.ndarray     # (3, 3) world-to-camera rotation
    translation: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: int
    image_h: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if self.near <= 0 or self.far <= self.near:
            raise ValueError("require 0 < near < far")

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, image_w, image_h,
                near=0.05, far=100.0) -> "CameraPose":
        """Build a pose with the camera at ``eye`` looking toward ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])  # rows: camera axes in world coords
        return cls(rotation=rot, translation=-rot @ eye, fx=fx, fy=fy, cx=cx, cy=cy,
                   image_w=image_w, image_h=image_h, near=near, far=far)


def quat_to_rotmat(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion, normalized first."""
    rot = np.asarray(rot, dtype=np.float64).reshape(4)
    n = np.linalg.norm(rot)
    if n == 0.0:
        raise DegenerateRotationError("zero-norm quaternion has no rotation")
    w, x, y, z = rot / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotmats(rots: np.ndarray) -> np.ndarray:
    """Vectorized quat_to_rotmat for an (N, 4) array."""
    rots = np.asarray(rots, dtype=np.float64)
    n = np.linalg.norm(rots, axis=1)
    if np.any(n == 0.0):
        raise DegenerateRotationError("zero-norm quaternion has no rotation")
    q = rots / n[:, None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((rots.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(scale_log: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """3x3 SPD covariance R diag(exp(scale_log))^2 R^T."""
    R = quat_to_rotmat(rot)
    s2 = np.exp(2.0 * np.asarray(scale_log, dtype=np.float64).reshape(3))
    return (R * s2) @ R.T


def build_covariances(scale_log: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Vectorized build_covariance: (N, 3) log-scales, (N, 4) quats -> (N, 3, 3)."""
    R = quats_to_rotmats(rot)
    s2 = np.exp(2.0 * np.asarray(scale_log, dtype=np.float64))
    return (R * s2[:, None, :]) @ np.swapaxes(R, 1, 2)


def evaluate_gaussian(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """Unnormalized density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))."""
    d = np.asarray(x, dtype=np.float64).reshape(3) - np.asarray(mu, dtype=np.float64).reshape(3)
    try:
        sol = np.linalg.solve(np.asarray(sigma, dtype=np.float64), d)
    except np.linalg.LinAlgError as e:
        raise SingularCovarianceError(str(e)) from e
    return float(np.exp(-0.5 * d @ sol))


# Screen-space low-pass floor added to projected covariances, in px^2.
DEFAULT_LOWPASS = 0.3


@dataclass
class ProjectedGaussians:
    """Screen-space projection of a cloud; ``valid`` marks non-culled primitives."""

    mean2d: np.ndarray   # (N, 2) px
    cov2d: np.ndarray    # (N, 2, 2) px^2, low-pass floor included
    depth: np.ndarray    # (N,) camera-space z
    valid: np.ndarray    # (N,) bool
    # intermediates retained for the rasterizer backward pass
    t_cam: np.ndarray = field(default=None, repr=False)    # (N, 3)
    J: np.ndarray = field(default=None, repr=False)        # (N, 2, 3)
    sigma3: np.ndarray = field(default=None, repr=False)   # (N, 3, 3)


def project_gaussians(mu, scale_log, rot, cam: CameraPose,
                      lowpass: float = DEFAULT_LOWPASS) -> ProjectedGaussians:
    """EWA projection of all primitives: perspective mean + first-order covariance.

    cov2d = J W Sigma W^T J^T + lowpass * I, with J the perspective Jacobian
    at the mean and W the camera rotation. Primitives with camera-space
    z <= near are marked invalid (culled), their outputs left as zeros.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    n = mu.shape[0]
    W = cam.rotation
    t = mu @ W.T + cam.translation
    valid = t[:, 2] > cam.near

    mean2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 2, 2))
    J = np.zeros((n, 2, 3))
    sigma3 = build_covariances(scale_log, rot)

    tz = np.where(valid, t[:, 2], 1.0)  # placeholder z for culled rows
    mean2d[:, 0] = cam.fx * t[:, 0] / tz + cam.cx
    mean2d[:, 1] = cam.fy * t[:, 1] / tz + cam.cy
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * t[:, 0] / tz**2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * t[:, 1] / tz**2
    M = J @ W
    cov2d = M @ sigma3 @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += lowpass
    cov2d[:, 1, 1] += lowpass

    mean2d[~valid] = 0.0
    cov2d[~valid] = 0.0
    return ProjectedGaussians(mean2d=mean2d, cov2d=cov2d, depth=t[:, 2].copy(),
                              valid=valid, t_cam=t, J=J, sigma3=sigma3)


def project_gaussian(prim: GaussianPrimitive, cam: CameraPose,
                     lowpass: float = DEFAULT_LOWPASS):
    """Single-primitive projection. Returns (mean2d, cov2d, depth) or None if culled."""
    proj = project_gaussians(prim.mu[None], prim.scale_log[None], prim.rot[None],
                             cam, lowpass=lowpass)
    if not proj.valid[0]:
        return None
    return proj.mean2d[0], proj.cov2d[0], float(proj.depth[0])


def merge_clouds(vis: GaussianCloud, occ: GaussianCloud) -> GaussianCloud:
    """Concatenate visible and occluded clouds, preserving order and tags."""
    if len(vis) and len(occ) and vis.feat_dim != occ.feat_dim:
        raise ValueError(f"feature dim mismatch: {vis.feat_dim} vs {occ.feat_dim}")
    if len(occ) == 0:
        return vis.copy()
    if len(vis) == 0:
        return occ.copy()
    return GaussianCloud(
        mu=np.concatenate([vis.mu, occ.mu]),
        scale_log=np.concatenate([vis.scale_log, occ.scale_log]),
        rot=np.concatenate([vis.rot, occ.rot]),
        opacity_logit=np.concatenate([vis.opacity_logit, occ.opacity_logit]),
        feat=np.concatenate([vis.feat, occ.feat]),
        branch_tag=np.concatenate([vis.branch_tag, occ.branch_tag]),
    )
