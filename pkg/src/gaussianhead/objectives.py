"""Training losses for both stages and image-quality metrics.

The perceptual term is a pluggable hook (default: constant zero) since it
would need a pretrained network; the loss structure keeps the slot so a
real perceptual loss can be substituted without touching the stages.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatchError, Tensor, custom_op, l1_loss
from .core import CameraPose, GaussianCloud


@dataclass
class LossWeights:
    perceptual: float = 0.0   # lambda_l
    lifting: float = 0.1      # lambda_f
    lip: float = 1.0          # lambda_p

    def __post_init__(self):
        if min(self.perceptual, self.lifting, self.lip) < 0:
            raise ValueError("loss weights must be nonnegative")


def zero_perceptual_hook(rendered: Tensor, target: Tensor) -> Tensor:
    return Tensor(0.0)


def lifting_loss(prior_vertices: np.ndarray, vis_mu: Tensor) -> Tensor:
    """Mean distance from each prior vertex to its nearest visible Gaussian mean.

    The argmin is held fixed within a step; gradients flow to the selected
    means only. Ties pick the lowest primitive index.
    """
    verts = np.asarray(prior_vertices, dtype=np.float64).reshape(-1, 3)
    mu = vis_mu.data
    if mu.shape[0] == 0:
        raise ValueError("lifting loss needs a nonempty visible cloud")
    nearest = np.empty(verts.shape[0], dtype=np.int64)
    # argmin on the expanded form |v|^2 - 2 v.m + |m|^2 (one matmul instead
    # of a (V, N, 3) broadcast temp); the distance itself is recomputed
    # exactly for the selected pair so coincident points give exactly 0.0
    m2 = (mu * mu).sum(axis=1)
    chunk = 2048
    for s in range(0, verts.shape[0], chunk):
        block = verts[s:s + chunk]
        d2 = (block * block).sum(axis=1)[:, None] - 2.0 * (block @ mu.T) + m2
        nearest[s:s + chunk] = np.argmin(d2, axis=1)
    dists = np.linalg.norm(mu[nearest] - verts, axis=1)
    out = dists.mean()

    def backward(g):
        d_mu = np.zeros_like(mu)
        diff = mu[nearest] - verts
        safe = dists > 0
        contrib = np.zeros_like(diff)
        contrib[safe] = diff[safe] / dists[safe, None]
        np.add.at(d_mu, nearest, contrib * (float(g) / verts.shape[0]))
        return (d_mu,)

    return custom_op((vis_mu,), np.float64(out), backward)


def lifting_loss_value(prior_vertices: np.ndarray, vis_cloud: GaussianCloud) -> float:
    """Non-differentiable lifting loss on a cloud's visible means."""
    return float(lifting_loss(prior_vertices, Tensor(vis_cloud.mu)).data)


def lip_mask_from_landmarks(lip_vertices: np.ndarray, cam: CameraPose,
                            margin: int = 4) -> np.ndarray:
    """Boolean H x W mask: projected lip-landmark bounding box dilated by margin.

    All landmarks behind the camera gives an empty mask; the caller then
    treats the lip loss as zero.
    """
    pts = np.asarray(lip_vertices, dtype=np.float64).reshape(-1, 3)
    t = cam.world_to_cam(pts)
    front = t[:, 2] > cam.near
    mask = np.zeros((cam.image_h, cam.image_w), dtype=bool)
    if not np.any(front):
        return mask
    u = cam.fx * t[front, 0] / t[front, 2] + cam.cx
    v = cam.fy * t[front, 1] / t[front, 2] + cam.cy
    # inclusive pixel box of the landmarks, dilated by margin on each side
    x0 = max(int(np.floor(u.min())) - margin, 0)
    x1 = min(int(np.floor(u.max())) + margin + 1, cam.image_w)
    y0 = max(int(np.floor(v.min())) - margin, 0)
    y1 = min(int(np.floor(v.max())) + margin + 1, cam.image_h)
    if x1 > x0 and y1 > y0:
        mask[y0:y1, x0:x1] = True
    return mask


def lip_loss(rendered: Tensor, target: Tensor, mask: np.ndarray) -> Tensor:
    """L1 restricted to mask pixels; exactly zero on an empty mask."""
    if rendered.shape != target.shape:
        raise ShapeMismatchError(f"{rendered.shape} vs {target.shape}")
    count = int(mask.sum())
    if count == 0:
        return Tensor(0.0)
    m = mask.astype(np.float64)[..., None] if rendered.data.ndim == 3 else mask.astype(np.float64)
    channels = rendered.data.shape[2] if rendered.data.ndim == 3 else 1
    return ((rendered - target).abs() * Tensor(m)).sum() / (count * channels)


def stage1_loss(rendered: Tensor, target: Tensor, prior_vertices: np.ndarray,
                vis_mu: Tensor, weights: LossWeights,
                perceptual_hook=zero_perceptual_hook) -> Tensor:
    loss = l1_loss(rendered, target)
    if weights.perceptual != 0.0:
        loss = loss + weights.perceptual * perceptual_hook(rendered, target)
    if weights.lifting != 0.0:
        loss = loss + weights.lifting * lifting_loss(prior_vertices, vis_mu)
    return loss


def stage2_loss(rendered: Tensor, target: Tensor, prior_vertices: np.ndarray,
                vis_mu: Tensor, weights: LossWeights, lip_region: np.ndarray,
                perceptual_hook=zero_perceptual_hook) -> Tensor:
    loss = stage1_loss(rendered, target, prior_vertices, vis_mu, weights,
                       perceptual_hook)
    if weights.lip != 0.0:
        loss = loss + weights.lip * lip_loss(rendered, target, lip_region)
    return loss


# --------------------------------------------------------------------- metrics

PSNR_CAP_DB = 100.0


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """PSNR in dB on [0, 1] images, capped at 100 dB for identical inputs."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatchError(f"{rendered.shape} vs {target.shape}")
    mse = float(((rendered - target) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter2d(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' convolution with a 1-D window along both axes."""
    tmp = np.apply_along_axis(lambda r: np.convolve(r, w, mode="valid"), 1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, w, mode="valid"), 0, tmp)


def ssim(rendered: np.ndarray, target: np.ndarray, k1: float = 0.01,
         k2: float = 0.03) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5); channel-averaged."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatchError(f"{rendered.shape} vs {target.shape}")
    if rendered.ndim == 2:
        rendered = rendered[..., None]
        target = target[..., None]
    c1 = k1 ** 2
    c2 = k2 ** 2
    w = _gaussian_window()
    vals = []
    for ch in range(rendered.shape[2]):
        x = rendered[..., ch]
        y = target[..., ch]
        mx = _filter2d(x, w)
        my = _filter2d(y, w)
        sxx = _filter2d(x * x, w) - mx * mx
        syy = _filter2d(y * y, w) - my * my
        sxy = _filter2d(x * y, w) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def lmd_anchor(rendered_anchors_px: np.ndarray, gt_anchors_px: np.ndarray) -> float:
    """Mean Euclidean pixel distance between corresponding 2D anchors."""
    a = np.asarray(rendered_anchors_px, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(gt_anchors_px, dtype=np.float64).reshape(-1, 2)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=1).mean())
