"""Tile-based CPU splatting of Gaussian clouds with an analytic backward pass.

Forward: cull against the frustum, sort globally by depth (stable, so ties
break by primitive index), bin primitives into 16x16 tiles via conservative
3-sigma bounding boxes, then alpha-composite front-to-back per pixel. A
primitive contributes to a pixel when the pixel center lies inside its
3-sigma box and its alpha there is at least alpha_skip (tested as a
Mahalanobis cutoff before the exp).
Backward: re-traverse each pixel's contributor list back-to-front,
recovering transmittances from the stored final value, and chain gradients
through the EWA projection, covariance construction, quaternion
normalization, exp, and sigmoid.

Tiles are independent: forward may process tile chunks on several threads
(outputs are disjoint per pixel), and the result is bitwise identical for
any parallelism degree. Backward walks tiles in fixed order.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .autodiff import Tensor, custom_op
from .core import (CameraPose, GaussianCloud, DEFAULT_LOWPASS,
                   project_gaussians, quats_to_rotmats)


@dataclass
class RasterConfig:
    tile_size: int = 16
    alpha_clamp: float = 0.99
    alpha_skip: float = 1.0 / 255.0
    transmittance_stop: float = 1e-4
    lowpass: float = DEFAULT_LOWPASS
    background: np.ndarray | float = 0.0   # scalar or (Z,) pre-decoder value
    parallel: int = 1                      # tile-chunk thread count

    def background_vector(self, z: int) -> np.ndarray:
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.ndim == 0:
            return np.full(z, float(bg))
        if bg.shape != (z,):
            raise ValueError(f"background must be scalar or ({z},)")
        return bg.copy()


@dataclass
class FeatureImage:
    """Pre-decoder render target: Z feature channels plus accumulated alpha."""

    data: np.ndarray    # (H, W, Z)
    alpha: np.ndarray   # (H, W)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class RasterGradients:
    d_mu: np.ndarray             # (N, 3)
    d_scale_log: np.ndarray      # (N, 3)
    d_rot: np.ndarray            # (N, 4)
    d_opacity_logit: np.ndarray  # (N,)
    d_feat: np.ndarray           # (N, Z)


@dataclass
class CompositingRecord:
    """Immutable state captured by the forward pass for the backward pass."""

    cam: CameraPose
    config: RasterConfig
    n_total: int
    feat_dim: int
    keep: np.ndarray          # (K,) indices of binned primitives
    mean2d: np.ndarray        # (K, 2)
    conic: np.ndarray         # (K, 3) upper-triangle of inv(cov2d)
    bbox: np.ndarray          # (K, 4) 3-sigma extent (x0, x1, y0, y1)
    qcut: np.ndarray          # (K,) Mahalanobis^2 above which a < alpha_skip
    cov2d: np.ndarray         # (K, 2, 2)
    alpha_act: np.ndarray     # (K,) sigmoid(opacity_logit)
    feats: np.ndarray         # (K, Z)
    t_cam: np.ndarray         # (K, 3)
    J: np.ndarray             # (K, 2, 3)
    sigma3: np.ndarray        # (K, 3, 3)
    scale_log: np.ndarray     # (K, 3)
    rot: np.ndarray           # (K, 4)
    tile_offsets: np.ndarray  # (ntiles + 1,)
    tile_prims: np.ndarray    # (P,) indices into the K arrays, depth-sorted per tile
    final_T: np.ndarray       # (H, W)
    last_count: np.ndarray    # (H, W) contributors consumed per pixel
    background: np.ndarray    # (Z,)


@njit(cache=True)
def _expand_pairs(tx0, tx1, ty0, ty1, offsets, pair_tile, pair_prim, ntx):
    for i in range(tx0.shape[0]):
        k = offsets[i]
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                pair_tile[k] = ty * ntx + tx
                pair_prim[k] = i
                k += 1


@njit(cache=True, nogil=True)
def _forward_tiles(tile_lo, tile_hi, tile_offsets, tile_prims, ntx, tile_size,
                   width, height, mean2d, conic, alpha_act, feats, bg,
                   bbox, qcut, alpha_clamp, stop_T,
                   out, out_alpha, final_T, last_count):
    zdim = feats.shape[1]
    for tile in range(tile_lo, tile_hi):
        s = tile_offsets[tile]
        e = tile_offsets[tile + 1]
        m = e - s
        ty = tile // ntx
        tx = tile % ntx
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        # gather this tile's candidates into contiguous scratch once; the
        # pixel loops below then stream through memory instead of chasing
        # tile_prims indirections 256 times per tile
        loc = np.empty((m, 11))
        lf = np.empty((m, zdim))
        for j in range(m):
            i = tile_prims[s + j]
            loc[j, 0] = mean2d[i, 0]
            loc[j, 1] = mean2d[i, 1]
            loc[j, 2] = conic[i, 0]
            loc[j, 3] = conic[i, 1]
            loc[j, 4] = conic[i, 2]
            loc[j, 5] = alpha_act[i]
            loc[j, 6] = qcut[i]
            loc[j, 7] = bbox[i, 0]
            loc[j, 8] = bbox[i, 1]
            loc[j, 9] = bbox[i, 2]
            loc[j, 10] = bbox[i, 3]
            for z in range(zdim):
                lf[j, z] = feats[i, z]
        # candidates outer (depth order), pixels inner: each candidate only
        # visits its bounding box, and per-pixel transmittance state makes
        # this composite bitwise identically to a per-pixel front-to-back
        # scan with early stop
        Tl = np.ones((py1 - py0, px1 - px0))
        cl = np.zeros((py1 - py0, px1 - px0), dtype=np.int64)
        for j in range(m):
            bx0 = loc[j, 7]
            bx1 = loc[j, 8]
            by0 = loc[j, 9]
            by1 = loc[j, 10]
            # conservative integer ranges; the float comparisons below stay
            # authoritative so edge pixels match the backward pass exactly
            jx0 = max(px0, int(np.floor(bx0 - 0.5)))
            jx1 = min(px1 - 1, int(np.ceil(bx1)))
            jy0 = max(py0, int(np.floor(by0 - 0.5)))
            jy1 = min(py1 - 1, int(np.ceil(by1)))
            for py in range(jy0, jy1 + 1):
                cy = py + 0.5
                if cy < by0 or cy > by1:
                    continue
                dy = cy - loc[j, 1]
                for px in range(jx0, jx1 + 1):
                    cx = px + 0.5
                    if cx < bx0 or cx > bx1:
                        continue
                    T = Tl[py - py0, px - px0]
                    if T < stop_T:
                        continue
                    dx = cx - loc[j, 0]
                    q = (loc[j, 2] * dx * dx + 2.0 * loc[j, 3] * dx * dy
                         + loc[j, 4] * dy * dy)
                    if q > loc[j, 6]:
                        continue
                    g = np.exp(-0.5 * q)
                    a = loc[j, 5] * g
                    if a > alpha_clamp:
                        a = alpha_clamp
                    w = a * T
                    for z in range(zdim):
                        out[py, px, z] += lf[j, z] * w
                    Tl[py - py0, px - px0] = T * (1.0 - a)
                    cl[py - py0, px - px0] = j + 1
        for py in range(py0, py1):
            for px in range(px0, px1):
                T = Tl[py - py0, px - px0]
                for z in range(zdim):
                    out[py, px, z] += bg[z] * T
                out_alpha[py, px] = 1.0 - T
                final_T[py, px] = T
                last_count[py, px] = cl[py - py0, px - px0]


@njit(cache=True)
def _backward_tiles(tile_offsets, tile_prims, ntx, tile_size, width, height,
                    mean2d, conic, alpha_act, feats, bg,
                    bbox, qcut, alpha_clamp,
                    final_T, last_count, d_image, d_alpha,
                    d_mean2d, d_conic, d_alpha_act, d_feat):
    zdim = feats.shape[1]
    S = np.empty(zdim)
    ntiles = tile_offsets.shape[0] - 1
    for tile in range(ntiles):
        s = tile_offsets[tile]
        e = tile_offsets[tile + 1]
        if e == s:
            continue
        ty = tile // ntx
        tx = tile % ntx
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        for py in range(py0, py1):
            for px in range(px0, px1):
                cnt = last_count[py, px]
                if cnt == 0:
                    continue
                cx = px + 0.5
                cy = py + 0.5
                Tfin = final_T[py, px]
                bgdot = 0.0
                for z in range(zdim):
                    S[z] = 0.0
                    bgdot += d_image[py, px, z] * bg[z]
                tail = (d_alpha[py, px] - bgdot) * Tfin
                T_after = Tfin
                for k in range(s + cnt - 1, s - 1, -1):
                    i = tile_prims[k]
                    if (cx < bbox[i, 0] or cx > bbox[i, 1]
                            or cy < bbox[i, 2] or cy > bbox[i, 3]):
                        continue
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    q = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                         + conic[i, 2] * dy * dy)
                    if q > qcut[i]:
                        continue
                    g = np.exp(-0.5 * q)
                    a = alpha_act[i] * g
                    clamped = a > alpha_clamp
                    if clamped:
                        a = alpha_clamp
                    om = 1.0 - a
                    T_i = T_after / om
                    da = tail / om
                    for z in range(zdim):
                        gz = d_image[py, px, z]
                        da += gz * (feats[i, z] * T_i - S[z] / om)
                        d_feat[i, z] += gz * a * T_i
                    if not clamped:
                        d_alpha_act[i] += da * g
                        dg = da * alpha_act[i]
                        dq = -0.5 * g * dg
                        d_conic[i, 0] += dx * dx * dq
                        d_conic[i, 1] += 2.0 * dx * dy * dq
                        d_conic[i, 2] += dy * dy * dq
                        d_mean2d[i, 0] -= dq * 2.0 * (conic[i, 0] * dx + conic[i, 1] * dy)
                        d_mean2d[i, 1] -= dq * 2.0 * (conic[i, 1] * dx + conic[i, 2] * dy)
                    for z in range(zdim):
                        S[z] += feats[i, z] * a * T_i
                    T_after = T_i


def _prepare(cloud: GaussianCloud, cam: CameraPose, config: RasterConfig):
    """Project, cull, depth-sort, and tile-bin a cloud."""
    proj = project_gaussians(cloud.mu, cloud.scale_log, cloud.rot, cam,
                             lowpass=config.lowpass)
    width, height = cam.image_w, cam.image_h
    ts = config.tile_size
    ntx = (width + ts - 1) // ts
    nty = (height + ts - 1) // ts

    valid = proj.valid.copy()
    mean2d = proj.mean2d
    cov2d = proj.cov2d
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    with np.errstate(invalid="ignore"):
        lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    x0 = mean2d[:, 0] - radius
    x1 = mean2d[:, 0] + radius
    y0 = mean2d[:, 1] - radius
    y1 = mean2d[:, 1] + radius
    valid &= (x1 >= 0) & (x0 < width) & (y1 >= 0) & (y0 < height)

    keep = np.flatnonzero(valid)
    record = dict(keep=keep)
    if keep.size == 0:
        record.update(tile_offsets=np.zeros(ntx * nty + 1, dtype=np.int64),
                      tile_prims=np.zeros(0, dtype=np.int64),
                      mean2d=np.zeros((0, 2)), conic=np.zeros((0, 3)),
                      cov2d=np.zeros((0, 2, 2)), bbox=np.zeros((0, 4)),
                      ntx=ntx, nty=nty, proj=proj)
        return record

    tx0 = np.clip(np.floor(x0[keep] / ts), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor(x1[keep] / ts), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor(y0[keep] / ts), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor(y1[keep] / ts), 0, nty - 1).astype(np.int64)
    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    offsets = np.zeros(keep.size + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    pair_tile = np.empty(offsets[-1], dtype=np.int64)
    pair_prim = np.empty(offsets[-1], dtype=np.int64)
    _expand_pairs(tx0, tx1, ty0, ty1, offsets[:-1], pair_tile, pair_prim, ntx)

    depth_rank = np.empty(keep.size, dtype=np.int64)
    depth_rank[np.argsort(proj.depth[keep], kind="stable")] = np.arange(keep.size)
    order = np.lexsort((depth_rank[pair_prim], pair_tile))
    pair_tile = pair_tile[order]
    pair_prim = pair_prim[order]
    tile_offsets = np.searchsorted(pair_tile, np.arange(ntx * nty + 1))

    cov_k = cov2d[keep]
    det = cov_k[:, 0, 0] * cov_k[:, 1, 1] - cov_k[:, 0, 1] ** 2
    conic = np.stack([cov_k[:, 1, 1] / det, -cov_k[:, 0, 1] / det,
                      cov_k[:, 0, 0] / det], axis=1)

    bbox = np.stack([x0[keep], x1[keep], y0[keep], y1[keep]], axis=1)
    record.update(tile_offsets=tile_offsets, tile_prims=pair_prim,
                  mean2d=np.ascontiguousarray(mean2d[keep]),
                  conic=np.ascontiguousarray(conic),
                  cov2d=np.ascontiguousarray(cov_k),
                  bbox=np.ascontiguousarray(bbox),
                  ntx=ntx, nty=nty, proj=proj)
    return record


def rasterize_forward(cloud: GaussianCloud, cam: CameraPose,
                      config: RasterConfig | None = None,
                      timings: dict | None = None):
    """Render a cloud into a FeatureImage; also returns the compositing record."""
    config = config or RasterConfig()
    z = cloud.feat_dim
    bg = config.background_vector(z)
    t0 = time.perf_counter()
    prep = _prepare(cloud, cam, config)
    t1 = time.perf_counter()

    width, height = cam.image_w, cam.image_h
    out = np.zeros((height, width, z))
    out_alpha = np.zeros((height, width))
    final_T = np.ones((height, width))
    last_count = np.zeros((height, width), dtype=np.int64)

    keep = prep["keep"]
    alpha_act = 1.0 / (1.0 + np.exp(-cloud.opacity_logit[keep]))
    feats = np.ascontiguousarray(cloud.feat[keep])
    if config.alpha_skip > 0.0:
        # a = alpha_act * exp(-q/2) < alpha_skip exactly when q > qcut;
        # testing q first avoids the exp for far-off primitives
        qcut = 2.0 * np.log(alpha_act / config.alpha_skip)
    else:
        qcut = np.full(keep.size, np.inf)

    ntiles = prep["ntx"] * prep["nty"]
    args = (prep["tile_offsets"], prep["tile_prims"], prep["ntx"],
            config.tile_size, width, height, prep["mean2d"], prep["conic"],
            alpha_act, feats, bg, prep["bbox"], qcut, config.alpha_clamp,
            config.transmittance_stop, out, out_alpha, final_T, last_count)
    if config.parallel > 1 and ntiles > 1:
        bounds = np.linspace(0, ntiles, config.parallel + 1).astype(np.int64)
        with ThreadPoolExecutor(max_workers=config.parallel) as pool:
            futures = [pool.submit(_forward_tiles, lo, hi, *args)
                       for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
            for f in futures:
                f.result()
    else:
        _forward_tiles(0, ntiles, *args)
    t2 = time.perf_counter()
    if timings is not None:
        timings["cull_sort"] = t1 - t0
        timings["composite"] = t2 - t1

    proj = prep["proj"]
    record = CompositingRecord(
        cam=cam, config=config, n_total=len(cloud), feat_dim=z, keep=keep,
        mean2d=prep["mean2d"], conic=prep["conic"], cov2d=prep["cov2d"],
        bbox=prep["bbox"], qcut=qcut, alpha_act=alpha_act, feats=feats,
        t_cam=proj.t_cam[keep], J=proj.J[keep], sigma3=proj.sigma3[keep],
        scale_log=cloud.scale_log[keep].copy(), rot=cloud.rot[keep].copy(),
        tile_offsets=prep["tile_offsets"], tile_prims=prep["tile_prims"],
        final_T=final_T, last_count=last_count, background=bg)
    return FeatureImage(data=out, alpha=out_alpha), record


def _rotmat_quat_jacobian(qhat: np.ndarray) -> np.ndarray:
    """(N, 4, 3, 3) array of dR/dq_hat for unit quaternions (w, x, y, z)."""
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    n = qhat.shape[0]
    D = np.zeros((n, 4, 3, 3))
    zero = np.zeros(n)
    D[:, 0] = 2.0 * np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1)], axis=1)
    D[:, 1] = 2.0 * np.stack([
        np.stack([zero, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1)], axis=1)
    D[:, 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zero, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1)], axis=1)
    D[:, 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zero], axis=-1)], axis=1)
    return D


def rasterize_backward(record: CompositingRecord, d_image: np.ndarray,
                       d_alpha: np.ndarray | None = None) -> RasterGradients:
    """Gradients of a scalar loss w.r.t. all unconstrained primitive parameters."""
    h, w = record.final_T.shape
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)
    if d_image.shape != (h, w, record.feat_dim):
        raise ValueError(f"d_image shape {d_image.shape} does not match render "
                         f"{(h, w, record.feat_dim)}")
    if d_alpha is None:
        d_alpha = np.zeros((h, w))
    d_alpha = np.ascontiguousarray(d_alpha, dtype=np.float64)
    if d_alpha.shape != (h, w):
        raise ValueError("d_alpha shape mismatch")

    k = record.keep.size
    d_mean2d = np.zeros((k, 2))
    d_conic = np.zeros((k, 3))
    d_alpha_act = np.zeros(k)
    d_feat_k = np.zeros((k, record.feat_dim))
    cfg = record.config
    _backward_tiles(record.tile_offsets, record.tile_prims,
                    (record.cam.image_w + cfg.tile_size - 1) // cfg.tile_size,
                    cfg.tile_size, record.cam.image_w, record.cam.image_h,
                    record.mean2d, record.conic, record.alpha_act, record.feats,
                    record.background, record.bbox, record.qcut, cfg.alpha_clamp,
                    record.final_T, record.last_count, d_image, d_alpha,
                    d_mean2d, d_conic, d_alpha_act, d_feat_k)

    n = record.n_total
    grads = RasterGradients(
        d_mu=np.zeros((n, 3)), d_scale_log=np.zeros((n, 3)),
        d_rot=np.zeros((n, 4)), d_opacity_logit=np.zeros(n),
        d_feat=np.zeros((n, record.feat_dim)))
    if k == 0:
        return grads

    cam = record.cam
    # conic -> cov2d: dC = -A G A with G the full-matrix conic gradient
    A = np.empty((k, 2, 2))
    A[:, 0, 0] = record.conic[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = record.conic[:, 1]
    A[:, 1, 1] = record.conic[:, 2]
    G = np.empty((k, 2, 2))
    G[:, 0, 0] = d_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * d_conic[:, 1]
    G[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -(A @ G @ A)

    W = cam.rotation
    M = record.J @ W
    # cov2d = M Sigma3 M^T + lowpass*I
    Mt = np.swapaxes(M, 1, 2)
    d_sigma3 = Mt @ d_cov2d @ M
    d_M = 2.0 * (d_cov2d @ M @ record.sigma3)
    d_J = d_M @ W.T

    # camera-space point gradient: mean2d path + Jacobian dependence on t
    t = record.t_cam
    tz = t[:, 2]
    d_t = (np.swapaxes(record.J, 1, 2) @ d_mean2d[:, :, None])[:, :, 0]
    d_t[:, 0] += d_J[:, 0, 2] * (-cam.fx / tz**2)
    d_t[:, 1] += d_J[:, 1, 2] * (-cam.fy / tz**2)
    d_t[:, 2] += (d_J[:, 0, 0] * (-cam.fx / tz**2)
                  + d_J[:, 1, 1] * (-cam.fy / tz**2)
                  + d_J[:, 0, 2] * (2.0 * cam.fx * t[:, 0] / tz**3)
                  + d_J[:, 1, 2] * (2.0 * cam.fy * t[:, 1] / tz**3))
    d_mu_k = d_t @ W

    # Sigma3 = R diag(exp(2*scale_log)) R^T
    R = quats_to_rotmats(record.rot)
    s2 = np.exp(2.0 * record.scale_log)
    dD = np.swapaxes(R, 1, 2) @ d_sigma3 @ R
    d_scale_log_k = np.diagonal(dD, axis1=1, axis2=2) * 2.0 * s2
    RD = R * s2[:, None, :]
    d_R = 2.0 * (d_sigma3 @ RD)

    qnorm = np.linalg.norm(record.rot, axis=1)
    qhat = record.rot / qnorm[:, None]
    dRdq = _rotmat_quat_jacobian(qhat)
    n_k = qhat.shape[0]
    d_qhat = (dRdq.reshape(n_k, 4, 9) @ d_R.reshape(n_k, 9, 1))[:, :, 0]
    d_rot_k = (d_qhat - qhat * np.einsum("nk,nk->n", qhat, d_qhat)[:, None]) / qnorm[:, None]

    d_opa_k = d_alpha_act * record.alpha_act * (1.0 - record.alpha_act)

    grads.d_mu[record.keep] = d_mu_k
    grads.d_scale_log[record.keep] = d_scale_log_k
    grads.d_rot[record.keep] = d_rot_k
    grads.d_opacity_logit[record.keep] = d_opa_k
    grads.d_feat[record.keep] = d_feat_k
    return grads


def rasterize(mu: Tensor, scale_log: Tensor, rot: Tensor, opacity_logit: Tensor,
              feat: Tensor, cam: CameraPose, config: RasterConfig | None = None,
              branch_tag: np.ndarray | None = None) -> Tensor:
    """Differentiable render returning an (H, W, Z+1) tensor.

    The last channel is the accumulated alpha; slice it off with tensor
    indexing when only the feature image is needed.
    """
    n = mu.data.shape[0]
    if branch_tag is None:
        branch_tag = np.zeros(n, dtype=np.uint8)
    cloud = GaussianCloud(mu.data, scale_log.data, rot.data,
                          opacity_logit.data, feat.data, branch_tag)
    img, record = rasterize_forward(cloud, cam, config)
    out = np.concatenate([img.data, img.alpha[..., None]], axis=2)

    def backward(g):
        grads = rasterize_backward(record, g[..., :-1], g[..., -1])
        return (grads.d_mu, grads.d_scale_log, grads.d_rot,
                grads.d_opacity_logit, grads.d_feat)

    return custom_op((mu, scale_log, rot, opacity_logit, feat), out, backward)


class RgbDecoder:
    """Per-pixel affine map Z -> 3 plus optional 3x3 conv refiner, then sigmoid.

    Stand-in for a CNN renderer: differentiable end-to-end and trainable
    with the reconstruction parameters.
    """

    def __init__(self, feat_dim: int, refiner: bool = False,
                 rng: np.random.Generator | None = None):
        from .nn import ConvLayer, kaiming_uniform
        rng = rng or np.random.default_rng(0)
        w = np.zeros((feat_dim, 3))
        w[:3, :3] = np.eye(3)  # pass the leading channels through at init
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(3), requires_grad=True)
        self.refiner = ConvLayer(3, 3, "none", rng) if refiner else None
        if self.refiner is not None:
            self.refiner.weight.data[...] = 0.0
            self.refiner.weight.data[1, 1] = np.eye(3)  # identity kernel at init

    def __call__(self, img: Tensor) -> Tensor:
        h, w, z = img.data.shape
        if z != self.weight.data.shape[0]:
            raise ValueError(f"decoder expects {self.weight.data.shape[0]} channels, got {z}")
        x = img.reshape(h * w, z) @ self.weight + self.bias
        x = x.reshape(h, w, 3)
        if self.refiner is not None:
            x = self.refiner(x)
        return x.sigmoid()

    def parameters(self):
        params = [self.weight, self.bias]
        if self.refiner is not None:
            params += self.refiner.parameters()
        return params


def decode_to_rgb(img: FeatureImage, decoder: RgbDecoder) -> np.ndarray:
    """Non-differentiable convenience wrapper returning an (H, W, 3) array."""
    return decoder(Tensor(img.data)).data


def render_benchmark(cloud: GaussianCloud, cam: CameraPose, n_frames: int,
                     config: RasterConfig | None = None) -> dict:
    """Wall-clock FPS of forward-only rendering with a per-stage breakdown."""
    if n_frames < 10:
        raise ValueError("n_frames must be >= 10")
    config = config or RasterConfig()
    # warm-up compiles the numba kernels outside the timed region
    rasterize_forward(cloud, cam, config)
    stages = {"cull_sort": 0.0, "composite": 0.0}
    t0 = time.perf_counter()
    for _ in range(n_frames):
        timings = {}
        rasterize_forward(cloud, cam, config, timings=timings)
        stages["cull_sort"] += timings["cull_sort"]
        stages["composite"] += timings["composite"]
    elapsed = time.perf_counter() - t0
    return {
        "fps": n_frames / elapsed,
        "frames": n_frames,
        "total_s": elapsed,
        "cull_sort_s": stages["cull_sort"],
        "composite_s": stages["composite"],
        "primitives": len(cloud),
        "resolution": (cam.image_w, cam.image_h),
    }
