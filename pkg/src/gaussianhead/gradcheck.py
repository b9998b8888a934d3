"""Finite-difference verification of every analytic gradient path.

Each check builds a small random instance, evaluates a scalar loss, runs
backward, and compares against central differences. Relative error is the
ratio of gradient-difference norm to finite-difference norm, guarded for
near-zero gradients. The rasterizer path is held to 1e-3, pure network and
loss paths to 1e-4.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat
from .core import CameraPose
from .encoding import HashGridConfig, encode, make_tables
from .nn import MLP, ConvStack
from .objectives import lifting_loss, lip_loss
from .rasterizer import RasterConfig, RgbDecoder, rasterize

RASTER_TOL = 1e-3
NN_TOL = 1e-4


def finite_diff(loss_fn, params, h: float = 1e-5):
    """Central-difference gradients of loss_fn() w.r.t. each Tensor in params."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
    return float(diff / scale)


def _one_sided_fd(loss_fn, p, idx, h):
    """(forward, backward) difference quotients for one component."""
    flat = p.data.reshape(-1)
    old = flat[idx]
    mid = loss_fn()
    flat[idx] = old + h
    up = loss_fn()
    flat[idx] = old - h
    down = loss_fn()
    flat[idx] = old
    return (up - mid) / h, (mid - down) / h


def check(make_instance, tol, h: float = 1e-5, attempts: int = 5) -> float:
    """Worst relative error for a randomized instance, kink-aware.

    ``make_instance()`` returns ``(loss_builder, params)`` with fresh
    randomness each call. The losses under test are piecewise smooth
    (relu and abs kinks, compositing skip/clamp thresholds), so a sample
    point can straddle a non-smooth locus between the two central
    difference evaluations. A mismatched component is probed with
    one-sided differences: left and right slopes disagreeing means the
    window contains a kink or jump and the instance is redrawn; agreeing
    one-sided slopes mean the loss is locally smooth and the mismatch is
    a genuine analytic-gradient error, reported as-is.
    """
    last_err = np.inf
    for _ in range(attempts):
        loss_builder, params = make_instance()
        for p in params:
            p.zero_grad()
        loss_builder().backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                    for p in params]
        scalar = lambda: loss_builder().item()
        numeric = finite_diff(scalar, params, h)

        straddles = False
        worst = 0.0
        for p, a, n in zip(params, analytic, numeric):
            scale = max(np.linalg.norm(n), np.linalg.norm(a), 1e-8)
            bad = np.flatnonzero(np.abs(a - n).reshape(-1) > 0.5 * tol * scale)
            for idx in bad:
                fwd, bwd = _one_sided_fd(scalar, p, idx, h)
                if abs(fwd - bwd) > 0.02 * max(abs(fwd), abs(bwd), 1e-6):
                    straddles = True
                    break
            if straddles:
                break
            worst = max(worst, relative_error(a, n))
        if not straddles:
            return worst
        last_err = worst
    return last_err


def _random_scene(rng, n_prims: int, z: int):
    mu = Tensor(rng.normal(0.0, 0.45, (n_prims, 3)), requires_grad=True)
    slog = Tensor(rng.normal(np.log(0.12), 0.25, (n_prims, 3)), requires_grad=True)
    rot = Tensor(rng.normal(0.0, 1.0, (n_prims, 4)) + np.array([2.0, 0, 0, 0]),
                 requires_grad=True)
    opa = Tensor(rng.normal(0.5, 0.8, n_prims), requires_grad=True)
    feat = Tensor(rng.uniform(0.0, 1.0, (n_prims, z)), requires_grad=True)
    cam = CameraPose.look_at(eye=[0.15, -0.1, 2.5], target=[0, 0, 0],
                             up=[0, 1, 0], fx=30.0, fy=32.0, cx=16.0, cy=16.0,
                             image_w=32, image_h=32)
    return mu, slog, rot, opa, feat, cam


def check_rasterizer(rng, n_prims: int = 8, z: int = 3) -> float:
    """rasterize composed with the RGB decoder, plus an alpha term."""

    def make_instance():
        mu, slog, rot, opa, feat, cam = _random_scene(rng, n_prims, z)
        decoder = RgbDecoder(z, rng=rng)
        w_img = Tensor(rng.normal(0.0, 1.0, (32, 32, 3)))
        w_alpha = Tensor(rng.normal(0.0, 1.0, (32, 32)))
        cfg = RasterConfig(background=0.2)
        params = [mu, slog, rot, opa, feat] + decoder.parameters()

        def loss():
            img = rasterize(mu, slog, rot, opa, feat, cam, cfg)
            rgb = decoder(img[:, :, :z])
            return (rgb * w_img).sum() + (img[:, :, z] * w_alpha).sum()

        return loss, params

    return check(make_instance, RASTER_TOL)


def check_encoding(rng) -> float:
    def make_instance():
        grid = HashGridConfig(levels=2, table_size=256, base_resolution=4)
        tables = make_tables(grid, rng, init_scale=0.5)
        pts = rng.uniform(-1.0, 1.0, (16, 3))
        w = Tensor(rng.normal(0.0, 1.0, (16, grid.out_dim)))
        return (lambda: (encode(pts, tables, grid) * w).sum()), [tables]

    return check(make_instance, NN_TOL)


def check_mlp(rng) -> float:
    def make_instance():
        net = MLP([5, 8, 8, 4], rng=rng)
        x = Tensor(rng.normal(0.0, 1.0, (6, 5)), requires_grad=True)
        w = Tensor(rng.normal(0.0, 1.0, (6, 4)))
        return (lambda: (net(x).tanh() * w).sum()), [x] + net.parameters()

    return check(make_instance, NN_TOL)


def check_conv(rng) -> float:
    def make_instance():
        net = ConvStack([3, 4, 2], rng=rng)
        x = Tensor(rng.normal(0.0, 1.0, (7, 7, 3)), requires_grad=True)
        w = Tensor(rng.normal(0.0, 1.0, (7, 7, 2)))
        return (lambda: (net(x) * w).sum()), [x] + net.parameters()

    return check(make_instance, NN_TOL)


def check_lifting(rng) -> float:
    def make_instance():
        verts = rng.normal(0.0, 0.5, (10, 3))
        mu = Tensor(rng.normal(0.0, 0.5, (12, 3)), requires_grad=True)
        return (lambda: lifting_loss(verts, mu)), [mu]

    return check(make_instance, NN_TOL)


def check_losses(rng) -> float:
    def make_instance():
        a = Tensor(rng.uniform(0.1, 0.9, (9, 9, 3)), requires_grad=True)
        b = Tensor(rng.uniform(0.1, 0.9, (9, 9, 3)))
        mask = rng.random((9, 9)) > 0.4

        def loss():
            return (a - b).abs().mean() + 0.7 * lip_loss(a, b, mask) \
                + 0.3 * (a - b).square().mean()

        return loss, [a]

    return check(make_instance, NN_TOL)


def run_suite(seed: int = 0, instances: int = 20):
    """Run every check `instances` times; returns (passed, report rows).

    Report rows are (name, worst_rel_err, tolerance, passed).
    """
    rng = np.random.default_rng(seed)
    groups = [
        ("rasterize+decode", lambda: check_rasterizer(rng), RASTER_TOL),
        ("hash-encode", lambda: check_encoding(rng), NN_TOL),
        ("mlp", lambda: check_mlp(rng), NN_TOL),
        ("conv3x3", lambda: check_conv(rng), NN_TOL),
        ("lifting-loss", lambda: check_lifting(rng), NN_TOL),
        ("image-losses", lambda: check_losses(rng), NN_TOL),
    ]
    rows = []
    all_ok = True
    for name, fn, tol in groups:
        worst = max(fn() for _ in range(instances))
        ok = worst < tol
        all_ok = all_ok and ok
        rows.append((name, worst, tol, ok))
    return all_ok, rows
