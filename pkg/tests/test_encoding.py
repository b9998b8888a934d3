import numpy as np

from gaussianhead.autodiff import Tensor
from gaussianhead.encoding import (HashGridConfig, PLANE_AXES, encode,
                                   encode_backward, encode_positions,
                                   hash_index, make_tables)


def _cfg(**kw):
    defaults = dict(levels=2, features_per_level=2, table_size=256,
                    base_resolution=4, growth=2.0)
    defaults.update(kw)
    return HashGridConfig(**defaults)


class TestHashIndex:
    def test_dense_branch_row_major(self):
        # (level_res+1)^2 = 256 <= T, dense: iy*(res+1)+ix
        assert hash_index(3, 5, 15, 2 ** 14) == 5 * 16 + 3

    def test_deterministic(self):
        a = hash_index(123, 456, 1023, 1024)
        assert all(hash_index(123, 456, 1023, 1024) == a for _ in range(10))

    def test_hashed_branch_spread(self):
        # histogram oracle: hashed bucket loads stay below 4x the mean
        rng = np.random.default_rng(0)
        t = 1024
        ix = rng.integers(0, 4096, 100_000)
        iy = rng.integers(0, 4096, 100_000)
        idx = hash_index(ix, iy, 4095, t)
        counts = np.bincount(np.asarray(idx), minlength=t)
        assert counts.max() < 4 * counts.mean()

    def test_hashed_in_range(self):
        idx = hash_index(np.arange(5000), np.arange(5000) * 3, 4095, 512)
        assert np.all((np.asarray(idx) >= 0) & (np.asarray(idx) < 512))


class TestEncode:
    def test_output_length(self):
        cfg = _cfg()
        tables = make_tables(cfg, np.random.default_rng(0))
        out = encode_positions(np.zeros((7, 3)), tables.data, cfg)
        assert out.shape == (7, 3 * cfg.levels * cfg.features_per_level)

    def test_zero_tables_zero_output(self):
        cfg = _cfg()
        tables = np.zeros((3, cfg.levels, cfg.table_size,
                           cfg.features_per_level))
        pts = np.random.default_rng(1).uniform(-1, 1, (10, 3))
        assert np.all(encode_positions(pts, tables, cfg) == 0.0)

    def test_corner_aligned_exact_entry(self):
        cfg = _cfg(levels=1)
        rng = np.random.default_rng(2)
        tables = make_tables(cfg, rng, init_scale=1.0)
        # box corner maps to grid corner (0,0) of every plane at every level
        mn = cfg.box_min
        out = encode_positions(np.array([mn]), tables.data, cfg)
        for p in range(3):
            idx = hash_index(0, 0, cfg.level_resolution(0), cfg.table_size)
            expected = tables.data[p, 0, idx]
            got = out[0, p * cfg.features_per_level:(p + 1) * cfg.features_per_level]
            assert np.allclose(got, expected)

    def test_midpoint_average_oracle(self):
        cfg = _cfg(levels=1, base_resolution=2)
        rng = np.random.default_rng(3)
        tables = make_tables(cfg, rng, init_scale=1.0)
        res = cfg.level_resolution(0)
        # position whose plane coords land at the center of cell (0, 0)
        extent = cfg.box_max - cfg.box_min
        u = 0.5 / res
        pos = cfg.box_min + u * extent
        out = encode_positions(np.array([pos]), tables.data, cfg)
        for p, (ax, ay) in enumerate(PLANE_AXES):
            corners = [tables.data[p, 0, hash_index(i, j, res, cfg.table_size)]
                       for j in (0, 1) for i in (0, 1)]
            expected = np.mean(corners, axis=0)
            got = out[0, p * cfg.features_per_level:(p + 1) * cfg.features_per_level]
            assert np.allclose(got, expected)

    def test_continuity_across_cell_boundary(self):
        cfg = _cfg()
        tables = make_tables(cfg, np.random.default_rng(4), init_scale=1.0)
        # straddle an interior grid line with a tiny step
        res = cfg.level_resolution(0)
        extent = cfg.box_max - cfg.box_min
        base = cfg.box_min + (1.0 / res) * extent
        eps = 1e-10
        a = encode_positions(np.array([base - eps]), tables.data, cfg)
        b = encode_positions(np.array([base + eps]), tables.data, cfg)
        assert np.abs(a - b).max() < 1e-7

    def test_determinism_bitwise(self):
        cfg = _cfg()
        tables = make_tables(cfg, np.random.default_rng(5), init_scale=1.0)
        pts = np.random.default_rng(6).uniform(-1.5, 1.5, (50, 3))
        a = encode_positions(pts, tables.data, cfg)
        b = encode_positions(pts, tables.data, cfg)
        assert np.array_equal(a, b)

    def test_out_of_box_clamped(self):
        cfg = _cfg()
        tables = make_tables(cfg, np.random.default_rng(7), init_scale=1.0)
        far = encode_positions(np.array([[99.0, 99.0, 99.0]]), tables.data, cfg)
        corner = encode_positions(np.array([cfg.box_max]), tables.data, cfg)
        assert np.array_equal(far, corner)


class TestEncodeBackward:
    def test_zero_upstream_zero_gradients(self):
        cfg = _cfg()
        tables = make_tables(cfg, np.random.default_rng(0), init_scale=1.0)
        pts = np.random.default_rng(1).uniform(-1, 1, (5, 3))
        g = encode_backward(pts, np.zeros((5, cfg.out_dim)), cfg)
        assert np.all(g == 0.0)

    def test_corner_aligned_single_entry(self):
        cfg = _cfg(levels=1)
        tables = make_tables(cfg, np.random.default_rng(2), init_scale=1.0)
        d_out = np.ones((1, cfg.out_dim))
        g = encode_backward(np.array([cfg.box_min]), d_out, cfg)
        for p in range(3):
            nz = np.flatnonzero(np.abs(g[p, 0]).sum(axis=1))
            assert nz.size == 1

    def test_finite_difference_on_tables(self):
        cfg = _cfg(levels=2, table_size=128)
        rng = np.random.default_rng(3)
        tables = make_tables(cfg, rng, init_scale=0.5)
        pts = rng.uniform(-1, 1, (6, 3))
        w = rng.normal(0, 1, (6, cfg.out_dim))

        def loss():
            return float((encode_positions(pts, tables.data, cfg) * w).sum())

        g = encode_backward(pts, w, cfg)
        h = 1e-6
        flat = tables.data.reshape(-1)
        gflat = g.reshape(-1)
        idxs = np.flatnonzero(gflat)[:200]
        for i in idxs:
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            fd = (up - down) / (2 * h)
            assert abs(gflat[i] - fd) < 1e-4 * max(abs(fd), 1.0)

    def test_tensor_encode_routes_gradient_to_tables_only(self):
        cfg = _cfg()
        tables = make_tables(cfg, np.random.default_rng(4), init_scale=1.0)
        pts = np.random.default_rng(5).uniform(-1, 1, (4, 3))
        out = encode(pts, tables, cfg)
        out.sum().backward()
        assert tables.grad is not None
        assert tables.grad.shape == tables.data.shape
