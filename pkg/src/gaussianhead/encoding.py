"""Tri-plane multiresolution hash encoding of 3D positions.

A point is projected onto the XY, YZ, and XZ planes; each plane carries L
levels of hashed 2D feature grids that are bilinearly interpolated. The
concatenated lookup (plane-major, level-minor) has length 3*L*F.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, custom_op

HASH_P1 = 1
HASH_P2 = 2654435761

# (axis0, axis1) index pairs for the XY, YZ, XZ planes.
PLANE_AXES = ((0, 1), (1, 2), (0, 2))


@dataclass
class HashGridConfig:
    levels: int = 4
    features_per_level: int = 2
    table_size: int = 2 ** 14
    base_resolution: int = 16
    growth: float = 2.0
    box_min: np.ndarray = field(default_factory=lambda: np.array([-1.2, -1.2, -1.2]))
    box_max: np.ndarray = field(default_factory=lambda: np.array([1.2, 1.2, 1.2]))

    def __post_init__(self):
        self.box_min = np.asarray(self.box_min, dtype=np.float64).reshape(3)
        self.box_max = np.asarray(self.box_max, dtype=np.float64).reshape(3)
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        if self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.growth <= 1.0:
            raise ValueError("growth must exceed 1")
        if np.any(self.box_max <= self.box_min):
            raise ValueError("degenerate bounding box")

    @property
    def out_dim(self) -> int:
        return 3 * self.levels * self.features_per_level

    def level_resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.growth ** level))


def make_tables(config: HashGridConfig, rng: np.random.Generator,
                init_scale: float = 1e-4) -> Tensor:
    """Trainable tables of shape (3 planes, L, T, F), near-zero initialized."""
    shape = (3, config.levels, config.table_size, config.features_per_level)
    return Tensor(rng.uniform(-init_scale, init_scale, size=shape), requires_grad=True)


def hash_index(ix, iy, level_res: int, table_size: int):
    """Table index for integer grid coordinates at one level.

    Dense row-major (y-major) addressing when the full (res+1)^2 grid fits in
    the table; otherwise a XOR-multiply spatial hash.
    """
    ix = np.asarray(ix, dtype=np.int64)
    iy = np.asarray(iy, dtype=np.int64)
    if (level_res + 1) ** 2 <= table_size:
        return iy * (level_res + 1) + ix
    return ((ix * HASH_P1) ^ (iy * HASH_P2)) % table_size


def _corner_lookup(mu: np.ndarray, config: HashGridConfig):
    """Per plane/level corner indices and bilinear weights.

    Returns lists (per plane, per level) of (idx00, idx10, idx01, idx11,
    w00, w10, w01, w11) with idx arrays of shape (N,).
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    p01 = (mu - config.box_min) / (config.box_max - config.box_min)
    p01 = np.clip(p01, 0.0, 1.0)
    out = []
    for a0, a1 in PLANE_AXES:
        per_level = []
        for lvl in range(config.levels):
            res = config.level_resolution(lvl)
            u = p01[:, a0] * res
            v = p01[:, a1] * res
            ix = np.minimum(np.floor(u).astype(np.int64), res - 1)
            iy = np.minimum(np.floor(v).astype(np.int64), res - 1)
            fx = u - ix
            fy = v - iy
            idx = [hash_index(ix + dx, iy + dy, res, config.table_size)
                   for dy in (0, 1) for dx in (0, 1)]
            w = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
            per_level.append((idx, w))
        out.append(per_level)
    return out


def encode_positions(mu: np.ndarray, tables: np.ndarray,
                     config: HashGridConfig) -> np.ndarray:
    """Forward encoding of (N, 3) positions -> (N, 3*L*F) features."""
    lookup = _corner_lookup(mu, config)
    n = np.asarray(mu).reshape(-1, 3).shape[0]
    chunks = []
    for plane, per_level in enumerate(lookup):
        for lvl, (idx, w) in enumerate(per_level):
            tab = tables[plane, lvl]
            feat = np.zeros((n, config.features_per_level))
            for i, wi in zip(idx, w):
                feat += tab[i] * wi[:, None]
            chunks.append(feat)
    return np.concatenate(chunks, axis=1)


def encode_backward(mu: np.ndarray, d_out: np.ndarray,
                    config: HashGridConfig) -> np.ndarray:
    """Scatter output gradients to table entries; no gradient w.r.t. mu."""
    lookup = _corner_lookup(mu, config)
    F = config.features_per_level
    grads = np.zeros((3, config.levels, config.table_size, F))
    col = 0
    for plane, per_level in enumerate(lookup):
        for lvl, (idx, w) in enumerate(per_level):
            g = d_out[:, col:col + F]
            for i, wi in zip(idx, w):
                np.add.at(grads[plane, lvl], i, g * wi[:, None])
            col += F
    return grads


def encode(mu: np.ndarray, tables: Tensor, config: HashGridConfig) -> Tensor:
    """Differentiable encoding: gradients flow to table entries only."""
    out = encode_positions(mu, tables.data, config)

    def backward(g):
        return (encode_backward(mu, g, config),)

    return custom_op((tables,), out, backward)
