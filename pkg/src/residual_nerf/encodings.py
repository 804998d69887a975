"""Input encodings: multi-resolution hash grid for positions and sinusoidal
frequency features for view directions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from . import autodiff as ad

PRIMES = (1, 2654435761, 805459861)


@dataclass
class HashGridConfig:
    levels: int = 8
    features_per_level: int = 2
    base_resolution: int = 16
    per_level_scale: float = 1.5
    table_size: int = 2 ** 14
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        self.bounds = (tuple(float(v) for v in self.bounds[0]),
                       tuple(float(v) for v in self.bounds[1]))
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise ValueError(f"table_size must be a power of two, got {t}")
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        if not self.per_level_scale > 1:
            raise ValueError("per_level_scale must exceed 1")
        if any(hi <= lo for lo, hi in zip(*self.bounds)):
            raise ValueError(f"degenerate bounds {self.bounds}")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.per_level_scale ** level))

    def resolutions(self) -> np.ndarray:
        return np.array([self.resolution(l) for l in range(self.levels)], dtype=np.int64)

    def is_dense(self, level: int) -> bool:
        return (self.resolution(level) + 1) ** 3 <= self.table_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = [list(self.bounds[0]), list(self.bounds[1])]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HashGridConfig":
        return cls(**d)


@dataclass
class FreqEncodingConfig:
    num_frequencies: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")

    @property
    def output_dim(self) -> int:
        return 3 * (int(self.include_input) + 2 * self.num_frequencies)


def init_table(config: HashGridConfig, rng: np.random.Generator) -> np.ndarray:
    rows = config.levels * config.table_size
    return rng.uniform(-1e-4, 1e-4, size=(rows, config.features_per_level)).astype(np.float32)


def normalize_positions(pos: np.ndarray, config: HashGridConfig) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64)
    if not np.isfinite(pos).all():
        raise ad.NumericError("non-finite position passed to hash encoding")
    lo = np.asarray(config.bounds[0])
    hi = np.asarray(config.bounds[1])
    return np.clip((pos - lo) / (hi - lo), 0.0, 1.0)


def spatial_hash(coords: np.ndarray, table_size: int) -> np.ndarray:
    """XOR-of-primes hash of integer grid coordinates, masked to the table."""
    c = np.asarray(coords, dtype=np.uint64)
    h = (c[..., 0] * np.uint64(PRIMES[0])) ^ (c[..., 1] * np.uint64(PRIMES[1])) \
        ^ (c[..., 2] * np.uint64(PRIMES[2]))
    return (h & np.uint64(table_size - 1)).astype(np.int64)


@dataclass
class Located:
    """Corner rows and trilinear weights for a batch of points.

    ``rows`` is (P, L, 8) into the flattened (L*T, F) table, ``weights`` the
    matching (P, L, 8) trilinear weights. Fields sharing a grid config reuse
    one ``Located`` for the same points.
    """

    rows: np.ndarray
    weights: np.ndarray
    num_rows: int = field(default=0)


@numba.njit(cache=True)
def _locate_kernel(x, resolutions, dense, table_size, rows, weights):
    n = x.shape[0]
    levels = resolutions.shape[0]
    mask = np.uint64(table_size - 1)
    p1 = np.uint64(2654435761)
    p2 = np.uint64(805459861)
    for i in range(n):
        for l in range(levels):
            res = resolutions[l]
            sx = x[i, 0] * res
            sy = x[i, 1] * res
            sz = x[i, 2] * res
            bx = min(np.int64(math.floor(sx)), res - 1)
            by = min(np.int64(math.floor(sy)), res - 1)
            bz = min(np.int64(math.floor(sz)), res - 1)
            fx = sx - bx
            fy = sy - by
            fz = sz - bz
            for corner in range(8):
                ox = corner & 1
                oy = (corner >> 1) & 1
                oz = (corner >> 2) & 1
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                cx = bx + ox
                cy = by + oy
                cz = bz + oz
                if dense[l]:
                    stride = res + 1
                    slot = cx + stride * (cy + stride * cz)
                else:
                    h = np.uint64(cx) ^ (np.uint64(cy) * p1) ^ (np.uint64(cz) * p2)
                    slot = np.int64(h & mask)
                rows[i, l, corner] = l * table_size + slot
                weights[i, l, corner] = w


@numba.njit(cache=True)
def _interp_forward(table, rows, weights, out):
    n, levels, _ = rows.shape
    feats = table.shape[1]
    for i in range(n):
        for l in range(levels):
            for f in range(feats):
                acc = 0.0
                for c in range(8):
                    acc += weights[i, l, c] * table[rows[i, l, c], f]
                out[i, l * feats + f] = acc


@numba.njit(cache=True)
def _interp_backward(grad_out, rows, weights, grad_table):
    # serial scatter keeps accumulation order fixed
    n, levels, _ = rows.shape
    feats = grad_table.shape[1]
    for i in range(n):
        for l in range(levels):
            for f in range(feats):
                g = grad_out[i, l * feats + f]
                if g != 0.0:
                    for c in range(8):
                        grad_table[rows[i, l, c], f] += weights[i, l, c] * g


def locate(pos: np.ndarray, config: HashGridConfig, normalized: bool = False) -> Located:
    """Corner rows and weights for world positions ``pos`` of shape (P, 3)."""
    x = np.ascontiguousarray(pos if normalized else normalize_positions(pos, config),
                             dtype=np.float64).reshape(-1, 3)
    n = x.shape[0]
    rows = np.empty((n, config.levels, 8), dtype=np.int64)
    weights = np.empty((n, config.levels, 8), dtype=ad.default_dtype())
    dense = np.array([config.is_dense(l) for l in range(config.levels)])
    _locate_kernel(x, config.resolutions(), dense, config.table_size, rows, weights)
    return Located(rows, weights, config.levels * config.table_size)


def interpolate(table: ad.Tensor, located: Located) -> ad.Tensor:
    """Trilinearly blended features, shape (P, L*F); differentiable in ``table``."""
    rows, weights = located.rows, located.weights.astype(table.data.dtype, copy=False)
    n, levels, _ = rows.shape
    feats = table.shape[1]
    out = np.empty((n, levels * feats), dtype=table.data.dtype)
    _interp_forward(table.data, rows, weights, out)

    def bw(g):
        grad = np.zeros_like(table.data)
        _interp_backward(np.ascontiguousarray(g, dtype=table.data.dtype), rows, weights, grad)
        return (grad,)

    return ad._make("hash_grid", out, (table,), bw)


def hash_encode(pos, config: HashGridConfig, table: ad.Tensor) -> ad.Tensor:
    """Encode world positions of shape (P, 3) (or a single 3-vector)."""
    pos = np.asarray(pos, dtype=np.float64)
    single = pos.ndim == 1
    out = interpolate(table, locate(pos.reshape(-1, 3), config))
    return out.reshape(-1) if single else out


def hash_encode_reference(pos, config: HashGridConfig, table: ad.Tensor) -> ad.Tensor:
    """Same encoding built only from generic ops (gather, multiply, sum).

    Slow; kept as a cross-check for the fused kernel.
    """
    x = normalize_positions(np.asarray(pos).reshape(-1, 3), config)
    n = x.shape[0]
    levels = []
    for l in range(config.levels):
        res = config.resolution(l)
        scaled = x * res
        base = np.minimum(np.floor(scaled).astype(np.int64), res - 1)
        frac = scaled - base
        corners, weights = [], []
        for corner in range(8):
            bits = np.array([(corner >> d) & 1 for d in range(3)])
            c = base + bits
            if config.is_dense(l):
                slot = c[:, 0] + (res + 1) * (c[:, 1] + (res + 1) * c[:, 2])
            else:
                slot = spatial_hash(c, config.table_size)
            corners.append(l * config.table_size + slot)
            weights.append(np.prod(np.where(bits, frac, 1.0 - frac), axis=1))
        rows = np.stack(corners, axis=1)
        w = ad.Tensor(np.stack(weights, axis=1)[..., None])
        feats = ad.gather(table, rows)
        levels.append(ad.sum_reduce(ad.multiply(feats, w), axis=1))
    return ad.concatenate(levels, axis=1).reshape(n, -1)


def freq_encode(v, config: FreqEncodingConfig) -> np.ndarray:
    """Sinusoidal features of unit direction(s) ``v``.

    Per frequency ``2**k`` and per component ``x``: ``[sin(2**k x), cos(2**k x)]``,
    prefixed by ``v`` itself when ``include_input`` is set.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    v = v.reshape(-1, 3)
    parts = [v] if config.include_input else []
    for k in range(config.num_frequencies):
        s = (2.0 ** k) * v
        parts.append(np.stack([np.sin(s), np.cos(s)], axis=-1).reshape(len(v), 6))
    out = np.concatenate(parts, axis=1) if parts else np.zeros((len(v), 0))
    out = out.astype(ad.default_dtype())
    return out[0] if single else out
