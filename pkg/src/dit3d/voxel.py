"""Trilinear splatting of point clouds onto dense grids and the inverse gather.

Point coordinates live in ``[-1, 1]`` per axis. A coordinate ``x`` maps to the
continuous grid coordinate ``g = (x + 1) / 2 * (V - 1)``, so cell centres sit
at integer ``g``. Grid axes are ordered (x, y, z) and flattened row-major.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

# corner order used for every splat/gather: (dx, dy, dz), dz fastest
CORNERS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)

# grid coordinates this close to an integer are snapped onto the cell centre
_SNAP = 1e-9


@dataclass
class PointCloud:
    """``[N, 3]`` coordinates, clipped into ``[-1, 1]`` at construction."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DimensionError(f"point cloud must be [N, 3], got {pts.shape}")
        if pts.shape[0] < 1:
            raise ContractError("point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ContractError("point cloud has non-finite coordinates")
        self.points = np.clip(pts, -1.0, 1.0)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class VoxelGrid:
    values: Tensor  # [..., V, V, V, C], weight-normalised
    weights: np.ndarray  # [..., V, V, V] accumulated splat mass

    @property
    def resolution(self) -> int:
        return self.weights.shape[-1]


def grid_coords(points: np.ndarray, V: int, clamp: bool = False) -> np.ndarray:
    """Continuous grid coordinates for ``points`` (float64)."""
    if V < 2:
        raise ConfigError(f"voxel resolution must be >= 2, got {V}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise DimensionError(f"points must have 3 coordinates, got shape {pts.shape}")
    if clamp:
        pts = np.clip(pts, -1.0, 1.0)
    elif np.any(np.abs(pts) > 1.0):
        raise ContractError("point coordinates outside [-1, 1]; clip on ingestion or use clamp=True")
    g = (pts + 1.0) / 2.0 * (V - 1)
    r = np.rint(g)
    return np.where(np.abs(g - r) <= _SNAP, r, g)


def trilinear_stencil(points: np.ndarray, V: int, clamp: bool = False):
    """Flat cell indices and weights of the 8 corners around each point.

    Returns ``(idx, w)`` with shapes ``points.shape[:-1] + (8,)``; indices are
    into a row-major ``V**3`` grid.
    """
    g = grid_coords(points, V, clamp)
    base = np.clip(np.floor(g), 0, V - 2).astype(np.int64)
    frac = g - base
    cells = base[..., None, :] + CORNERS  # [..., 8, 3]
    idx = (cells[..., 0] * V + cells[..., 1]) * V + cells[..., 2]
    axis_w = np.where(CORNERS == 1, frac[..., None, :], 1.0 - frac[..., None, :])
    w = axis_w[..., 0] * axis_w[..., 1] * axis_w[..., 2]
    return idx, w


def _batched(points: np.ndarray):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        return pts[None], True
    if pts.ndim != 3:
        raise DimensionError(f"points must be [N, 3] or [B, N, 3], got {pts.shape}")
    return pts, False


def voxelize(points, V: int, features: Tensor | None = None, clamp: bool = False) -> VoxelGrid:
    """Splat per-point features (default: the coordinates themselves) onto a grid.

    ``points`` is ``[N, 3]`` or ``[B, N, 3]`` (a :class:`PointCloud` is also
    accepted). Splatting is differentiable with respect to ``features``; the
    grid addressing is treated as constant.
    """
    if isinstance(points, PointCloud):
        points = points.points
    pts, squeeze = _batched(points)
    B, N, _ = pts.shape
    if N < 1:
        raise ContractError("voxelize needs at least one point")
    if features is None:
        features = Tensor(pts if not squeeze else pts[0])
    feat = features.data if not squeeze else features.data[None]
    if feat.shape[:2] != (B, N):
        raise DimensionError(f"features {features.shape} do not match points {np.shape(points)}")
    C = feat.shape[-1]
    idx, w = trilinear_stencil(pts, V, clamp)
    cells = V**3
    flat_idx = (idx + (np.arange(B) * cells)[:, None, None]).reshape(-1)
    w_flat = w.reshape(-1)
    mass = np.bincount(flat_idx, weights=w_flat, minlength=B * cells)
    acc = np.empty((B * cells, C), dtype=np.float64)
    f64 = feat.astype(np.float64, copy=False)
    for c in range(C):
        contrib = (w * f64[:, :, c, None]).reshape(-1)
        acc[:, c] = np.bincount(flat_idx, weights=contrib, minlength=B * cells)
    occupied = mass > 0
    out = np.zeros_like(acc)
    out[occupied] = acc[occupied] / mass[occupied, None]
    dtype = features.data.dtype
    out = out.astype(dtype).reshape((B, V, V, V, C))
    mass_grid = mass.reshape(B, V, V, V)

    # d out[cell] / d f[p] = w[p, corner] / mass[cell]
    safe = np.where(occupied, mass, 1.0)
    norm_w = (w_flat / safe[flat_idx]).reshape(B, N, 8)

    def bw(g):
        gflat = g.reshape(B * cells, C)
        gathered = gflat[flat_idx].reshape(B, N, 8, C)
        gf = np.einsum("bnk,bnkc->bnc", norm_w, gathered).astype(dtype)
        return (gf[0] if squeeze else gf,)

    values = Tensor._make(out[0] if squeeze else out, (features,), bw, "voxelize")
    return VoxelGrid(values=values, weights=mass_grid[0] if squeeze else mass_grid)


def devoxelize(grid, points, clamp: bool = False) -> Tensor:
    """Trilinearly interpolate grid values at ``points``.

    ``grid`` is a :class:`VoxelGrid` or a ``[..., V, V, V, C]`` tensor;
    differentiable with respect to the grid values.
    """
    values = grid.values if isinstance(grid, VoxelGrid) else grid
    if isinstance(points, PointCloud):
        points = points.points
    pts, squeeze = _batched(points)
    vd = values.data[None] if squeeze else values.data
    if vd.ndim != 5 or not (vd.shape[1] == vd.shape[2] == vd.shape[3]):
        raise DimensionError(f"grid values must be [B, V, V, V, C], got {values.shape}")
    B, V, C = vd.shape[0], vd.shape[1], vd.shape[-1]
    if pts.shape[0] != B:
        raise DimensionError(f"grid batch {B} does not match points batch {pts.shape[0]}")
    N = pts.shape[1]
    idx, w = trilinear_stencil(pts, V, clamp)
    cells = V**3
    flat_idx = (idx + (np.arange(B) * cells)[:, None, None]).reshape(-1)
    dtype = vd.dtype
    wd = w.astype(dtype)
    gathered = vd.reshape(B * cells, C)[flat_idx].reshape(B, N, 8, C)
    out = np.einsum("bnk,bnkc->bnc", wd, gathered)

    def bw(g):
        g3 = g[None] if squeeze else g
        contrib = (wd[..., None] * g3[:, :, None, :]).reshape(-1, C)
        full = np.zeros((B * cells, C), dtype=dtype)
        np.add.at(full, flat_idx, contrib)
        full = full.reshape(vd.shape)
        return (full[0] if squeeze else full,)

    return Tensor._make(out[0] if squeeze else out, (values,), bw, "devoxelize")
