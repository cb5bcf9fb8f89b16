"""Patch tokens, 3D sin-cos positions and time/class conditioning."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .params import Scope, linear
from .tensor import Tensor, embedding, get_dtype, silu


def _check_patch(V: int, p: int) -> int:
    if p < 1 or V % p:
        raise ConfigError(f"voxel size {V} is not divisible by patch size {p}")
    return V // p


def patchify(grid: Tensor, p: int) -> Tensor:
    """``[B, V, V, V, C]`` (or unbatched) grid to ``[B, L, p**3 * C]`` tokens.

    Tokens are in raster order over the ``(V/p)**3`` patch grid; inside a
    patch, values are flattened as (x, y, z, channel) with channel fastest.
    """
    squeeze = grid.ndim == 4
    g = grid.reshape((1,) + grid.shape) if squeeze else grid
    if g.ndim != 5:
        raise DimensionError(f"grid must be [B, V, V, V, C], got {grid.shape}")
    B, V, C = g.shape[0], g.shape[1], g.shape[-1]
    n = _check_patch(V, p)
    t = g.reshape(B, n, p, n, p, n, p, C).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    t = t.reshape(B, n**3, p**3 * C)
    return t.reshape(t.shape[1:]) if squeeze else t


def unpatchify(tokens: Tensor, V: int, p: int, channels: int = 3) -> Tensor:
    """Exact inverse of :func:`patchify`."""
    n = _check_patch(V, p)
    squeeze = tokens.ndim == 2
    t = tokens.reshape((1,) + tokens.shape) if squeeze else tokens
    B = t.shape[0]
    if t.shape[1:] != (n**3, p**3 * channels):
        raise DimensionError(f"tokens {tokens.shape} do not match V={V}, p={p}, C={channels}")
    g = t.reshape(B, n, n, n, p, p, p, channels).transpose(0, 1, 4, 2, 5, 3, 6, 7)
    g = g.reshape(B, V, V, V, channels)
    return g.reshape(g.shape[1:]) if squeeze else g


def patch_embed(patches: Tensor, p: Scope) -> Tensor:
    """Per-token affine map; identical to a kernel=stride=p volumetric conv."""
    return linear(patches, p)


def sincos_1d(positions: np.ndarray, width: int) -> np.ndarray:
    """``[n, width]`` as ``[sin(pos * w_k), cos(pos * w_k)]`` over ``width/2`` frequencies."""
    if width % 2:
        raise ConfigError(f"sin-cos width must be even, got {width}")
    half = width // 2
    omega = 1.0 / 10000 ** (np.arange(half, dtype=np.float64) / half)
    args = np.outer(np.asarray(positions, dtype=np.float64), omega)
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def pos_embed_3d(V: int, p: int, D: int) -> np.ndarray:
    """Fixed ``[L, D]`` table: per-axis sin-cos embeddings of width ``D/3``.

    Row ``l`` belongs to patch ``(i, j, k)`` in raster order; channels are
    ``[axis-i | axis-j | axis-k]``.
    """
    if D % 6:
        raise ConfigError(f"hidden size {D} must be divisible by 6 for 3D positions")
    n = _check_patch(V, p)
    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    w = D // 3
    return np.concatenate(
        [sincos_1d(i.reshape(-1), w), sincos_1d(j.reshape(-1), w), sincos_1d(k.reshape(-1), w)], axis=1
    )


def timestep_frequencies(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal base embedding ``[cos | sin]`` of integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros_like(emb[:, :1])], axis=1)
    return emb


def timestep_embed(t, p: Scope, dim: int, T: int) -> Tensor:
    """Base embedding followed by ``Linear -> SiLU -> Linear``; returns ``[B, D]``."""
    t = np.atleast_1d(np.asarray(t))
    if t.size and (t.min() < 0 or t.max() >= T):
        raise ContractError(f"timestep outside [0, {T})")
    base = Tensor(timestep_frequencies(t, dim), dtype=get_dtype())
    h = silu(linear(base, p.scope("mlp.0")))
    return linear(h, p.scope("mlp.2"))


def class_ids(y, num_classes: int, batch: int | None = None) -> np.ndarray:
    """Normalise labels to an int array; ``None`` entries become the null row ``M``."""
    if y is None or np.isscalar(y):
        y = [y] * (batch or 1)
    ids = np.array([num_classes if v is None else int(v) for v in y], dtype=np.int64)
    bad = (ids < 0) | (ids > num_classes)
    if bad.any():
        raise ContractError(f"class id out of range [0, {num_classes}) or NULL")
    return ids


def class_embed(y, table: Tensor) -> Tensor:
    """Row lookup; ``None`` selects the last (null) row."""
    M = table.shape[0] - 1
    ids = class_ids(y, M)
    return embedding(table, ids)


def drop_labels(ids: np.ndarray, num_classes: int, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each label by the null id with probability ``prob``."""
    drop = rng.random(len(ids)) < prob
    return np.where(drop, num_classes, ids)
