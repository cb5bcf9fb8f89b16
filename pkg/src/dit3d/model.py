"""The voxel diffusion transformer noise predictor."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import embed
from .errors import ConfigError
from .params import ParamStore
from .tensor import Tensor, get_dtype
from .transformer import dit_block, final_layer
from .voxel import devoxelize, voxelize

# depth, hidden size, heads
SIZES = {
    "S": (12, 384, 6),
    "B": (12, 768, 12),
    "L": (24, 1008, 16),  # 1024 is not divisible by 6
    "XL": (28, 1152, 16),
}


@dataclass
class ModelConfig:
    depth: int = 12
    hidden: int = 384
    heads: int = 6
    patch: int = 4
    voxel: int = 32
    window: int | None = 4
    window_blocks: tuple[int, ...] | None = None  # None: every 3rd block from 0
    num_classes: int = 1
    T: int = 1000
    mlp_ratio: int = 4
    size: str = "custom"

    def __post_init__(self):
        if self.window_blocks is None:
            self.window_blocks = tuple(range(0, self.depth, 3)) if self.window else ()
        self.window_blocks = tuple(int(i) for i in self.window_blocks)
        self.validate()

    @classmethod
    def from_size(cls, size: str, **overrides) -> "ModelConfig":
        try:
            depth, hidden, heads = SIZES[size]
        except KeyError:
            raise ConfigError(f"unknown model size {size!r}; expected one of {sorted(SIZES)}") from None
        return cls(depth=depth, hidden=hidden, heads=heads, size=size, **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if kw.get("window_blocks") is not None:
            kw["window_blocks"] = tuple(kw["window_blocks"])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_blocks"] = list(self.window_blocks)
        return d

    @property
    def tokens(self) -> int:
        return (self.voxel // self.patch) ** 3

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch**3

    def validate(self) -> None:
        D, H, V, p = self.hidden, self.heads, self.voxel, self.patch
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")
        if D % H:
            raise ConfigError(f"hidden size {D} not divisible by {H} heads")
        if D % 6:
            raise ConfigError(f"hidden size {D} not divisible by 6")
        if V < 2:
            raise ConfigError(f"voxel resolution must be >= 2, got {V}")
        if p < 1 or V % p:
            raise ConfigError(f"voxel size {V} not divisible by patch size {p}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.window_blocks:
            if not self.window:
                raise ConfigError("window blocks given without a window size")
            if self.tokens % self.window**3:
                raise ConfigError(f"token count {self.tokens} not divisible by window volume {self.window ** 3}")
            bad = [i for i in self.window_blocks if not 0 <= i < self.depth]
            if bad:
                raise ConfigError(f"window block ids out of range: {bad}")


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """``(name, shape, init)`` for every parameter, in a stable order."""
    D, P = cfg.hidden, cfg.patch_dim
    out: list[tuple[str, tuple[int, ...], str]] = []

    def lin(prefix, fan_in, fan_out, init="xavier"):
        out.append((f"{prefix}.weight", (fan_in, fan_out), init))
        out.append((f"{prefix}.bias", (fan_out,), "zeros"))

    lin("x_embedder", P, D)
    lin("t_embedder.mlp.0", D, D, "normal")
    lin("t_embedder.mlp.2", D, D, "normal")
    out.append(("y_embedder.embedding_table", (cfg.num_classes + 1, D), "normal"))
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        lin(f"{b}.attn.qkv", D, 3 * D)
        lin(f"{b}.attn.proj", D, D)
        if i in cfg.window_blocks:
            R3 = cfg.window**3
            lin(f"{b}.attn.reduce_k", D * R3, D)
            lin(f"{b}.attn.reduce_v", D * R3, D)
        lin(f"{b}.mlp.fc1", D, cfg.mlp_ratio * D)
        lin(f"{b}.mlp.fc2", cfg.mlp_ratio * D, D)
        lin(f"{b}.adaLN_modulation", D, 6 * D, "zeros")
    lin("final_layer.adaLN_modulation", D, 2 * D, "zeros")
    lin("final_layer.linear", D, P, "zeros")
    return out


def init_params(cfg: ModelConfig, seed: int = 0, mode: str = "default", dtype=None) -> ParamStore:
    """Build a parameter store.

    ``mode``: ``"default"`` (xavier linears, N(0, 0.02) embeddings, zeroed
    modulation heads and decoder), ``"random"`` (every entry N(0, 0.3), used
    for gradient checks where zero-init would hide most of the graph), or
    ``"meta"`` (read-only zero views that carry shapes but no memory).
    """
    dtype = dtype or get_dtype()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, init in param_shapes(cfg):
        if mode == "meta":
            data = np.broadcast_to(np.zeros((), dtype=dtype), shape)
        elif mode == "random":
            data = rng.normal(0.0, 0.3, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "normal":
            data = rng.normal(0.0, 0.02, size=shape)
        elif init == "xavier":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        else:
            raise ConfigError(f"unknown init {init!r}")
        store.add(name, Tensor(data, dtype=dtype))
    return store


@dataclass
class NoisePredictor:
    """Maps noisy points ``x_t`` at step ``t`` (and label ``y``) to predicted noise.

    voxelize -> patchify -> patch embed + 3D positions -> blocks ->
    modulated final norm -> per-token decode -> unpatchify -> devoxelize.
    """

    config: ModelConfig
    params: ParamStore = None
    seed: int = 0
    init: str = "default"
    pos_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.config, self.seed, self.init)
        self.pos_table = embed.pos_embed_3d(self.config.voxel, self.config.patch, self.config.hidden)

    @property
    def dtype(self):
        first = next(iter(self.params.entries.values()), None)
        return first.data.dtype if first is not None else get_dtype()

    def astype(self, dtype) -> "NoisePredictor":
        """Cast every parameter in place; returns ``self``."""
        for t in self.params.entries.values():
            t.data = t.data.astype(dtype)
        return self

    def conditioning(self, t, y, batch: int) -> Tensor:
        cfg = self.config
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
        ids = embed.class_ids(y, cfg.num_classes, batch)
        if ids.shape != (batch,):
            ids = np.broadcast_to(ids, (batch,))
        t_emb = embed.timestep_embed(t, self.params.scope("t_embedder"), cfg.hidden, cfg.T)
        c_emb = embed.class_embed(ids, self.params["y_embedder.embedding_table"])
        return t_emb + c_emb

    def forward(self, x_t, t, y=None, probe: list | None = None) -> Tensor:
        """Predicted noise for ``x_t`` of shape ``[N, 3]`` or ``[B, N, 3]``.

        ``probe``, when given, receives ``(block_index, tokens, cond)`` for
        every block input.
        """
        cfg = self.config
        pts = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=np.float64)
        squeeze = pts.ndim == 2
        if squeeze:
            pts = pts[None]
        B = pts.shape[0]
        dtype = self.dtype
        feats = Tensor(pts, dtype=dtype)
        grid = voxelize(pts, cfg.voxel, features=feats, clamp=True)
        tokens = embed.patchify(grid.values, cfg.patch)
        h = embed.patch_embed(tokens, self.params.scope("x_embedder"))
        h = h + Tensor(self.pos_table, dtype=dtype)
        cond = self.conditioning(t, y, B)
        for i in range(cfg.depth):
            if probe is not None:
                probe.append((i, h, cond))
            window = cfg.window if i in cfg.window_blocks else None
            h = dit_block(h, cond, self.params.scope(f"blocks.{i}"), cfg.heads, window)
        out = final_layer(h, cond, self.params.scope("final_layer"))
        vox = embed.unpatchify(out, cfg.voxel, cfg.patch, 3)
        eps = devoxelize(vox, pts, clamp=True)
        return eps.reshape(eps.shape[1:]) if squeeze else eps

    predict_noise = forward

    def predict_noise_cfg(self, x_t, t, y, w: float) -> Tensor:
        """Guided prediction ``(1 + w) * eps(y) - w * eps(null)``.

        Rows whose label is already null return the unconditional prediction.
        """
        if w < 0:
            raise ConfigError("guidance scale must be >= 0")
        cond = self.forward(x_t, t, y)
        if w == 0:
            return cond
        batched = cond.ndim == 3
        B = cond.shape[0] if batched else 1
        ids = embed.class_ids(y, self.config.num_classes, B)
        null = np.broadcast_to(ids == self.config.num_classes, (B,))
        if null.all():
            return cond
        uncond = self.forward(x_t, t, None)
        c, u = cond.data, uncond.data
        mixed = c * (1.0 + w) - u * w
        if null.any():
            mask = null[:, None, None] if batched else null[0]
            mixed = np.where(mask, u, mixed)
        return Tensor(mixed, dtype=c.dtype)

    def count_params(self, trainable_only: bool = False) -> int:
        return self.params.count(trainable_only)
