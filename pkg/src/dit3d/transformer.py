"""adaLN-Zero transformer blocks with global or 3D window attention."""

from __future__ import annotations

import math

from .errors import ConfigError, DimensionError
from .params import Scope, linear
from .tensor import Tensor, gelu, layer_norm, matmul, silu, softmax

NORM_EPS = 1e-6


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[B, L, D]`` to ``[B, H, L, D/H]``."""
    B, L, D = x.shape
    if D % heads:
        raise DimensionError(f"hidden size {D} not divisible by {heads} heads")
    return x.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def attend(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_h)) v per head; returns ``(output, probabilities)``."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * scale
    probs = softmax(scores, axis=-1)
    return matmul(probs, v), probs


def reduce_tokens(x: Tensor, window: int, p: Scope) -> Tensor:
    """Group ``window**3`` consecutive tokens and project each group back to ``D``."""
    B, L, D = x.shape
    group = window**3
    if L % group:
        raise ConfigError(f"token count {L} not divisible by window volume {group}")
    return linear(x.reshape(B, L // group, group * D), p)


def _qkv(x: Tensor, p: Scope) -> tuple[Tensor, Tensor, Tensor]:
    D = x.shape[-1]
    qkv = linear(x, p.scope("qkv"))
    return qkv[:, :, :D], qkv[:, :, D : 2 * D], qkv[:, :, 2 * D :]


def attention(x: Tensor, p: Scope, heads: int, return_probs: bool = False):
    """Global multi-head self-attention over ``[B, L, D]`` tokens."""
    q, k, v = _qkv(x, p)
    out, probs = attend(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads))
    out = linear(merge_heads(out), p.scope("proj"))
    return (out, probs) if return_probs else out


def window_attention(x: Tensor, p: Scope, heads: int, window: int, return_probs: bool = False):
    """Attention whose keys and values are reduced by ``window**3``.

    Queries keep all ``L`` tokens; the score matrix per head is
    ``L x L / window**3``. Q/K/V/output projections use the same names as
    :func:`attention`; only ``reduce_k``/``reduce_v`` are extra.
    """
    q, k, v = _qkv(x, p)
    k = reduce_tokens(k, window, p.scope("reduce_k"))
    v = reduce_tokens(v, window, p.scope("reduce_v"))
    out, probs = attend(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads))
    out = linear(merge_heads(out), p.scope("proj"))
    return (out, probs) if return_probs else out


def modulate(h: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return h * (scale + 1.0) + shift


def _chunks(mod: Tensor, n: int) -> list[Tensor]:
    B, width = mod.shape
    D = width // n
    return [mod[:, i * D : (i + 1) * D].reshape(B, 1, D) for i in range(n)]


def mlp(x: Tensor, p: Scope) -> Tensor:
    return linear(gelu(linear(x, p.scope("fc1"))), p.scope("fc2"))


def dit_block(x: Tensor, cond: Tensor, p: Scope, heads: int, window: int | None = None) -> Tensor:
    """One adaLN-Zero block; ``window`` switches the attention to the reduced form."""
    shift1, scale1, gate1, shift2, scale2, gate2 = _chunks(linear(silu(cond), p.scope("adaLN_modulation")), 6)
    h = modulate(layer_norm(x, eps=NORM_EPS), shift1, scale1)
    if window is None:
        a = attention(h, p.scope("attn"), heads)
    else:
        a = window_attention(h, p.scope("attn"), heads, window)
    x = x + gate1 * a
    h = modulate(layer_norm(x, eps=NORM_EPS), shift2, scale2)
    return x + gate2 * mlp(h, p.scope("mlp"))


def final_layer(x: Tensor, cond: Tensor, p: Scope) -> Tensor:
    shift, scale = _chunks(linear(silu(cond), p.scope("adaLN_modulation")), 2)
    h = modulate(layer_norm(x, eps=NORM_EPS), shift, scale)
    return linear(h, p.scope("linear"))


def attention_cost(L: int, D: int, H: int, R: int | None = None) -> dict[str, int]:
    """Analytic score-matrix size and a multiply-add FLOP estimate for one layer."""
    if D % H:
        raise DimensionError(f"hidden size {D} not divisible by {H} heads")
    Lk = L
    reduce_flops = 0
    if R is not None:
        if L % R**3:
            raise ConfigError(f"token count {L} not divisible by window volume {R**3}")
        Lk = L // R**3
        reduce_flops = 2 * 2 * Lk * (D * R**3) * D
    scores = H * L * Lk
    flops = (
        2 * L * D * 3 * D  # qkv projection
        + reduce_flops
        + 2 * L * Lk * D  # q k^T over all heads
        + 2 * L * Lk * D  # probs @ v
        + 2 * L * D * D  # output projection
    )
    return {"score_elements": scores, "flops_estimate": flops}
