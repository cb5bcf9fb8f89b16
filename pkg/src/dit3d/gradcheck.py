"""Finite-difference gradient suite over every differentiable op and the tiny model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import embed, tensor as tc, transformer, voxel
from .diffusion import loss_simple, make_schedule
from .model import ModelConfig, NoisePredictor
from .params import ParamStore
from .tensor import Tensor, grad_errors, precision

TINY = dict(depth=2, hidden=12, heads=2, patch=4, voxel=8, window=2, window_blocks=(0,), num_classes=2)


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


def _rand(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), dtype=np.float64)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar with a non-trivial gradient: sum(out * w)."""
    return tc.sum(out * Tensor(w, dtype=np.float64))


def _scope(rng, prefix: str, shapes: dict[str, tuple]) -> ParamStore:
    store = ParamStore()
    for name, shape in shapes.items():
        store.add(f"{prefix}.{name}" if prefix else name, _rand(rng, *shape, scale=0.3))
    return store


def _op_checks() -> list[tuple[str, float, Callable[[np.random.Generator], tuple]]]:
    """``(name, threshold, build)``; ``build(rng) -> (f, inputs)``."""
    checks = []

    def add(name, thr=1e-4):
        def deco(build):
            checks.append((name, thr, build))
            return build
        return deco

    @add("matmul", 1e-6)
    def _(rng):
        A, B = _rand(rng, 5, 7), _rand(rng, 7, 3)
        return (lambda a, b: tc.sum(tc.matmul(a, b))), [A, B]

    @add("matmul_batched")
    def _(rng):
        A, B = _rand(rng, 2, 3, 4, 5), _rand(rng, 2, 3, 5, 2)
        w = rng.normal(size=(2, 3, 4, 2))
        return (lambda a, b: _weighted(tc.matmul(a, b), w)), [A, B]

    @add("matmul_shared_weight")
    def _(rng):
        A, B = _rand(rng, 2, 4, 5), _rand(rng, 5, 3)
        w = rng.normal(size=(2, 4, 3))
        return (lambda a, b: _weighted(tc.matmul(a, b), w)), [A, B]

    @add("softmax", 1e-6)
    def _(rng):
        X = _rand(rng, 4, 6, scale=2.0)
        w = rng.normal(size=(4, 6))
        return (lambda x: _weighted(tc.softmax(x, -1), w)), [X]

    @add("layer_norm", 1e-5)
    def _(rng):
        X, g, b = _rand(rng, 3, 5, 8), _rand(rng, 8), _rand(rng, 8)
        w = rng.normal(size=(3, 5, 8))
        return (lambda x, g, b: _weighted(tc.layer_norm(x, g, b), w)), [X, g, b]

    @add("add_broadcast")
    def _(rng):
        X, b = _rand(rng, 2, 3, 4), _rand(rng, 2, 1, 4)
        w = rng.normal(size=(2, 3, 4))
        return (lambda x, b: _weighted(x + b, w)), [X, b]

    @add("sub")
    def _(rng):
        X, Y = _rand(rng, 3, 4), _rand(rng, 4)
        w = rng.normal(size=(3, 4))
        return (lambda x, y: _weighted(x - y, w)), [X, Y]

    @add("mul_broadcast")
    def _(rng):
        X, s = _rand(rng, 2, 3, 4), _rand(rng, 1)
        w = rng.normal(size=(2, 3, 4))
        return (lambda x, s: _weighted(x * s, w)), [X, s]

    @add("gelu")
    def _(rng):
        X = _rand(rng, 4, 5, scale=2.0)
        w = rng.normal(size=(4, 5))
        return (lambda x: _weighted(tc.gelu(x), w)), [X]

    @add("silu")
    def _(rng):
        X = _rand(rng, 4, 5, scale=2.0)
        w = rng.normal(size=(4, 5))
        return (lambda x: _weighted(tc.silu(x), w)), [X]

    @add("reshape_transpose")
    def _(rng):
        X = _rand(rng, 2, 3, 4)
        w = rng.normal(size=(4, 6))
        return (lambda x: _weighted(x.transpose(2, 0, 1).reshape(4, 6), w)), [X]

    @add("sum_mean")
    def _(rng):
        X = _rand(rng, 3, 4)
        w = rng.normal(size=(3,))
        return (lambda x: _weighted(tc.mean(x, axis=1), w) + tc.sum(x * x)), [X]

    @add("mse")
    def _(rng):
        A, B = _rand(rng, 6, 3), _rand(rng, 6, 3)
        return (lambda a, b: tc.mse(a, b)), [A, B]

    @add("getitem")
    def _(rng):
        X = _rand(rng, 3, 8)
        w = rng.normal(size=(3, 3))
        return (lambda x: _weighted(x[:, 2:5], w)), [X]

    @add("embedding")
    def _(rng):
        table = _rand(rng, 4, 5)
        ids = np.array([0, 3, 3, 1])
        w = rng.normal(size=(4, 5))
        return (lambda tb: _weighted(tc.embedding(tb, ids), w)), [table]

    @add("voxelize")
    def _(rng):
        pts = rng.uniform(-1, 1, size=(20, 3))
        feats = _rand(rng, 20, 3)
        w = rng.normal(size=(6, 6, 6, 3))
        return (lambda f: _weighted(voxel.voxelize(pts, 6, features=f).values, w)), [feats]

    @add("devoxelize")
    def _(rng):
        pts = rng.uniform(-1, 1, size=(20, 3))
        grid = _rand(rng, 6, 6, 6, 3)
        w = rng.normal(size=(20, 3))
        return (lambda g: _weighted(voxel.devoxelize(g, pts), w)), [grid]

    @add("voxelize_devoxelize")
    def _(rng):
        pts = rng.uniform(-1, 1, size=(2, 30, 3))
        feats = _rand(rng, 2, 30, 3)
        w = rng.normal(size=(2, 30, 3))
        return (lambda f: _weighted(voxel.devoxelize(voxel.voxelize(pts, 5, features=f), pts), w)), [feats]

    @add("patchify_unpatchify")
    def _(rng):
        g = _rand(rng, 2, 4, 4, 4, 3)
        w1 = rng.normal(size=(2, 8, 24))
        w2 = rng.normal(size=(2, 4, 4, 4, 3))

        def f(x):
            tok = embed.patchify(x, 2)
            return _weighted(tok, w1) + _weighted(embed.unpatchify(tok * tok, 4, 2), w2)

        return f, [g]

    @add("softmax_matmul", 1e-5)
    def _(rng):
        Q, K, V = _rand(rng, 5, 4), _rand(rng, 6, 4), _rand(rng, 6, 3)
        w = rng.normal(size=(5, 3))
        return (lambda q, k, v: _weighted(tc.matmul(tc.softmax(tc.matmul(q, k.T) * 0.5), v), w)), [Q, K, V]

    def _attn_store(rng, D, R=None):
        shapes = {"qkv.weight": (D, 3 * D), "qkv.bias": (3 * D,), "proj.weight": (D, D), "proj.bias": (D,)}
        if R:
            shapes.update({"reduce_k.weight": (D * R**3, D), "reduce_k.bias": (D,),
                           "reduce_v.weight": (D * R**3, D), "reduce_v.bias": (D,)})
        return _scope(rng, "attn", shapes)

    @add("attention")
    def _(rng):
        store = _attn_store(rng, 6)
        X = _rand(rng, 2, 8, 6)
        w = rng.normal(size=(2, 8, 6))
        names = store.names()
        params = [store[n] for n in names]

        def f(x, *ps):
            return _weighted(transformer.attention(x, store.scope("attn"), 2), w)

        return f, [X] + params

    @add("window_attention")
    def _(rng):
        store = _attn_store(rng, 6, R=2)
        X = _rand(rng, 1, 16, 6)
        w = rng.normal(size=(1, 16, 6))
        params = [store[n] for n in store.names()]

        def f(x, *ps):
            return _weighted(transformer.window_attention(x, store.scope("attn"), 2, 2), w)

        return f, [X] + params

    @add("dit_block")
    def _(rng):
        D = 6
        store = _attn_store(rng, D, R=2)
        extra = _scope(rng, "", {"mlp.fc1.weight": (D, 4 * D), "mlp.fc1.bias": (4 * D,),
                                 "mlp.fc2.weight": (4 * D, D), "mlp.fc2.bias": (D,),
                                 "adaLN_modulation.weight": (D, 6 * D), "adaLN_modulation.bias": (6 * D,)})
        for n, t in extra.items():
            store.add(n, t)
        X, c = _rand(rng, 1, 8, D), _rand(rng, 1, D)
        w = rng.normal(size=(1, 8, D))
        params = [store[n] for n in store.names()]

        def f(x, cond, *ps):
            return _weighted(transformer.dit_block(x, cond, store.scope(""), 2, window=2), w)

        return f, [X, c] + params

    @add("timestep_embed")
    def _(rng):
        D = 8
        store = _scope(rng, "t", {"mlp.0.weight": (D, D), "mlp.0.bias": (D,),
                                  "mlp.2.weight": (D, D), "mlp.2.bias": (D,)})
        w = rng.normal(size=(3, D))
        params = [store[n] for n in store.names()]

        def f(*ps):
            return _weighted(embed.timestep_embed([0, 10, 999], store.scope("t"), D, 1000), w)

        return f, params

    return checks


def tiny_model(seed: int = 0) -> NoisePredictor:
    with precision("float64"):
        return NoisePredictor(ModelConfig(**TINY), seed=seed, init="random")


def full_model_check(seed: int = 0, max_entries: int | None = None) -> float:
    """Loss gradient w.r.t. every parameter of the tiny model (V=8, p=4, D=12, H=2, 2 blocks, N=16)."""
    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    sched = make_schedule()
    x0 = rng.uniform(-0.9, 0.9, size=(2, 16, 3))
    eps = rng.standard_normal(x0.shape)
    t = np.array([50, 400])
    y = np.array([0, 2])
    names = model.params.names()
    params = [model.params[n] for n in names]

    def f(*ps):
        return loss_simple(model, sched, x0, t, y, eps)

    return max(grad_errors(f, params, max_entries=max_entries, seed=seed))


def run_suite(full_model: bool = False, seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    with precision("float64"):
        for name, thr, build in _op_checks():
            if only and name not in only:
                continue
            start = time.perf_counter()
            rng = np.random.default_rng(seed)
            f, inputs = build(rng)
            err = max(grad_errors(f, inputs))
            results.append(CheckResult(name, err, thr, time.perf_counter() - start))
        if full_model and (not only or "full_model" in only):
            start = time.perf_counter()
            err = full_model_check(seed)
            results.append(CheckResult("full_model", err, 1e-4, time.perf_counter() - start))
    return results
