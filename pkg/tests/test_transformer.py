import math
import time

import numpy as np
import pytest

from dit3d import transformer as tf
from dit3d.errors import ConfigError, DimensionError
from dit3d.params import ParamStore
from dit3d.tensor import Tensor, grad_check, no_grad, precision
from dit3d import tensor as tc


def attn_store(rng, D, R=None, scale=0.3, identity_reduce=False):
    s = ParamStore()
    s.add("attn.qkv.weight", Tensor(rng.normal(0, scale, size=(D, 3 * D))))
    s.add("attn.qkv.bias", Tensor(rng.normal(0, scale, size=3 * D)))
    s.add("attn.proj.weight", Tensor(rng.normal(0, scale, size=(D, D))))
    s.add("attn.proj.bias", Tensor(rng.normal(0, scale, size=D)))
    if R is not None:
        for n in ("reduce_k", "reduce_v"):
            if identity_reduce:
                W, b = np.eye(D * R**3, D), np.zeros(D)
            else:
                W, b = rng.normal(0, scale, size=(D * R**3, D)), rng.normal(0, scale, size=D)
            s.add(f"attn.{n}.weight", Tensor(W))
            s.add(f"attn.{n}.bias", Tensor(b))
    return s


def attention_oracle(x, s, H):
    """Per-element loops over heads, queries and keys."""
    L, D = x.shape
    dh = D // H
    qkv = x @ s["attn.qkv.weight"].data + s["attn.qkv.bias"].data
    q, k, v = qkv[:, :D], qkv[:, D : 2 * D], qkv[:, 2 * D :]
    out = np.zeros((L, D))
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(L):
            scores = [sum(q[i, sl][c] * k[j, sl][c] for c in range(dh)) / math.sqrt(dh) for j in range(L)]
            m = max(scores)
            e = [math.exp(sc - m) for sc in scores]
            z = sum(e)
            for c in range(dh):
                out[i, h * dh + c] = sum(e[j] / z * v[j, sl][c] for j in range(L))
    return out @ s["attn.proj.weight"].data + s["attn.proj.bias"].data


def test_attention_matches_loop_oracle(f64):
    rng = np.random.default_rng(0)
    s = attn_store(rng, 8)
    x = rng.normal(size=(16, 8))
    out = tf.attention(Tensor(x[None]), s.scope("attn"), 2).data[0]
    np.testing.assert_allclose(out, attention_oracle(x, s, 2), rtol=0, atol=1e-10)


def test_single_token(f64):
    rng = np.random.default_rng(1)
    s = attn_store(rng, 6)
    x = rng.normal(size=(1, 1, 6))
    out = tf.attention(Tensor(x), s.scope("attn"), 3).data
    v = (x[0] @ s["attn.qkv.weight"].data + s["attn.qkv.bias"].data)[:, 12:]
    np.testing.assert_allclose(out[0], v @ s["attn.proj.weight"].data + s["attn.proj.bias"].data, rtol=1e-13)


def test_zero_scores_average_values(f64):
    q = Tensor(np.zeros((1, 1, 4, 3)))
    k = Tensor(np.random.default_rng(2).normal(size=(1, 1, 5, 3)))
    v = Tensor(np.random.default_rng(3).normal(size=(1, 1, 5, 3)))
    out, probs = tf.attend(q, k, v)
    np.testing.assert_allclose(out.data[0, 0], np.tile(v.data[0, 0].mean(0), (4, 1)), rtol=1e-13)


def test_window_shapes_l512():
    rng = np.random.default_rng(4)
    s = attn_store(rng, 12, R=4)
    x = Tensor(rng.normal(size=(1, 512, 12)))
    with no_grad():
        out, probs = tf.window_attention(x, s.scope("attn"), 2, 4, return_probs=True)
        _, gprobs = tf.attention(x, s.scope("attn"), 2, return_probs=True)
    assert out.shape == (1, 512, 12)
    assert probs.shape == (1, 2, 512, 8)
    assert gprobs.data[0, 0].size == 64 * probs.data[0, 0].size


def test_window_r1_identity_equals_global(f64):
    rng = np.random.default_rng(5)
    s = attn_store(rng, 8, R=1, identity_reduce=True)
    x = Tensor(rng.normal(size=(2, 10, 8)))
    g = tf.attention(x, s.scope("attn"), 2).data
    w = tf.window_attention(x, s.scope("attn"), 2, 1).data
    assert np.max(np.abs(g - w)) < 1e-6


def test_window_indivisible():
    s = attn_store(np.random.default_rng(6), 6, R=2)
    with pytest.raises(ConfigError):
        tf.window_attention(Tensor(np.zeros((1, 12, 6))), s.scope("attn"), 2, 2)


def test_heads_must_divide():
    s = attn_store(np.random.default_rng(6), 6)
    with pytest.raises(DimensionError):
        tf.attention(Tensor(np.zeros((1, 4, 6))), s.scope("attn"), 4)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    s = attn_store(rng, 12, R=2)
    with no_grad():
        _, p = tf.window_attention(Tensor(rng.normal(size=(1, 64, 12))), s.scope("attn"), 3, 2, return_probs=True)
    np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-6)


def test_global_attention_permutation_equivariant(f64):
    rng = np.random.default_rng(8)
    s = attn_store(rng, 6)
    x = rng.normal(size=(1, 9, 6))
    perm = rng.permutation(9)
    a = tf.attention(Tensor(x), s.scope("attn"), 2).data
    b = tf.attention(Tensor(x[:, perm]), s.scope("attn"), 2).data
    np.testing.assert_allclose(b, a[:, perm], rtol=1e-12, atol=1e-13)


def block_store(rng, D, R=None, zero_mod=False, scale=0.3):
    s = attn_store(rng, D, R, scale=scale)
    s.add("mlp.fc1.weight", Tensor(rng.normal(0, scale, size=(D, 4 * D))))
    s.add("mlp.fc1.bias", Tensor(rng.normal(0, scale, size=4 * D)))
    s.add("mlp.fc2.weight", Tensor(rng.normal(0, scale, size=(4 * D, D))))
    s.add("mlp.fc2.bias", Tensor(rng.normal(0, scale, size=D)))
    mod_w = np.zeros((D, 6 * D)) if zero_mod else rng.normal(0, scale, size=(D, 6 * D))
    mod_b = np.zeros(6 * D) if zero_mod else rng.normal(0, scale, size=6 * D)
    s.add("adaLN_modulation.weight", Tensor(mod_w))
    s.add("adaLN_modulation.bias", Tensor(mod_b))
    return s


def test_zero_modulation_block_is_identity(f64):
    rng = np.random.default_rng(9)
    s = block_store(rng, 6, R=2, zero_mod=True)
    x = rng.normal(size=(2, 8, 6))
    c = rng.normal(size=(2, 6))
    for window in (None, 2):
        assert np.array_equal(tf.dit_block(Tensor(x), Tensor(c), s.scope(""), 2, window).data, x)


def test_zero_cond_is_unconditional_prenorm_block(f64):
    rng = np.random.default_rng(10)
    s = block_store(rng, 6)
    x = Tensor(rng.normal(size=(1, 5, 6)))
    out = tf.dit_block(x, Tensor(np.zeros((1, 6))), s.scope(""), 2).data
    b = s["adaLN_modulation.bias"].data
    sh1, sc1, g1, sh2, sc2, g2 = np.split(b, 6)
    h = tc.layer_norm(x, eps=tf.NORM_EPS).data * (1 + sc1) + sh1
    x1 = x.data + g1 * tf.attention(Tensor(h), s.scope("attn"), 2).data
    h2 = tc.layer_norm(Tensor(x1), eps=tf.NORM_EPS).data * (1 + sc2) + sh2
    x2 = x1 + g2 * tf.mlp(Tensor(h2), s.scope("mlp")).data
    np.testing.assert_allclose(out, x2, rtol=1e-12, atol=1e-12)


def test_block_gradient(f64):
    rng = np.random.default_rng(11)
    s = block_store(rng, 6, R=2)
    x, c = Tensor(rng.normal(size=(1, 8, 6))), Tensor(rng.normal(size=(1, 6)))
    w = Tensor(rng.normal(size=(1, 8, 6)))
    params = [s[n] for n in s.names()]
    assert grad_check(lambda x, c, *ps: tc.sum(tf.dit_block(x, c, s.scope(""), 2, 2) * w), [x, c] + params) < 1e-4


def test_attention_cost_counts():
    assert tf.attention_cost(512, 384, 6)["score_elements"] == 1_572_864
    assert tf.attention_cost(512, 384, 6, 4)["score_elements"] == 24_576
    g, w = tf.attention_cost(512, 384, 6), tf.attention_cost(512, 384, 6, 4)
    assert g["score_elements"] == 64 * w["score_elements"]
    assert w["flops_estimate"] > 0
    with pytest.raises(ConfigError):
        tf.attention_cost(100, 384, 6, 4)


def test_window_attention_faster_at_l4096():
    rng = np.random.default_rng(12)
    L, D, H = 4096, 384, 6
    with precision("float32"):
        s = attn_store(rng, D, R=4, scale=0.05)
        x = Tensor(rng.normal(size=(1, L, D)))

        def best(fn, reps=2):
            times = []
            for _ in range(reps):
                start = time.perf_counter()
                with no_grad():
                    fn()
                times.append(time.perf_counter() - start)
            return min(times)

        t_global = best(lambda: tf.attention(x, s.scope("attn"), H))
        t_window = best(lambda: tf.window_attention(x, s.scope("attn"), H, 4))
    assert t_global / t_window > 4
