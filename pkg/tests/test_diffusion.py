import time

import numpy as np
import pytest

from dit3d.diffusion import (
    loss_simple,
    make_schedule,
    p_sample_step,
    posterior_mean,
    q_sample,
    respace,
    sample,
    timestep_sequence,
)
from dit3d.errors import ConfigError, ContractError
from dit3d.gradcheck import TINY, tiny_model
from dit3d.model import ModelConfig, NoisePredictor
from dit3d.tensor import Tensor

# prod_{i<1000} (1 - beta_i) for the default linear schedule, from a 50-digit mpmath product
ALPHA_BAR_T = 4.035829765375683e-05


@pytest.fixture(scope="module")
def sched():
    return make_schedule()


def test_alpha_bar_oracle(sched):
    assert abs(sched.alpha_bars[-1] - ALPHA_BAR_T) < 1e-12
    assert sched.alpha_bars[0] == 1.0 - 1e-4 == 0.9999


def test_schedule_identities(sched):
    ab, a = sched.alpha_bars, sched.alphas
    assert np.array_equal(ab[1:], ab[:-1] * a[1:])
    np.testing.assert_allclose(ab[1:] / ab[:-1], a[1:], rtol=1e-15)
    assert np.all(np.diff(ab) < 0)
    assert np.all(sched.posterior_var <= sched.betas) and np.all(sched.posterior_var >= 0)
    assert sched.posterior_var[0] == 0.0
    assert np.all((sched.betas > 0) & (sched.betas < 1))
    assert sched.betas[0] == 1e-4 and sched.betas[-1] == 0.02


def test_schedule_is_read_only(sched):
    with pytest.raises(ValueError):
        sched.betas[0] = 0.5


def test_schedule_errors():
    with pytest.raises(ConfigError):
        make_schedule(beta_start=0.1, beta_end=0.01)
    with pytest.raises(ConfigError):
        make_schedule(kind="cosine")


def test_q_sample_trivial(sched):
    x0 = np.random.default_rng(0).uniform(-1, 1, size=(20, 3))
    out = q_sample(sched, x0, 500, np.zeros_like(x0))
    assert np.array_equal(out, np.sqrt(sched.alpha_bars[500]) * x0)
    eps = np.random.default_rng(1).standard_normal(x0.shape)
    assert np.max(np.abs(q_sample(sched, x0, 999, eps) - eps)) <= 7e-3
    with pytest.raises(ContractError):
        q_sample(sched, x0, 1000, eps)


def test_q_sample_moments(sched):
    rng = np.random.default_rng(2)
    n, t, x0 = 100_000, 300, 0.7
    xs = q_sample(sched, np.full(n, x0), t, rng.standard_normal(n))
    mu, var = np.sqrt(sched.alpha_bars[t]) * x0, 1 - sched.alpha_bars[t]
    assert abs(xs.mean() - mu) < 3 * np.sqrt(var / n)
    assert abs(xs.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))


def test_one_step_kernels_compose_to_marginal(sched):
    rng = np.random.default_rng(3)
    n, t, x0 = 100_000, 60, -0.4
    x = np.full(n, x0)
    for i in range(t + 1):
        x = np.sqrt(sched.alphas[i]) * x + np.sqrt(sched.betas[i]) * rng.standard_normal(n)
    mu, var = np.sqrt(sched.alpha_bars[t]) * x0, 1 - sched.alpha_bars[t]
    assert abs(x.mean() - mu) < 3 * np.sqrt(var / n)
    assert abs(x.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))


def test_loss_fresh_model_and_perfect_model(sched):
    m = NoisePredictor(ModelConfig(**TINY))
    rng = np.random.default_rng(4)
    x0 = rng.uniform(-1, 1, size=(4, 2000, 3))
    eps = rng.standard_normal(x0.shape)
    t = np.array([0, 10, 500, 999])
    loss = loss_simple(m, sched, x0, t, None, eps).item()
    assert loss == pytest.approx(np.mean(eps.astype(np.float32) ** 2), rel=1e-5)
    assert abs(loss - 1.0) < 0.05

    class Oracle:
        def predict_noise(self, x_t, t, y):
            return Tensor(eps, dtype=np.float64)

    assert loss_simple(Oracle(), sched, x0, t, None, eps).item() == 0.0


def test_last_step_is_deterministic(sched):
    x = np.random.default_rng(5).normal(size=(10, 3))
    zero = lambda x_t, t, y, w: np.zeros_like(x_t)
    a = p_sample_step(zero, sched, x, 0, None, 0.0, np.random.default_rng(6).normal(size=x.shape))
    b = p_sample_step(zero, sched, x, 0, None, 0.0, None)
    assert np.array_equal(a, b)
    assert np.array_equal(a, x / np.sqrt(sched.alphas[0]))
    with pytest.raises(ContractError):
        p_sample_step(zero, sched, x, 1000, None, 0.0, None)


@pytest.mark.parametrize("i", [1, 37, 500, 999])
def test_step_matches_closed_form_posterior(sched, i):
    rng = np.random.default_rng(i)
    x0 = rng.uniform(-1, 1, size=(30, 3))
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(sched, x0, i, eps)
    true_eps = lambda x, t, y, w: eps
    step = p_sample_step(true_eps, sched, x_t, i, None, 0.0, np.zeros_like(x0))
    np.testing.assert_allclose(step, posterior_mean(sched, x_t, x0, i), rtol=1e-9, atol=1e-12)


def test_step_noise_variance(sched):
    rng = np.random.default_rng(8)
    n, i = 100_000, 250
    x = np.zeros((n, 3))
    zero = lambda x_t, t, y, w: np.zeros_like(x_t)
    mu = p_sample_step(zero, sched, x, i, None, 0.0, np.zeros_like(x))
    out = p_sample_step(zero, sched, x, i, None, 0.0, rng.standard_normal(x.shape))
    d = (out - mu)[:, 0]
    var = sched.posterior_var[i]
    assert abs(d.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))


def test_timestep_sequence_and_respace(sched):
    for steps in (1, 2, 10, 50, 100, 999, 1000):
        seq = timestep_sequence(1000, steps)
        assert len(seq) == steps and seq[-1] == 999 and np.all(np.diff(seq) > 0)
        r = respace(sched, steps)
        assert np.array_equal(r.alpha_bars, sched.alpha_bars[seq])
        np.testing.assert_allclose(np.cumprod(r.alphas), r.alpha_bars, rtol=1e-12)
        assert np.all(r.posterior_var <= r.betas + 1e-15)
    assert timestep_sequence(1000, 10)[0] == 0
    with pytest.raises(ConfigError):
        timestep_sequence(1000, 1001)


def test_sample_determinism_and_batch_independence():
    m = tiny_model(seed=2)
    sched = make_schedule()
    a = sample(m, sched, 20, y=[0, 1, None], steps=10, seed=11, count=3)
    b = sample(m, sched, 20, y=[0, 1, None], steps=10, seed=11, count=3)
    assert a.tobytes() == b.tobytes()
    single = sample(m, sched, 20, y=[0], steps=10, seed=11, count=1)
    np.testing.assert_allclose(single[0], a[0], rtol=1e-10, atol=1e-10)
    assert sample(m, sched, 20, y=0, steps=10, seed=11).shape == (20, 3)


def test_fresh_model_variance_recursion():
    m = NoisePredictor(ModelConfig(**TINY))
    sched = make_schedule()
    for steps in (10, 1000):
        r = respace(sched, steps)
        var = 1.0
        for i in reversed(range(len(r))):
            var = var / r.alphas[i] + r.posterior_var[i]
        x = sample(m, sched, 3000, steps=steps, seed=5).reshape(-1)
        n = x.size
        assert abs(x.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))
        assert abs(x.mean()) < 3 * np.sqrt(var / n)


@pytest.mark.parametrize("steps", [10, 100, 1000])
def test_sampling_runtime(steps):
    m = tiny_model(seed=0)
    start = time.perf_counter()
    out = sample(m, make_schedule(), 64, y=0, steps=steps, seed=0)
    assert time.perf_counter() - start < 60
    assert out.shape == (64, 3) and np.all(np.isfinite(out))
