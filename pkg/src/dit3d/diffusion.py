"""DDPM schedule, forward corruption, simple loss and ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, mse, no_grad


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step tables, all float64, indexed ``0 .. len-1``.

    ``timesteps[i]`` is the model timestep for table row ``i``; it is
    ``arange(T)`` for a full schedule and a strided subsequence after
    :func:`respace`.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bars_prev: np.ndarray
    posterior_var: np.ndarray
    timesteps: np.ndarray
    T: int

    def __len__(self) -> int:
        return len(self.betas)

    @classmethod
    def from_alpha_bars(cls, alpha_bars: np.ndarray, timesteps: np.ndarray, T: int) -> "DiffusionSchedule":
        alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        alphas = alpha_bars / prev
        betas = 1.0 - alphas
        return cls._build(betas, alphas, alpha_bars, prev, timesteps, T)

    @classmethod
    def _build(cls, betas, alphas, alpha_bars, prev, timesteps, T):
        post = betas * (1.0 - prev) / (1.0 - alpha_bars)
        post[0] = 0.0
        for a in (betas, alphas, alpha_bars, prev, post):
            a.setflags(write=False)
        timesteps = np.asarray(timesteps, dtype=np.int64)
        timesteps.setflags(write=False)
        return cls(betas, alphas, alpha_bars, prev, post, timesteps, T)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> DiffusionSchedule:
    if kind != "linear":
        raise ConfigError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    return DiffusionSchedule._build(betas, alphas, alpha_bars, prev, np.arange(T), T)


def timestep_sequence(T: int, steps: int) -> np.ndarray:
    """Evenly strided increasing subsequence of ``range(T)`` with ``steps`` entries,
    always containing ``0`` and ``T - 1``."""
    if not 1 <= steps <= T:
        raise ConfigError(f"steps must be in [1, {T}], got {steps}")
    if steps == T:
        return np.arange(T)
    if steps == 1:
        return np.array([T - 1])
    seq = np.unique(np.round(np.linspace(0, T - 1, steps)).astype(np.int64))
    return seq


def respace(schedule: DiffusionSchedule, steps: int) -> DiffusionSchedule:
    """Shorter chain visiting a strided subset of steps with consistent ``alpha_bar``."""
    if steps == len(schedule):
        return schedule
    seq = timestep_sequence(len(schedule), steps)
    return DiffusionSchedule.from_alpha_bars(schedule.alpha_bars[seq], schedule.timesteps[seq], schedule.T)


def q_sample(schedule: DiffusionSchedule, x0, t, eps) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` may be per-batch."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= len(schedule)):
        raise ContractError(f"timestep outside [0, {len(schedule)})")
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def loss_simple(model, schedule: DiffusionSchedule, x0, t, y, eps) -> Tensor:
    """Mean squared error between ``eps`` and the prediction at ``q_sample(x0, t, eps)``."""
    x_t = q_sample(schedule, x0, t, eps)
    pred = model.predict_noise(x_t, schedule.timesteps[np.asarray(t)], y)
    return mse(pred, Tensor(eps, dtype=pred.data.dtype))


def posterior_mean(schedule: DiffusionSchedule, x_t, x0, i: int) -> np.ndarray:
    """Closed-form mean of ``q(x_{t-1} | x_t, x0)`` for table row ``i``."""
    ab, abp, a, b = schedule.alpha_bars[i], schedule.alpha_bars_prev[i], schedule.alphas[i], schedule.betas[i]
    return (np.sqrt(abp) * b / (1 - ab)) * np.asarray(x0) + (np.sqrt(a) * (1 - abp) / (1 - ab)) * np.asarray(x_t)


def p_sample_step(model, schedule: DiffusionSchedule, x_t, i: int, y, w: float, z) -> np.ndarray:
    """One ancestral step from table row ``i``; ``z`` is ignored at ``i == 0``.

    ``model`` may also be any callable ``(x_t, t, y, w) -> noise``.
    """
    if not 0 <= i < len(schedule):
        raise ContractError(f"step index {i} outside [0, {len(schedule)})")
    x_t = np.asarray(x_t, dtype=np.float64)
    t_model = int(schedule.timesteps[i])
    B = x_t.shape[0] if x_t.ndim == 3 else None
    t_arg = np.full(B, t_model) if B is not None else t_model
    with no_grad():
        if hasattr(model, "predict_noise_cfg"):
            eps_hat = model.predict_noise_cfg(x_t, t_arg, y, w)
        else:
            eps_hat = model(x_t, t_arg, y, w)
    eps_hat = np.asarray(eps_hat.data if isinstance(eps_hat, Tensor) else eps_hat, dtype=np.float64)
    b, a, ab = schedule.betas[i], schedule.alphas[i], schedule.alpha_bars[i]
    mean = (x_t - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
    if i == 0:
        return mean
    return mean + np.sqrt(schedule.posterior_var[i]) * np.asarray(z, dtype=np.float64)


def sample(model, schedule: DiffusionSchedule, n_points: int, y=None, steps: int | None = None,
           w: float = 0.0, seed: int = 0, count: int | None = None, progress=None) -> np.ndarray:
    """Run the reverse chain from ``N(0, I)``.

    Returns ``[n_points, 3]`` when ``count`` is None, else ``[count, n_points, 3]``.
    Chain ``c`` draws all its noise from its own generator spawned from
    ``seed``, so a chain's output does not depend on what else is in the batch.
    """
    if n_points < 1:
        raise ContractError("n_points must be >= 1")
    steps = len(schedule) if steps is None else steps
    sched = respace(schedule, steps)
    squeeze = count is None
    count = 1 if squeeze else count
    if count < 1:
        raise ContractError("count must be >= 1")
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]
    if isinstance(y, (list, tuple, np.ndarray)):
        labels = list(y)
        if len(labels) != count:
            raise ContractError("one label per chain is required")
    else:
        labels = [y] * count
    x = np.stack([r.standard_normal((n_points, 3)) for r in rngs])
    for i in reversed(range(len(sched))):
        z = np.stack([r.standard_normal((n_points, 3)) for r in rngs]) if i > 0 else None
        x = p_sample_step(model, sched, x, i, labels, w, z)
        if progress is not None:
            progress(len(sched) - i, len(sched))
    return x[0] if squeeze else x
