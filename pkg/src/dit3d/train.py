"""Adam training loop for the noise predictor."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import DiffusionSchedule, loss_simple
from .embed import class_ids, drop_labels
from .errors import NumericError
from .model import NoisePredictor
from .tensor import backward

log = logging.getLogger(__name__)


class Adam:
    """Adam over the trainable entries of a :class:`ParamStore`; frozen entries are never touched."""

    def __init__(self, store, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for t in self.store.entries.values():
            t.grad = None

    def prepare(self) -> None:
        """Flag exactly the trainable tensors as requiring grad."""
        for name, t in self.store.items():
            t.requires_grad = name in self.store.trainable

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.store.trainable_tensors():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


@dataclass
class TrainSettings:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    cfg_dropout: float = 0.1
    seed: int = 0
    max_steps: int | None = None


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0

    @property
    def initial(self) -> float:
        return self.epoch_loss[0]

    @property
    def final(self) -> float:
        return self.epoch_loss[-1]


def train(model: NoisePredictor, schedule: DiffusionSchedule, clouds: Sequence[np.ndarray], labels: Sequence[int],
          settings: TrainSettings, log_file=None, on_epoch: Callable[[int, float], None] | None = None,
          optimizer: Adam | None = None) -> TrainHistory:
    """Minimise the simple noise-prediction loss with uniformly drawn timesteps.

    ``log_file`` (an open text stream) receives one JSON object per epoch.
    Raises :class:`NumericError` as soon as a loss is not finite.
    """
    rng = np.random.default_rng(settings.seed)
    x_all = np.stack([np.asarray(c, dtype=np.float64) for c in clouds])
    y_all = class_ids(list(labels), model.config.num_classes)
    opt = optimizer or Adam(model.params, lr=settings.lr)
    opt.prepare()
    hist = TrainHistory()
    start = time.perf_counter()
    n = len(x_all)
    T = len(schedule)
    for epoch in range(settings.epochs):
        perm = rng.permutation(n)
        losses = []
        for s in range(0, n, settings.batch_size):
            idx = perm[s : s + settings.batch_size]
            x0 = x_all[idx]
            y = drop_labels(y_all[idx], model.config.num_classes, settings.cfg_dropout, rng)
            t = rng.integers(0, T, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            opt.zero_grad()
            loss = loss_simple(model, schedule, x0, t, y, eps)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss is {value} at epoch {epoch}, step {hist.steps}")
            backward(loss)
            opt.step()
            hist.steps += 1
            hist.step_loss.append(value)
            losses.append(value)
            if settings.max_steps is not None and hist.steps >= settings.max_steps:
                break
        epoch_loss = float(np.mean(losses))
        hist.epoch_loss.append(epoch_loss)
        if log_file is not None:
            log_file.write(json.dumps({"epoch": epoch, "loss": epoch_loss, "steps": hist.steps,
                                       "seconds": round(time.perf_counter() - start, 3)}) + "\n")
            log_file.flush()
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        log.debug("epoch %d loss %.5f", epoch, epoch_loss)
        if settings.max_steps is not None and hist.steps >= settings.max_steps:
            break
    hist.seconds = time.perf_counter() - start
    return hist
