"""Adam / AdamW and learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: OptimizerState, grads: Mapping[str, np.ndarray] | None = None):
    """One bias-corrected Adam update, in place.

    With ``state.weight_decay > 0`` the decay is decoupled (AdamW): parameters
    shrink by ``lr * weight_decay`` before the adaptive step. Gradients default
    to each parameter's ``.grad``; a missing gradient counts as zero.
    """
    if state.t < 0:
        raise ValueError("optimizer step counter must be non-negative")
    updates = {}
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        updates[name] = g

    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = updates[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(p.data.dtype, copy=False)
        state.v[name] = v.astype(p.data.dtype, copy=False)
        data = p.data
        if state.weight_decay > 0:
            data = data - state.lr * state.weight_decay * data
        step = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data = (data - step).astype(p.data.dtype, copy=False)


class PlateauSchedule:
    """Divide the learning rate by ``1/factor`` when validation loss stalls.

    ``patience`` defaults to 15% of the run (30 of 200 epochs in spirit).
    """

    def __init__(self, lr: float = 1e-3, factor: float = 0.1, patience: int = 10, min_lr: float = 1e-7):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    @classmethod
    def for_epochs(cls, epochs: int, lr: float = 1e-3):
        return cls(lr=lr, patience=max(1, math.ceil(0.15 * epochs)))

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.bad_epochs = 0
        return self.lr


class ExponentialSchedule:
    """Smooth decay dividing lr (and weight decay) by 10 every ``period`` epochs."""

    def __init__(self, lr: float = 1e-3, weight_decay: float = 1e-4, period: int = 100, stop_epoch: int | None = None):
        self.lr0 = lr
        self.wd0 = weight_decay
        self.period = period
        self.stop_epoch = stop_epoch
        self.epoch = 0
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, val_loss: float | None = None) -> float:
        self.epoch += 1
        e = self.epoch if self.stop_epoch is None else min(self.epoch, self.stop_epoch)
        f = 10.0 ** (-e / self.period)
        self.lr = self.lr0 * f
        self.weight_decay = self.wd0 * f
        return self.lr
