"""AdamW with decoupled weight decay, plus the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class OptimizerState:
    """Adam moments per parameter plus the decoupled-decay settings.

    The weight decay is applied as a separate shrink after the gradient
    step; it never enters the moment estimates.
    """

    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """Apply one AdamW update to `params` in place.

    Each parameter gets the bias-corrected Adam step on its gradient and is
    then scaled by (1 - lr * weight_decay).
    """
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(name, p.shape, "missing gradient")
        if grads[name].shape != p.shape:
            raise ShapeError(name, p.shape, grads[name].shape)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        if state.weight_decay != 0.0:
            p -= state.lr * state.weight_decay * p


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: the rate is multiplied by `factor` every `interval` epochs."""

    initial: float = 1e-4
    factor: float = 0.5
    interval: int = 50


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate in effect at the given zero-based epoch."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return schedule.initial * schedule.factor ** (epoch // schedule.interval)
