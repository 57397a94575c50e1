"""AdamW, warmup-cosine learning-rate schedule and global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import Tensor


@dataclass
class OptimizerState:
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState, lr: float) -> None:
    """Apply one decoupled-weight-decay Adam update in place."""
    if lr <= 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    if not state.exp_avg:
        state.exp_avg = [np.zeros_like(p.data) for p in params]
        state.exp_avg_sq = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        denom = np.sqrt(v) / math.sqrt(bias2) + state.eps
        p.data -= (lr / bias1) * m / denom


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    min_lr: float
    warmup_epochs: int
    total_epochs: int

    def __post_init__(self):
        if not (0 < self.min_lr <= self.peak_lr):
            raise ConfigurationError(f"need 0 < min_lr <= peak_lr, got {self.min_lr}, {self.peak_lr}")
        if not (0 < self.warmup_epochs < self.total_epochs):
            raise ConfigurationError(
                f"need 0 < warmup_epochs < total_epochs, got {self.warmup_epochs}, {self.total_epochs}"
            )


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Linear ramp from 0 over the warmup, then cosine decay reaching min_lr on the last epoch."""
    s = schedule
    if not 0 <= epoch < s.total_epochs:
        raise UsageError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.warmup_epochs:
        return s.peak_lr * epoch / s.warmup_epochs
    span = s.total_epochs - 1 - s.warmup_epochs
    if span == 0:
        return s.peak_lr
    progress = (epoch - s.warmup_epochs) / span
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads))


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the scale factor that was applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise UsageError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale
