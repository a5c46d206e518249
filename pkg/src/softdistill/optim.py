"""SGD with heavy-ball momentum, coupled L2 weight decay, cosine-with-warmup schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import NonFiniteError, ShapeError


@dataclass
class OptimState:
    """Velocity buffers in ``ModelParams.arrays()`` order.

    ``decay_mask[i]`` says whether array ``i`` receives weight decay; with the
    default layout (W0, b0, W1, b1, ...) weights are decayed and biases are not.
    """

    velocities: list[np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 0.0
    step: int = 0
    decay_mask: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if not self.decay_mask:
            self.decay_mask = [i % 2 == 0 for i in range(len(self.velocities))]

    @classmethod
    def zeros_like(cls, arrays, momentum: float = 0.9, weight_decay: float = 0.0):
        return cls([np.zeros_like(a) for a in arrays], momentum, weight_decay)

    def copy(self) -> "OptimState":
        return OptimState(
            [v.copy() for v in self.velocities],
            self.momentum,
            self.weight_decay,
            self.step,
            list(self.decay_mask),
        )


def l2_penalty_gradient(arrays, factor: float, decay_mask=None) -> list[np.ndarray]:
    """``factor * w`` for decayed arrays, zeros for exempt ones (biases)."""
    if factor < 0.0:
        raise ValueError(f"weight decay factor must be >= 0, got {factor}")
    if decay_mask is None:
        decay_mask = [i % 2 == 0 for i in range(len(arrays))]
    return [factor * w if d else np.zeros_like(w) for w, d in zip(arrays, decay_mask)]


def sgd_momentum_step(arrays, grads, state: OptimState, lr: float) -> None:
    """In-place update ``v <- mu v + (g + wd w)``; ``w <- w - lr v``."""
    if lr < 0.0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if not (len(arrays) == len(grads) == len(state.velocities)):
        raise ShapeError("parameter, gradient and velocity lists differ in length")
    for w, g, v in zip(arrays, grads, state.velocities):
        if w.shape != g.shape or w.shape != v.shape:
            raise ShapeError(f"shape mismatch: param {w.shape}, grad {g.shape}, velocity {v.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient")
    decay = l2_penalty_gradient(arrays, state.weight_decay, state.decay_mask)
    mu = state.momentum
    for w, g, v, d in zip(arrays, grads, state.velocities, decay):
        v *= mu
        v += g + d
        w -= lr * v
        if not np.isfinite(w).all():
            raise NonFiniteError("parameter update overflowed")
    state.step += 1


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(
                f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}, "
                f"{self.total_epochs}"
            )
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from ``base/W`` to ``base``, then a half cosine down to 0 at step S."""
    W, S = cfg.warmup_steps, cfg.total_steps
    if not 0 <= step <= S:
        raise ValueError(f"step {step} outside [0, {S}]")
    if step < W:
        return cfg.base_lr * (step + 1) / W
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - W) / (S - W)))
