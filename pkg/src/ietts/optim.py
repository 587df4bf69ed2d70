"""Adam optimizer and the learning-rate schedule.

Public surface is re-exported by the trainer module; kept separate so the
classifier pretraining can use it without importing the training loop.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Schedule:
    base_lr: float = 1e-3
    decay_start: int = 1000
    floor_lr: float = 1e-5
    pretrain_steps: int = 2000
    iterative_epochs: int = 40
    batch_size: int = 16

    def __post_init__(self):
        if self.floor_lr > self.base_lr:
            raise ValueError(f"floor_lr {self.floor_lr} exceeds base_lr {self.base_lr}")
        if min(self.decay_start, self.pretrain_steps, self.iterative_epochs,
               self.batch_size) < 0:
            raise ValueError("schedule steps must be >= 0")


def lr_at(step, schedule):
    """base_lr until decay_start, then exponential decay reaching floor_lr
    at 2*decay_start, clamped there."""
    if step < schedule.decay_start:
        return schedule.base_lr
    k = np.log(schedule.base_lr / schedule.floor_lr) / max(schedule.decay_start, 1)
    lr = schedule.base_lr * np.exp(-k * (step - schedule.decay_start))
    return float(max(lr, schedule.floor_lr))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state, lr):
    """Bias-corrected Adam update, in place.

    named_params: list of (name, Node) leaves with populated .grad
    (a missing grad counts as zero).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
