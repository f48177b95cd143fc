"""Adam with decoupled weight decay, and a warmup-then-linear-decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor


@dataclass
class WarmupLinearSchedule:
    """Learning rate rising linearly from 0 to ``peak_lr`` over ``warmup_steps``,
    then falling linearly to 0 at ``total_steps``."""

    warmup_steps: int
    total_steps: int
    peak_lr: float

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.total_steps <= self.warmup_steps:
            raise ValueError("total_steps must exceed warmup_steps")

    @classmethod
    def with_warmup_fraction(cls, total_steps: int, peak_lr: float, fraction: float = 0.1):
        warmup = int(fraction * total_steps)
        if warmup >= total_steps:
            warmup = total_steps - 1
        return cls(warmup_steps=warmup, total_steps=total_steps, peak_lr=peak_lr)

    def __call__(self, step: int) -> float:
        return schedule_lr(self, step)


def schedule_lr(s: WarmupLinearSchedule, step: int) -> float:
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    return s.peak_lr * (s.total_steps - step) / (s.total_steps - s.warmup_steps)


@dataclass
class AdamState:
    """Adam moments plus hyperparameters. Decay is decoupled from the gradient."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float | None = None,
    decay_mask: Sequence[bool] | None = None,
) -> None:
    """Update ``params`` in place and advance ``state``.

    ``lr`` overrides ``state.learning_rate`` for this step (schedules pass it
    in). ``decay_mask[i]`` False exempts parameter ``i`` from weight decay.
    """
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    lr = state.learning_rate if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for i, p in enumerate(params):
        g = grads[i]
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m, v = state.first_moment[i], state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and (decay_mask is None or decay_mask[i]):
            p.data -= p.data.dtype.type(lr * state.weight_decay) * p.data
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


class Adam:
    """Thin stateful wrapper pairing a parameter list with :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], state: AdamState | None = None,
                 schedule: WarmupLinearSchedule | None = None, decay_mask: Sequence[bool] | None = None):
        self.params = list(params)
        self.state = state or AdamState()
        self.schedule = schedule
        self.decay_mask = decay_mask

    def current_lr(self) -> float:
        if self.schedule is None:
            return self.state.learning_rate
        return self.schedule(min(self.state.step, self.schedule.total_steps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        lr = self.current_lr()
        adam_step(self.params, [p.grad for p in self.params], self.state, lr=lr, decay_mask=self.decay_mask)
        return lr
