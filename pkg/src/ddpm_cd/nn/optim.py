"""Adam / AdamW, learning-rate schedules and gradient clipping."""
from __future__ import annotations

import numpy as np

from ..errors import ContractError


class Adam:
    """Adam with bias correction.  ``weight_decay`` here is decoupled only in AdamW."""

    decoupled = False

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, names=None):
        self.params = list(params)
        self.names = list(names) if names is not None else [f"param[{i}]" for i in range(len(self.params))]
        self.base_lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr=None):
        lr = self.base_lr if lr is None else lr
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient; call backward() first")
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and self.decoupled:
                p.data *= 1 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


class AdamW(Adam):
    decoupled = True

    def __init__(self, params, lr=1e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2, names=None):
        super().__init__(params, lr, betas, eps, weight_decay, names)


def adam_step(params, state: Adam, lr_now: float) -> None:
    state.step(lr_now)


adamw_step = adam_step


def lr_warmup_then_constant(step: int, warmup_steps: int, target_lr: float) -> float:
    """Linear ramp from 0 to ``target_lr`` over ``warmup_steps``; constant after.

    ``warmup_steps == 0`` means constant ``target_lr`` from step 0.
    """
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if warmup_steps <= 0 or step >= warmup_steps:
        return float(target_lr)
    return target_lr * step / warmup_steps


def lr_linear_decay(epoch: int, total_epochs: int, initial_lr: float) -> float:
    """``initial_lr * (1 - epoch/total_epochs)``, clamped to 0 past the end."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    if epoch >= total_epochs:
        return 0.0
    return initial_lr * (1.0 - epoch / total_epochs)


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                              for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total
