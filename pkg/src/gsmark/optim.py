"""Optimizer helpers shared by the training loops."""

from __future__ import annotations

import torch

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
DECAY_GAMMA = 0.1  # total lr decay factor over a run


def exp_decay_lambda(steps: int, gamma: float = DECAY_GAMMA):
    """Multiplier ``gamma ** (t / steps)`` for ``LambdaLR``."""
    steps = max(int(steps), 1)
    return lambda t: gamma ** (min(t, steps) / steps)


def adam(param_groups, lr: float = 1e-4) -> torch.optim.Adam:
    return torch.optim.Adam(param_groups, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def exp_scheduler(opt, steps: int, gamma: float = DECAY_GAMMA):
    return torch.optim.lr_scheduler.LambdaLR(opt, exp_decay_lambda(steps, gamma))
