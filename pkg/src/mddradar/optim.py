"""SGD with momentum and the annealing schedules shared by every training loop."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .numerics import ContractError, Tensor


def lr_at(step: int, total_steps: int, lr0: float, alpha: float, beta: float) -> float:
    """Inverse-decay schedule ``lr0 * (1 + alpha * p) ** -beta`` with ``p = step / total``."""
    p = step / max(total_steps, 1)
    return lr0 * (1.0 + alpha * p) ** (-beta)


def grl_schedule(step: int, total_steps: int, grl_delta: float) -> float:
    """Gradient-reversal ramp ``2 / (1 + exp(-delta * p)) - 1``: 0 at the start, tends to 1."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    p = step / max(total_steps, 1)
    return 2.0 / (1.0 + math.exp(-grl_delta * p)) - 1.0


class SGDState:
    """Momentum buffers keyed by parameter position."""

    def __init__(self):
        self.velocity: dict[int, np.ndarray] = {}


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: SGDState,
    step_index: int,
    cfg,
) -> float:
    """One momentum step: ``v = m v + g + wd w``; ``w -= lr v``. Returns the learning rate used.

    ``cfg`` needs ``lr0, momentum, weight_decay, lr_alpha, lr_beta, total_steps``.
    Parameters whose gradient is ``None`` still decay and keep their momentum.
    """
    lr = lr_at(step_index, cfg.total_steps, cfg.lr0, cfg.lr_alpha, cfg.lr_beta)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = 0.0
        elif np.shape(g) != p.shape:
            raise ContractError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        update = g + cfg.weight_decay * p.data
        v = state.velocity.get(i)
        v = update if v is None else cfg.momentum * v + update
        state.velocity[i] = v
        p.data = p.data - lr * v
    return lr
