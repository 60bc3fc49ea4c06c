"""Adam and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore

__all__ = ["OptimizerState", "adam_step", "plateau_scheduler"]


@dataclass
class OptimizerState:
    lr: float = 1e-3
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    best_metric: float = math.inf
    bad_calls: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def adam_step(
    params: ParamStore,
    state: OptimizerState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place, using each parameter's ``.grad``."""
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise ValueError(f"no gradient for parameters: {', '.join(missing)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.second_moment[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + eps)


def plateau_scheduler(
    state: OptimizerState, metric: float, factor: float = 0.9, patience: int = 1
) -> OptimizerState:
    """Shrink ``state.lr`` by ``factor`` once ``metric`` has failed to improve
    on the best value for more than ``patience`` consecutive calls.
    """
    if metric < state.best_metric:
        state.best_metric = metric
        state.bad_calls = 0
    else:
        state.bad_calls += 1
        if state.bad_calls > patience:
            state.lr *= factor
            state.bad_calls = 0
    return state
