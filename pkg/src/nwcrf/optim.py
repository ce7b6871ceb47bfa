"""Adam with bias correction and a linear learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float) -> None:
    """Update ``params`` in place; moment buffers are created on first use."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient {grads[name].shape} != parameter {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at(step: int, total_steps: int, endpoints: tuple[float, float] = (1e-4, 1e-5)) -> float:
    """Linear interpolation from endpoints[0] at step 0 to endpoints[1] at ``total_steps``."""
    start, end = endpoints
    if total_steps <= 0:
        return start
    frac = min(max(step / total_steps, 0.0), 1.0)
    return start + (end - start) * frac
