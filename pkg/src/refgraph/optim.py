"""Adam with bias correction, plus the staircase learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "learning_rate"]


def learning_rate(base: float, iteration: int, decay_every: int = 6000) -> float:
    """Base rate divided by 10 for every completed ``decay_every`` iterations.

    The division happens in decimal rather than binary floating point, so
    lr(6000) for base 0.001 is exactly the literal 0.0001.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    k = iteration // decay_every
    return float(Decimal(repr(base)).scaleb(-k))


@dataclass
class AdamState:
    """First/second moment estimates per parameter, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place, from each tensor's ``.grad``.

    Parameters with no gradient this step (detached branches) are skipped
    entirely so their moments stay untouched.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name in params:
        p = params[name]
        if p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
