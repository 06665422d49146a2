"""Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update in place, using ``p.grad``."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} ({p.name or p.shape}) has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ContractError("Adam state was built for a different parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    step_size = state.lr / c1
    root_c2 = np.sqrt(c2)
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        # lr * m_hat / (sqrt(v_hat) + eps)
        denom = np.sqrt(v)
        denom /= root_c2
        denom += state.epsilon
        p.data -= step_size * m / denom
    return state


class Adam:
    """Thin wrapper binding a parameter list to an ``AdamState``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, **kwargs):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kwargs)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state)
