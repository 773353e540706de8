"""Adam with bias correction, plus a small optimizer wrapper over leaf tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import Tensor

__all__ = ["AdamState", "adam_step", "Adam"]


@dataclass
class AdamState:
    """First/second moments aligned with a parameter list; t counts steps taken."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-4,
                   beta1: float = 0.0, beta2: float = 0.99, eps: float = 1e-8) -> "AdamState":
        if eps <= 0:
            raise ValueError("eps must be positive")
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params],
                   t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Sequence[Tensor], grads: Sequence, state: AdamState):
    """One Adam update, in place on the parameter data.

    t is incremented before the bias correction, so the very first step uses
    correction factors (1 - beta^1).
    """
    if len(params) != len(state.m):
        raise ValueError("parameter/state length mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        ga = g.data if isinstance(g, Tensor) else np.asarray(g)
        if ga.shape != p.data.shape:
            raise ValueError(f"grad shape {ga.shape} != param shape {p.data.shape}")
        ga = ga.astype(p.data.dtype, copy=False)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * ga
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (ga * ga)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    return params, state


class Adam:
    """Holds a parameter list and its AdamState; consumes .grad of each leaf."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.0, beta2: float = 0.99, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr, beta1, beta2, eps)

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                grads.append(np.zeros_like(p.data))
            else:
                grads.append(p.grad.data)
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
